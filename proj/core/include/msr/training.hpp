#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "msr/datagen.hpp"
#include "msr/mv_model.hpp"
#include "msr/tensor.hpp"

namespace msr {

using ParamSet = std::vector<std::pair<std::string, Tensor*>>;

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over a fixed parameter set. step() consumes the grads
/// accumulated on the tensors; a parameter whose gradient was never populated
/// since the last zero_grad() is a contract error.
class Adam {
 public:
  Adam(ParamSet params, AdamConfig cfg = {});
  void zero_grad();
  void step();
  std::int64_t steps() const { return t_; }
  const ParamSet& params() const { return params_; }
  /// Global L2 clip applied to all grads as one vector; no-op if the norm is
  /// below max_norm. Returns the pre-clip norm.
  double clip_global_norm(double max_norm);

 private:
  ParamSet params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

// ---- metrics ------------------------------------------------------------------

struct Metrics {
  std::optional<double> auc;  // empty when only one class is present
  double rmse = 0.0;
};

/// AUC as the rank statistic (ties count one half) plus RMSE.
Metrics evaluate(std::span<const double> scores, std::span<const int> labels);

// ---- checkpoints ---------------------------------------------------------------

/// Container format: 8-byte magic "MSRCKPT1", little-endian u64 header length,
/// UTF-8 JSON header {version, meta, tensors:[{name, shape}]}, then raw
/// little-endian f64 payloads in header order.
struct Checkpoint {
  nlohmann::json meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& require(const std::string& name) const;
  void put(const std::string& name, const Tensor& t);
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

/// Full MV snapshot (all tensors regardless of active variant, standardizers,
/// memory) so load(save(p)) reproduces forward output bit-exactly.
Checkpoint mv_to_checkpoint(MVParams& params, nlohmann::json extra_meta = {});
MVParams mv_from_checkpoint(const Checkpoint& ck);
MVConfig mv_config_from_meta(const nlohmann::json& meta);

// ---- training -------------------------------------------------------------------

struct TrainConfig {
  std::size_t batch_size = 256;
  std::size_t max_epochs = 20;
  std::size_t patience = 3;
  double lr = 1e-3;
  double grad_clip = 10.0;
  std::uint64_t seed = 1;
};

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double val_auc = 0.0;
  double val_rmse = 0.0;
  double secs = 0.0;
};

struct TrainResult {
  std::vector<EpochStats> history;
  std::size_t best_epoch = 0;
  double best_val_auc = 0.0;
  /// Memory state at the very end of training (the best-validation snapshot
  /// is restored into the model itself).
  Tensor final_memory;
};

/// Epoch loop with seeded shuffling, per-step persistent-memory update, global
/// gradient clipping and early stopping on validation AUC. On return `params`
/// holds the best-validation weights and that epoch's memory, so re-scoring
/// reproduces the best validation AUC; the result also carries the
/// end-of-training memory snapshot.
TrainResult train_mv(const CityDataset& data, MVParams& params, const TrainConfig& cfg);

/// Scores a slice of rows with frozen parameters.
std::vector<double> score_rows(MVParams& params, std::span<const DatasetRow> rows);

std::vector<int> labels_of(std::span<const DatasetRow> rows);

void write_history_jsonl(const std::vector<EpochStats>& history, const std::string& path);

}  // namespace msr
