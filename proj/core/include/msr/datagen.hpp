#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "msr/features.hpp"
#include "msr/mv_model.hpp"

namespace msr {

/// Knobs for one synthetic city. All cities share a global coefficient vector;
/// a city-specific perturbation scaled by `divergence` controls how far its
/// label process drifts from the shared structure (0 = identical everywhere).
struct CityProfile {
  std::string city = "BJ";
  std::size_t n_samples = 1000;
  double negative_rate = 0.12;
  double divergence = 0.15;
  double ar_coeff = 0.7;
  double noise_scale = 0.4;
  std::size_t ctx_len = 8;
  /// Deterministic labels (y = 1 iff latent > 1/2) for separability tests.
  bool deterministic_labels = false;
  std::uint64_t seed = 1;
};

struct DatasetRow {
  std::string pair_id;
  std::string city;
  std::int64_t ts = 0;
  int label = 0;
  double latent = 0.0;  // ground-truth success probability; evaluation only
  std::string passenger_id, driver_id;  // not serialized
  SampleInput features;
};

/// Rows are time-ordered. Split layout: [0, fit) for fitting, [fit,
/// train) for validation (the last tenth of the training set), [train, n)
/// for test (a tenth of all rows).
struct CityDataset {
  std::string city;
  std::vector<DatasetRow> rows;

  std::size_t train_count() const { return rows.size() * 9 / 10; }
  std::size_t fit_count() const { return train_count() - train_count() / 10; }
  std::span<const DatasetRow> fit() const {
    return {rows.data(), fit_count()};
  }
  std::span<const DatasetRow> val() const {
    return {rows.data() + fit_count(), train_count() - fit_count()};
  }
  std::span<const DatasetRow> test() const {
    return {rows.data() + train_count(), rows.size() - train_count()};
  }
};

struct GeneratedCity {
  CityDataset dataset;
  EventLog log;  // raw event streams, kept for oracle verification
};

/// Seeded, pure generator: context follows AR(1) dynamics, the latent success
/// probability is logistic in a fixed feature map, the intercept is searched
/// so the expected negative rate hits the profile's target within 1e-3.
GeneratedCity generate_city(const CityProfile& profile);

struct BenchmarkConfig {
  std::size_t source_rows = 200'000;
  std::size_t target_rows = 5'000;
  double divergence = 0.15;
  std::size_t ctx_len = 8;
  std::uint64_t seed = 7;
};

inline const std::vector<std::string> kSourceCities = {"BJ", "SZ", "SH", "CD"};
inline const std::vector<std::string> kTargetCities = {"DZ", "ZZ"};

struct Benchmark {
  std::vector<CityDataset> sources;
  std::vector<CityDataset> targets;
};

/// Four data-rich source cities plus two data-poor target cities sharing the
/// global label structure.
Benchmark make_benchmark(const BenchmarkConfig& cfg);

CityProfile benchmark_profile(const BenchmarkConfig& cfg, const std::string& city,
                              bool is_target);

// ---- dataset files ----------------------------------------------------------

/// One JSON object per line, UTF-8:
/// {"pair_id","city","ts","label","latent","passenger":{counts},"driver":{counts},
///  "order":{"start_poi","end_poi","product"},"context":[[7 floats] x T]}
void write_jsonl(const CityDataset& dataset, const std::string& path);
CityDataset read_jsonl(const std::string& path);

nlohmann::json row_to_json(const DatasetRow& row);
/// With require_label = false (inference requests), "label" and "latent" are
/// optional and left at their defaults.
DatasetRow row_from_json(const nlohmann::json& j, bool require_label = true);

}  // namespace msr
