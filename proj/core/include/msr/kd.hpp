#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "msr/mv_model.hpp"
#include "msr/training.hpp"

namespace msr {

/// Frozen source-city memory matrices. Never trained, never written.
struct CityMemoryBank {
  std::vector<std::pair<std::string, Tensor>> memories;

  void validate(std::size_t rows, std::size_t cols) const;
  std::size_t size() const { return memories.size(); }
};

/// Memory snapshot files (`<city>.mem`) reuse the checkpoint container with a
/// single "memory" tensor.
void save_memory_file(const std::string& path, const std::string& city,
                      const Tensor& memory);
std::pair<std::string, Tensor> load_memory_file(const std::string& path);

/// Teacher: a full model plus per-target-city aggregation weights. The model's
/// memory tensor holds the target-city matrix, initialized by pretraining and
/// advanced once per optimization step.
struct TeacherParams {
  MVParams mv;
  Tensor agg_query, agg_key, agg_value;  // m x m

  static TeacherParams init(const MVConfig& cfg, std::uint64_t seed);
  std::vector<std::pair<std::string, Tensor*>> trainable();
  std::size_t param_count();
};

/// M' = M + sum_j rowsoftmax((M Wq)(M_j Wk)^T / sqrt(m)) (M_j Wv). Bank
/// matrices enter as constants, so no gradient ever reaches them.
Var aggregate_memories(Tape& tape, Var m_target, const CityMemoryBank& bank,
                       Tensor& w_query, Tensor& w_key, Tensor& w_value);

/// Aggregation over the stored target memory, then the regular forward pass
/// with the aggregated matrix as the sequence's starting memory.
MvForwardOut teacher_forward(Tape& tape, TeacherParams& teacher,
                             const CityMemoryBank& bank, const SampleInput& in);

/// Lean branch: memoryless context path, prediction through the shared head.
MvForwardOut student_forward(Tape& tape, MVParams& student, const SampleInput& in,
                             TeacherParams& teacher);

/// Positive loss weights via softplus with a 0.01 floor; effective values
/// start at 1.
struct LossWeights {
  Tensor rho_alpha, rho_beta, rho_gamma;

  static LossWeights init();
  Var alpha(Tape& tape);
  Var beta(Tape& tape);
  Var gamma(Tape& tape);
  double alpha_value() const;
  double beta_value() const;
  double gamma_value() const;
  std::vector<std::pair<std::string, Tensor*>> trainable();
};

/// alpha * bce(teacher) + beta * bce(student) - gamma * cos(v_T, v_S).
Var kd_loss(Tape& tape, const MvForwardOut& teacher_out, const MvForwardOut& student_out,
            int label, LossWeights& weights);

/// Plain MV trained on the target city for a fixed budget; returns the final
/// memory matrix as the teacher's starting point.
Tensor pretrain_target_memory(const CityDataset& target, const MVConfig& cfg,
                              const TrainConfig& train_cfg, std::size_t epochs = 1);

/// Pretraining that warm-starts the whole teacher: the teacher is the target
/// city's plain model advanced by the aggregation weights, so its branch is
/// useful from the first distillation step.
void pretrain_teacher(TeacherParams& teacher, const CityDataset& target,
                      const TrainConfig& train_cfg, std::size_t epochs = 1);

struct KdEpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double teacher_val_auc = 0.0;
  double teacher_val_rmse = 0.0;
  double student_val_auc = 0.0;
  double student_val_rmse = 0.0;
  double mean_cos = 0.0;
  double alpha = 0.0, beta = 0.0, gamma = 0.0;
  double secs = 0.0;
};

struct KdTrainResult {
  std::vector<KdEpochStats> history;
  std::size_t best_epoch = 0;
  double best_student_val_auc = 0.0;
};

/// Joint optimization of teacher, student and loss weights on the distillation
/// loss; the prediction head (the teacher's) receives gradients from both
/// branches. Checkpoint selection and early stopping follow the student's
/// validation AUC, since the student is the deployed model.
KdTrainResult train_kd(const CityDataset& target, const CityMemoryBank& bank,
                       TeacherParams& teacher, MVParams& student, LossWeights& weights,
                       const TrainConfig& cfg);

/// Snapshot the shared head into the student and serialize it standalone.
Checkpoint student_to_checkpoint(MVParams& student, TeacherParams& teacher,
                                 nlohmann::json extra_meta = {});

Checkpoint teacher_to_checkpoint(TeacherParams& teacher, nlohmann::json extra_meta = {});
TeacherParams teacher_from_checkpoint(const Checkpoint& ck);

}  // namespace msr
