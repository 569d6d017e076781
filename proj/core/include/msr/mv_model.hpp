#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "msr/dnc.hpp"
#include "msr/features.hpp"
#include "msr/tensor.hpp"

namespace msr {

/// Model variants: s1 drops cross-view interactions, s2 swaps attention for
/// concatenation, s3 swaps the memory encoder for a plain GRU, s4 swaps the
/// GRU controller for an LSTM.
enum class Ablation { none, s1, s2, s3, s4 };

std::string ablation_name(Ablation a);
std::optional<Ablation> ablation_from_name(const std::string& s);

struct MVConfig {
  std::size_t embed_dim = 64;
  std::size_t mem_rows = 16;
  std::size_t mem_cols = 16;
  std::size_t read_heads = 2;
  std::size_t hidden = 64;
  std::size_t gru_layers = 1;
  std::size_t ctx_len = 8;
  std::size_t ctx_width = 7;
  OrderVocab vocab;
  Ablation ablation = Ablation::none;
  /// Lightweight architecture: memoryless context path, fewer parameters.
  bool student = false;

  bool uses_memory() const { return !student && ablation != Ablation::s3; }
  DncConfig encoder_config() const;
};

struct AttentionTriple {
  Tensor query;  // [d, d], applied to the order embedding
  Tensor key;    // [rep_width, d]
  Tensor value;  // [rep_width, d]
};

/// Representation labels in combination order.
constexpr std::array<const char*, 6> kRepNames = {"pd", "pc", "dc", "p", "d", "c"};

struct MVParams {
  MVConfig cfg;
  ViewEncoder passenger_enc;
  ViewEncoder driver_enc;
  ViewEncoder order_enc;
  Standardizer passenger_std, driver_std, ctx_std;  // fit on the training split
  DncParams encoder;
  std::array<AttentionTriple, 6> attention;
  Tensor pred_w;  // [v_width]
  Tensor pred_b;  // [1]
  /// Persistent memory snapshot; evolves across the training stream and is
  /// the exported city knowledge. Empty in memoryless variants.
  Tensor memory;

  static MVParams init(const MVConfig& cfg, std::uint64_t seed);

  /// Trainable tensors for the active variant, in a stable named order.
  std::vector<std::pair<std::string, Tensor*>> trainable();
  std::size_t param_count();
  std::size_t rep_width(std::size_t rep_index) const;
  std::size_t v_width() const;
};

/// One dataset row as consumed by the model (already extracted, unscaled).
struct SampleInput {
  WindowCounts passenger{};
  WindowCounts driver{};
  OrderCodes order;
  std::vector<std::vector<double>> context;
};

/// [inner product; element-wise product; outer product summed over its second
/// dimension] -> width 2d+1.
Var interact_views(Var a, Var b);

struct CombineResult {
  Var v;
  Var weights;  // softmax over representations; invalid in concat mode
};

/// Scores each representation against the order embedding (scaled dot
/// product, jointly softmaxed) and concatenates the weighted value
/// projections. concat_mode skips the scoring and concatenates value
/// projections directly.
CombineResult attentive_combine(Tape& tape, Var order_embed, std::span<const Var> reps,
                                std::span<AttentionTriple> triples, bool concat_mode);

/// y = sigma(v . w + b), strictly inside (0,1).
Var predict_msr(Tape& tape, Var v, Tensor& w, Tensor& b);

/// Numerically stable binary cross entropy of one prediction, from the logit.
Var mv_loss(Var logit, int label);

struct MvForwardOut {
  Var logit;
  Var y_hat;
  Var v;             // combined representation (consumed by distillation)
  Var memory_final;  // post-sequence memory, invalid in memoryless variants
  Var attention_weights;  // invalid under concat mode / s2
};

/// Full pipeline: embed views, encode context, cross-view interactions,
/// attentive combination, prediction. memory0 overrides the stored snapshot
/// (used by the teacher's aggregated memory); invalid means use params.memory.
/// pred_w/pred_b, when given, replace the model's own prediction head — the
/// distillation framework shares one head between teacher and student.
MvForwardOut mv_forward(Tape& tape, MVParams& params, const SampleInput& in,
                        Var memory0 = Var(), Tensor* pred_w = nullptr,
                        Tensor* pred_b = nullptr);

}  // namespace msr
