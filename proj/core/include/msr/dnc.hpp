#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "msr/tensor.hpp"

namespace msr {

enum class CellKind { gru, lstm };

struct DncConfig {
  std::size_t ctx_width = 7;
  std::size_t read_heads = 2;
  std::size_t mem_rows = 16;
  std::size_t mem_cols = 16;
  std::size_t hidden = 64;
  std::size_t layers = 1;
  std::size_t out_dim = 64;
  CellKind cell = CellKind::gru;
  /// false = memoryless controller: the plain-GRU context path used by the
  /// student model and the no-memory ablation.
  bool with_memory = true;

  std::size_t controller_input() const {
    return ctx_width + (with_memory ? read_heads * mem_cols : 0);
  }
  std::size_t interface_len() const;
};

/// One gate of a recurrent cell: pre-activation = w*x + u*h + b.
struct GateParams {
  Tensor w, u, b;
};

/// Stacked recurrent controller. Gate order: gru = {update, reset, candidate},
/// lstm = {input, forget, output, candidate}.
struct Controller {
  CellKind kind = CellKind::gru;
  std::vector<std::vector<GateParams>> layers;
};

struct DncParams {
  DncConfig cfg;
  Controller controller;
  Tensor w_out;        // stacked hidden states -> context embedding
  Tensor w_interface;  // stacked hidden states -> interface vector (memory mode)
  Tensor w_read_mix;   // concatenated read vectors -> embedding space (memory mode)

  static DncParams init(const DncConfig& cfg, std::uint64_t seed);
  void collect(const std::string& prefix,
               std::vector<std::pair<std::string, Tensor*>>& out);
};

/// Controller output slices that parameterize one memory interaction.
struct InterfaceVars {
  std::vector<Var> read_keys;       // R, each [m]
  std::vector<Var> read_strengths;  // R scalars, in [1, inf)
  Var write_key;                    // [m]
  Var write_strength;               // scalar in [1, inf)
  Var erase;                        // [m], in [0,1]
  Var write_vec;                    // [m]
  std::vector<Var> free_gates;      // R scalars in [0,1]
  Var alloc_gate;                   // scalar in [0,1]
  Var write_gate;                   // scalar in [0,1]
};

std::size_t interface_length(std::size_t read_heads, std::size_t mem_cols);

/// Deterministic slicing of the raw interface vector followed by squashing:
/// sigmoid on gates and erase, 1+softplus on strengths, identity on keys and
/// the write vector.
InterfaceVars parse_interface(Var raw, std::size_t read_heads, std::size_t mem_cols);

/// softmax over rows of strength * cosine(M_row, key); zero-norm rows score 0.
Var content_weighting(Var memory, Var key, Var strength);

/// Usage-ordered allocation: locations sorted by ascending usage, weight
/// (1 - u[phi_j]) * prod_{k<j} u[phi_k] placed back at the original index.
Var allocation_weighting(Var usage);

/// r = M^T w. Checks w lies in the weight simplex (tolerance 1e-9).
Var memory_read(Var memory, Var weight);

/// M ⊙ (E - w e^T) + w a^T. Checks w in the simplex and e in [0,1]^m.
Var memory_write(Var memory, Var write_weight, Var erase, Var write_vec);

struct DncState {
  std::vector<Var> h;  // per layer
  std::vector<Var> c;  // per layer, lstm only
  Var memory;          // invalid in memoryless mode
  Var usage;
  std::vector<Var> read_weights;
  std::vector<Var> reads;
};

/// Fresh per-sequence state: zero hidden/usage/reads, memory from the given
/// starting matrix (a snapshot leaf or an upstream graph node).
DncState dnc_initial_state(Tape& tape, DncParams& params, Var memory0);

struct DncStepTrace {
  std::vector<std::vector<double>> read_weights;
  std::vector<double> write_weight;
  std::vector<double> usage;
  std::vector<double> memory;
};

/// One controller + memory step; returns the step's output embedding and
/// advances the state in place.
Var dnc_step(Tape& tape, DncParams& params, std::span<const double> ctx_slot,
             DncState& state, DncStepTrace* trace = nullptr);

struct EncodeResult {
  Var embedding;
  Var memory_final;  // invalid in memoryless mode
};

/// Runs the encoder over a context sequence. With memory: the final embedding
/// adds the read-mix term over the last step's read vectors. Without memory:
/// a plain recurrent pass, output projection only.
EncodeResult encode_context(Tape& tape, DncParams& params,
                            std::span<const std::vector<double>> ctx, Var memory0,
                            std::vector<DncStepTrace>* trace = nullptr);

}  // namespace msr
