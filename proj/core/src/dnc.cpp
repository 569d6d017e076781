#include "msr/dnc.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "msr/rng.hpp"

namespace msr {

std::size_t interface_length(std::size_t r, std::size_t m) {
  // R read keys + R strengths + write key + write strength + erase + write
  // vector + R free gates + allocation gate + write gate
  return r * (m + 1) + (m + 1) + m + m + r + 2;
}

std::size_t DncConfig::interface_len() const {
  return interface_length(read_heads, mem_cols);
}

namespace {

GateParams make_gate(std::size_t out, std::size_t in, std::size_t hidden,
                     std::uint64_t seed) {
  const double wl = 1.0 / std::sqrt(static_cast<double>(in));
  const double ul = 1.0 / std::sqrt(static_cast<double>(hidden));
  return GateParams{
      Tensor::uniform({out, in}, wl, derive_seed(seed, "w")),
      Tensor::uniform({out, hidden}, ul, derive_seed(seed, "u")),
      Tensor::zeros({out}, true),
  };
}

}  // namespace

DncParams DncParams::init(const DncConfig& cfg, std::uint64_t seed) {
  DncParams p;
  p.cfg = cfg;
  p.controller.kind = cfg.cell;
  const std::size_t gates = cfg.cell == CellKind::gru ? 3 : 4;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::size_t in = l == 0 ? cfg.controller_input() : cfg.hidden;
    std::vector<GateParams> layer;
    for (std::size_t gi = 0; gi < gates; ++gi)
      layer.push_back(make_gate(cfg.hidden, in, cfg.hidden, derive_seed(seed, "gate", l * 8 + gi)));
    p.controller.layers.push_back(std::move(layer));
  }
  const std::size_t stacked = cfg.layers * cfg.hidden;
  const double sl = 1.0 / std::sqrt(static_cast<double>(stacked));
  p.w_out = Tensor::uniform({cfg.out_dim, stacked}, sl, derive_seed(seed, "w_out"));
  if (cfg.with_memory) {
    p.w_interface =
        Tensor::uniform({cfg.interface_len(), stacked}, sl, derive_seed(seed, "w_interface"));
    const std::size_t rm = cfg.read_heads * cfg.mem_cols;
    p.w_read_mix = Tensor::uniform({cfg.out_dim, rm},
                                   1.0 / std::sqrt(static_cast<double>(rm)),
                                   derive_seed(seed, "w_read_mix"));
  }
  return p;
}

void DncParams::collect(const std::string& prefix,
                        std::vector<std::pair<std::string, Tensor*>>& out) {
  static const char* gru_names[] = {"update", "reset", "cand"};
  static const char* lstm_names[] = {"in", "forget", "out", "cand"};
  for (std::size_t l = 0; l < controller.layers.size(); ++l) {
    auto& layer = controller.layers[l];
    for (std::size_t gi = 0; gi < layer.size(); ++gi) {
      const char* gn =
          controller.kind == CellKind::gru ? gru_names[gi] : lstm_names[gi];
      std::string base = prefix + ".l" + std::to_string(l) + "." + gn;
      out.emplace_back(base + ".w", &layer[gi].w);
      out.emplace_back(base + ".u", &layer[gi].u);
      out.emplace_back(base + ".b", &layer[gi].b);
    }
  }
  out.emplace_back(prefix + ".w_out", &w_out);
  if (cfg.with_memory) {
    out.emplace_back(prefix + ".w_interface", &w_interface);
    out.emplace_back(prefix + ".w_read_mix", &w_read_mix);
  }
}

// ---- interface parsing -------------------------------------------------------

InterfaceVars parse_interface(Var raw, std::size_t r, std::size_t m) {
  if (raw.shape().size() != 1 || raw.size() != interface_length(r, m))
    throw LayoutError("interface vector length " + std::to_string(raw.size()) +
                      ", expected " + std::to_string(interface_length(r, m)) +
                      " for R=" + std::to_string(r) + ", m=" + std::to_string(m));
  InterfaceVars out;
  std::size_t off = 0;
  auto take = [&](std::size_t len) {
    Var v = slice(raw, off, len);
    off += len;
    return v;
  };
  auto strength = [](Var v) { return add_const(softplus(v), 1.0); };

  for (std::size_t i = 0; i < r; ++i) out.read_keys.push_back(take(m));
  for (std::size_t i = 0; i < r; ++i) out.read_strengths.push_back(strength(take(1)));
  out.write_key = take(m);
  out.write_strength = strength(take(1));
  out.erase = sigmoid(take(m));
  out.write_vec = take(m);
  for (std::size_t i = 0; i < r; ++i) out.free_gates.push_back(sigmoid(take(1)));
  out.alloc_gate = sigmoid(take(1));
  out.write_gate = sigmoid(take(1));
  return out;
}

// ---- addressing ---------------------------------------------------------------

Var content_weighting(Var memory, Var key, Var strength) {
  // cosine similarity of every memory row against the key; the 1e-12 floor in
  // the denominator maps zero-norm rows to similarity 0 instead of NaN
  Var mk = matvec(memory, key);                                   // [n]
  Var row_norms = sqrt_v(rowsum(mul(memory, memory)));            // [n]
  Var key_norm = sqrt_v(dot(key, key));                           // [1]
  Var denom = add_const(scale_by(key_norm, row_norms), 1e-12);    // [n]
  Var cos = divide(mk, denom);
  return softmax(scale_by(strength, cos));
}

Var allocation_weighting(Var usage) {
  const auto& u = usage.value();
  const std::size_t n = u.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return u[a] < u[b]; });

  Tape& tape = *usage.tape();
  std::vector<Var> slots(n);
  Var cum = tape.scalar_const(1.0);
  for (std::size_t j = 0; j < n; ++j) {
    Var uj = at(usage, order[j]);
    slots[order[j]] = mul(one_minus(uj), cum);
    cum = mul(cum, uj);
  }
  return concat(std::span<const Var>(slots.data(), slots.size()));
}

namespace {

void require_simplex(const Var& w, const char* what) {
  constexpr double tol = 1e-9;
  double s = 0.0;
  for (double v : w.value()) {
    if (v < -tol || v > 1.0 + tol)
      throw ContractError(std::string(what) + ": weight entry " + std::to_string(v) +
                          " outside [0,1]");
    s += v;
  }
  if (s > 1.0 + tol)
    throw ContractError(std::string(what) + ": weight sum " + std::to_string(s) +
                        " exceeds 1");
}

void require_unit_interval(const Var& v, const char* what) {
  constexpr double tol = 1e-9;
  for (double x : v.value())
    if (x < -tol || x > 1.0 + tol)
      throw ContractError(std::string(what) + ": entry " + std::to_string(x) +
                          " outside [0,1]");
}

}  // namespace

Var memory_read(Var memory, Var weight) {
  if (weight.size() != memory.shape()[0])
    throw ShapeError("memory_read: weight " + shape_str(weight.shape()) +
                     " vs memory " + shape_str(memory.shape()));
  require_simplex(weight, "memory_read");
  return vecmat(weight, memory);
}

Var memory_write(Var memory, Var write_weight, Var erase, Var write_vec) {
  const auto n = memory.shape()[0], m = memory.shape()[1];
  if (write_weight.size() != n || erase.size() != m || write_vec.size() != m)
    throw ShapeError("memory_write: memory " + shape_str(memory.shape()) +
                     ", weight " + shape_str(write_weight.shape()) + ", erase " +
                     shape_str(erase.shape()) + ", write " + shape_str(write_vec.shape()));
  require_simplex(write_weight, "memory_write");
  require_unit_interval(erase, "memory_write erase");
  Tape& tape = *memory.tape();
  Var ones = tape.constant(std::vector<double>(n * m, 1.0), {n, m});
  Var keep = sub(ones, outer(write_weight, erase));
  return add(mul(memory, keep), outer(write_weight, write_vec));
}

// ---- recurrent cells -----------------------------------------------------------

namespace {

Var gate_pre(Tape& tape, GateParams& g, Var x, Var h) {
  return add(add(matvec(tape.param(g.w), x),
                 matvec(tape.param(g.u), h)),
             tape.param(g.b));
}

Var gru_cell(Tape& tape, std::vector<GateParams>& gates, Var x, Var& h) {
  Var z = sigmoid(gate_pre(tape, gates[0], x, h));
  Var r = sigmoid(gate_pre(tape, gates[1], x, h));
  Var cand = tanh_v(add(add(matvec(tape.param(gates[2].w), x),
                            matvec(tape.param(gates[2].u), mul(r, h))),
                        tape.param(gates[2].b)));
  h = add(mul(one_minus(z), h), mul(z, cand));
  return h;
}

Var lstm_cell(Tape& tape, std::vector<GateParams>& gates, Var x, Var& h, Var& c) {
  Var in = sigmoid(gate_pre(tape, gates[0], x, h));
  Var forget = sigmoid(gate_pre(tape, gates[1], x, h));
  Var out = sigmoid(gate_pre(tape, gates[2], x, h));
  Var cand = tanh_v(gate_pre(tape, gates[3], x, h));
  c = add(mul(forget, c), mul(in, cand));
  h = mul(out, tanh_v(c));
  return h;
}

Var run_controller(Tape& tape, DncParams& p, Var input, DncState& state) {
  Var x = input;
  for (std::size_t l = 0; l < p.controller.layers.size(); ++l) {
    if (p.controller.kind == CellKind::gru)
      x = gru_cell(tape, p.controller.layers[l], x, state.h[l]);
    else
      x = lstm_cell(tape, p.controller.layers[l], x, state.h[l], state.c[l]);
  }
  std::vector<Var> hs = state.h;
  return concat(std::span<const Var>(hs.data(), hs.size()));  // [L*H]
}

}  // namespace

DncState dnc_initial_state(Tape& tape, DncParams& p, Var memory0) {
  const auto& cfg = p.cfg;
  DncState s;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    s.h.push_back(tape.constant(std::vector<double>(cfg.hidden, 0.0), {cfg.hidden}));
    if (cfg.cell == CellKind::lstm)
      s.c.push_back(tape.constant(std::vector<double>(cfg.hidden, 0.0), {cfg.hidden}));
  }
  if (cfg.with_memory) {
    if (!memory0.valid())
      throw ContractError("memory-mode encoder needs a starting memory matrix");
    if (memory0.shape() != Shape{cfg.mem_rows, cfg.mem_cols})
      throw ShapeError("starting memory " + shape_str(memory0.shape()) + ", expected " +
                       shape_str({cfg.mem_rows, cfg.mem_cols}));
    s.memory = memory0;
    s.usage = tape.constant(std::vector<double>(cfg.mem_rows, 0.0), {cfg.mem_rows});
    for (std::size_t i = 0; i < cfg.read_heads; ++i) {
      s.read_weights.push_back(
          tape.constant(std::vector<double>(cfg.mem_rows, 0.0), {cfg.mem_rows}));
      s.reads.push_back(
          tape.constant(std::vector<double>(cfg.mem_cols, 0.0), {cfg.mem_cols}));
    }
  }
  return s;
}

Var dnc_step(Tape& tape, DncParams& p, std::span<const double> ctx_slot,
             DncState& state, DncStepTrace* trace) {
  const auto& cfg = p.cfg;
  if (ctx_slot.size() != cfg.ctx_width)
    throw ShapeError("context slot width " + std::to_string(ctx_slot.size()) +
                     ", expected " + std::to_string(cfg.ctx_width));

  Var x = tape.constant(std::vector<double>(ctx_slot.begin(), ctx_slot.end()),
                        {cfg.ctx_width});
  if (cfg.with_memory) {
    std::vector<Var> parts{x};
    parts.insert(parts.end(), state.reads.begin(), state.reads.end());
    x = concat(std::span<const Var>(parts.data(), parts.size()));
  }

  Var stacked = run_controller(tape, p, x, state);
  Var out = matvec(tape.param(p.w_out), stacked);
  if (!cfg.with_memory) return out;

  Var raw = matvec(tape.param(p.w_interface), stacked);
  InterfaceVars iv = parse_interface(raw, cfg.read_heads, cfg.mem_cols);

  // write weight: gated blend of allocation (over current usage) and content
  // lookup on the pre-write memory
  Var alloc = allocation_weighting(state.usage);
  Var content_w = content_weighting(state.memory, iv.write_key, iv.write_strength);
  Var write_w = scale_by(iv.write_gate,
                         add(scale_by(iv.alloc_gate, alloc),
                             scale_by(one_minus(iv.alloc_gate), content_w)));

  state.memory = memory_write(state.memory, write_w, iv.erase, iv.write_vec);

  // usage rises where we wrote, decays where read heads freed locations
  Var grown = sub(add(state.usage, write_w), mul(state.usage, write_w));
  Var psi;
  for (std::size_t i = 0; i < cfg.read_heads; ++i) {
    Var freed = one_minus(scale_by(iv.free_gates[i], state.read_weights[i]));
    psi = i == 0 ? freed : mul(psi, freed);
  }
  state.usage = mul(grown, psi);

  // read from the just-written memory
  for (std::size_t i = 0; i < cfg.read_heads; ++i) {
    state.read_weights[i] =
        content_weighting(state.memory, iv.read_keys[i], iv.read_strengths[i]);
    state.reads[i] = memory_read(state.memory, state.read_weights[i]);
  }

  if (trace) {
    for (const auto& rw : state.read_weights) trace->read_weights.push_back(rw.value());
    trace->write_weight = write_w.value();
    trace->usage = state.usage.value();
    trace->memory = state.memory.value();
  }
  return out;
}

EncodeResult encode_context(Tape& tape, DncParams& p,
                            std::span<const std::vector<double>> ctx, Var memory0,
                            std::vector<DncStepTrace>* trace) {
  if (ctx.empty()) throw ContractError("encode_context: empty context sequence");
  DncState state = dnc_initial_state(tape, p, memory0);
  Var out;
  for (const auto& slot : ctx) {
    DncStepTrace step_trace;
    out = dnc_step(tape, p, slot, state, trace ? &step_trace : nullptr);
    if (trace) trace->push_back(std::move(step_trace));
  }
  if (!p.cfg.with_memory) return {out, Var()};

  std::vector<Var> reads = state.reads;
  Var mixed = matvec(tape.param(p.w_read_mix),
                     concat(std::span<const Var>(reads.data(), reads.size())));
  return {add(out, mixed), state.memory};
}

}  // namespace msr
