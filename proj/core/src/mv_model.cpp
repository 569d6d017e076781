#include "msr/mv_model.hpp"

#include <cmath>

#include "msr/rng.hpp"

namespace msr {

std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::none: return "none";
    case Ablation::s1: return "s1";
    case Ablation::s2: return "s2";
    case Ablation::s3: return "s3";
    case Ablation::s4: return "s4";
  }
  return "none";
}

std::optional<Ablation> ablation_from_name(const std::string& s) {
  if (s == "none" || s.empty()) return Ablation::none;
  if (s == "s1") return Ablation::s1;
  if (s == "s2") return Ablation::s2;
  if (s == "s3") return Ablation::s3;
  if (s == "s4") return Ablation::s4;
  return std::nullopt;
}

DncConfig MVConfig::encoder_config() const {
  DncConfig d;
  d.ctx_width = ctx_width;
  d.read_heads = read_heads;
  d.mem_rows = mem_rows;
  d.mem_cols = mem_cols;
  d.hidden = hidden;
  d.layers = gru_layers;
  d.out_dim = embed_dim;
  d.cell = ablation == Ablation::s4 ? CellKind::lstm : CellKind::gru;
  d.with_memory = uses_memory();
  return d;
}

std::size_t MVParams::rep_width(std::size_t rep_index) const {
  return rep_index < 3 ? 2 * cfg.embed_dim + 1 : cfg.embed_dim;
}

std::size_t MVParams::v_width() const {
  const std::size_t reps = cfg.ablation == Ablation::s1 ? 3 : 6;
  return reps * cfg.embed_dim;
}

MVParams MVParams::init(const MVConfig& cfg, std::uint64_t seed) {
  MVParams p;
  p.cfg = cfg;
  const std::size_t d = cfg.embed_dim;
  p.passenger_enc = ViewEncoder::init_numeric(9, d, derive_seed(seed, "passenger_enc"));
  p.driver_enc = ViewEncoder::init_numeric(9, d, derive_seed(seed, "driver_enc"));
  p.order_enc = ViewEncoder::init_order(cfg.vocab, d, derive_seed(seed, "order_enc"));
  p.passenger_std = Standardizer{std::vector<double>(9, 0.0), std::vector<double>(9, 1.0)};
  p.driver_std = Standardizer{std::vector<double>(9, 0.0), std::vector<double>(9, 1.0)};
  p.ctx_std = Standardizer{std::vector<double>(cfg.ctx_width, 0.0),
                           std::vector<double>(cfg.ctx_width, 1.0)};
  p.encoder = DncParams::init(cfg.encoder_config(), derive_seed(seed, "encoder"));

  for (std::size_t f = 0; f < 6; ++f) {
    const std::size_t w = p.rep_width(f);
    const double ql = 1.0 / std::sqrt(static_cast<double>(d));
    const double kl = 1.0 / std::sqrt(static_cast<double>(w));
    p.attention[f] = AttentionTriple{
        Tensor::uniform({d, d}, ql, derive_seed(seed, "att_q", f)),
        Tensor::uniform({w, d}, kl, derive_seed(seed, "att_k", f)),
        Tensor::uniform({w, d}, kl, derive_seed(seed, "att_v", f)),
    };
  }
  const std::size_t vw = p.v_width();
  p.pred_w = Tensor::uniform({vw}, 1.0 / std::sqrt(static_cast<double>(vw)),
                             derive_seed(seed, "pred_w"));
  p.pred_b = Tensor::zeros({1}, true);
  if (cfg.uses_memory()) p.memory = Tensor::zeros({cfg.mem_rows, cfg.mem_cols});
  return p;
}

std::vector<std::pair<std::string, Tensor*>> MVParams::trainable() {
  std::vector<std::pair<std::string, Tensor*>> out;
  const bool s1 = cfg.ablation == Ablation::s1;
  const bool s2 = cfg.ablation == Ablation::s2;
  passenger_enc.collect("passenger_enc", out);
  driver_enc.collect("driver_enc", out);
  // concat mode never scores against the order embedding, so the order
  // encoder (like the query/key projections) is structurally inactive
  if (!s2) order_enc.collect("order_enc", out);
  encoder.collect("encoder", out);
  for (std::size_t f = 0; f < 6; ++f) {
    if (s1 && f < 3) continue;  // interaction representations absent
    std::string base = std::string("att_") + kRepNames[f];
    if (!s2) {
      out.emplace_back(base + ".q", &attention[f].query);
      out.emplace_back(base + ".k", &attention[f].key);
    }
    out.emplace_back(base + ".v", &attention[f].value);
  }
  out.emplace_back("pred_w", &pred_w);
  out.emplace_back("pred_b", &pred_b);
  return out;
}

std::size_t MVParams::param_count() {
  std::size_t n = 0;
  for (auto& [name, t] : trainable()) n += t->size();
  return n;
}

Var interact_views(Var a, Var b) {
  if (a.shape() != b.shape())
    throw ShapeError("interact_views: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Var inner = dot(a, b);
  Var elem = mul(a, b);
  Var outer_sum = rowsum(outer(a, b));
  return concat({inner, elem, outer_sum});
}

CombineResult attentive_combine(Tape& tape, Var order_embed, std::span<const Var> reps,
                                std::span<AttentionTriple> triples, bool concat_mode) {
  if (reps.size() != triples.size())
    throw ContractError("attentive_combine: " + std::to_string(reps.size()) +
                        " representations vs " + std::to_string(triples.size()) +
                        " attention triples");
  std::vector<Var> values;
  values.reserve(reps.size());
  for (std::size_t f = 0; f < reps.size(); ++f)
    values.push_back(vecmat(reps[f], tape.param(triples[f].value)));

  if (concat_mode) {
    return {concat(std::span<const Var>(values.data(), values.size())), Var()};
  }

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(order_embed.size()));
  std::vector<Var> scores;
  scores.reserve(reps.size());
  for (std::size_t f = 0; f < reps.size(); ++f) {
    Var q = vecmat(order_embed, tape.param(triples[f].query));
    Var k = vecmat(reps[f], tape.param(triples[f].key));
    scores.push_back(scale(dot(q, k), inv_sqrt_d));
  }
  Var weights = softmax(concat(std::span<const Var>(scores.data(), scores.size())));
  std::vector<Var> weighted;
  weighted.reserve(reps.size());
  for (std::size_t f = 0; f < reps.size(); ++f)
    weighted.push_back(scale_by(at(weights, f), values[f]));
  return {concat(std::span<const Var>(weighted.data(), weighted.size())), weights};
}

Var predict_msr(Tape& tape, Var v, Tensor& w, Tensor& b) {
  return sigmoid(add(dot(v, tape.param(w)), tape.param(b)));
}

Var mv_loss(Var logit, int label) {
  return bce_with_logit(logit, static_cast<double>(label));
}

MvForwardOut mv_forward(Tape& tape, MVParams& p, const SampleInput& in, Var memory0,
                        Tensor* pred_w, Tensor* pred_b) {
  // view embeddings; numeric features standardized with the stored statistics
  auto zp = p.passenger_std.apply(std::span<const double>(in.passenger));
  auto zd = p.driver_std.apply(std::span<const double>(in.driver));
  Var e_p = embed_numeric(tape, p.passenger_enc, zp);
  Var e_d = embed_numeric(tape, p.driver_enc, zd);
  Var e_o = embed_order(tape, p.order_enc, in.order);

  std::vector<std::vector<double>> zctx;
  zctx.reserve(in.context.size());
  for (const auto& slot : in.context) zctx.push_back(p.ctx_std.apply(slot));

  Var mem_in;
  if (p.cfg.uses_memory())
    mem_in = memory0.valid() ? memory0 : tape.constant(p.memory);
  auto enc = encode_context(tape, p.encoder, zctx, mem_in);
  Var e_c = enc.embedding;

  std::vector<Var> reps;
  if (p.cfg.ablation != Ablation::s1) {
    reps.push_back(interact_views(e_p, e_d));
    reps.push_back(interact_views(e_p, e_c));
    reps.push_back(interact_views(e_d, e_c));
  }
  reps.push_back(e_p);
  reps.push_back(e_d);
  reps.push_back(e_c);
  // active attention triples are contiguous: [3..5] under s1, all six otherwise
  std::span<AttentionTriple> triples =
      p.cfg.ablation == Ablation::s1
          ? std::span<AttentionTriple>(p.attention.data() + 3, 3)
          : std::span<AttentionTriple>(p.attention.data(), 6);

  CombineResult combined =
      attentive_combine(tape, e_o, std::span<const Var>(reps.data(), reps.size()),
                        triples, p.cfg.ablation == Ablation::s2);

  MvForwardOut out;
  out.v = combined.v;
  out.attention_weights = combined.weights;
  Tensor& head_w = pred_w ? *pred_w : p.pred_w;
  Tensor& head_b = pred_b ? *pred_b : p.pred_b;
  out.logit = add(dot(out.v, tape.param(head_w)), tape.param(head_b));
  out.y_hat = sigmoid(out.logit);
  out.memory_final = enc.memory_final;
  return out;
}

}  // namespace msr
