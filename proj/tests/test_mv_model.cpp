#include <doctest.h>

#include <cmath>
#include <random>

#include "msr/gradcheck.hpp"
#include "msr/mv_model.hpp"
#include "msr/rng.hpp"

using namespace msr;

namespace {

MVConfig tiny_config() {
  MVConfig cfg;
  cfg.embed_dim = 6;
  cfg.mem_rows = 4;
  cfg.mem_cols = 4;
  cfg.read_heads = 2;
  cfg.hidden = 5;
  cfg.gru_layers = 1;
  cfg.ctx_len = 3;
  cfg.vocab = OrderVocab{4, 4, 3};
  return cfg;
}

SampleInput random_sample(const MVConfig& cfg, std::uint64_t seed) {
  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> dist(0.0, 4.0);
  std::uniform_int_distribution<int> poi(1, 3);
  SampleInput s;
  for (auto& v : s.passenger) v = std::floor(dist(rng));
  for (auto& v : s.driver) v = std::floor(dist(rng));
  s.order = OrderCodes{poi(rng), poi(rng), poi(rng) % 2 + 1};
  s.context.assign(cfg.ctx_len, std::vector<double>(cfg.ctx_width));
  std::uniform_real_distribution<double> cdist(-1.0, 1.5);
  for (auto& slot : s.context)
    for (auto& v : slot) v = cdist(rng);
  return s;
}

std::vector<Tensor*> ptrs(MVParams& p) {
  std::vector<Tensor*> out;
  for (auto& [n, t] : p.trainable()) out.push_back(t);
  return out;
}

}  // namespace

TEST_CASE("interact_views hand cases") {
  Tape tp;
  Var a = tp.constant({1, 0}, {2});
  Var b = tp.constant({0, 1}, {2});
  auto v = interact_views(a, b).value();
  // [inner; element-wise; outer summed over the second dimension]
  CHECK(v == std::vector<double>{0, 0, 0, 1, 0});

  Var z = tp.constant({0, 0}, {2});
  for (double x : interact_views(z, z).value()) CHECK(x == 0.0);

  CHECK_THROWS_AS(interact_views(a, tp.constant({1, 2, 3}, {3})), ShapeError);
}

TEST_CASE("outer-product component equals explicit outer product summed over columns") {
  auto rng = make_rng(13);
  std::uniform_real_distribution<double> dist(-2.0, 2.0);
  for (int rep = 0; rep < 25; ++rep) {
    std::vector<double> ad(4), bd(4);
    for (auto& x : ad) x = dist(rng);
    for (auto& x : bd) x = dist(rng);

    Tape tp;
    Var a = tp.constant(ad, {4});
    Var b = tp.constant(bd, {4});
    auto v = interact_views(a, b).value();

    // brute-force n^2 outer product, summed over columns
    for (std::size_t i = 0; i < 4; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < 4; ++j) s += ad[i] * bd[j];
      CHECK(v[1 + 4 + i] == doctest::Approx(s).epsilon(1e-12));
      // algebraic identity: equals a_i * sum(b)
      double sb = bd[0] + bd[1] + bd[2] + bd[3];
      CHECK(v[1 + 4 + i] == doctest::Approx(ad[i] * sb).epsilon(1e-12));
    }
  }
}

TEST_CASE("attentive combine: symmetric scores give uniform weights") {
  const std::size_t d = 4;
  Tape tp;
  Var e_o = tp.constant(std::vector<double>(d, 0.0), {d});  // zero order embed -> all scores 0
  std::vector<Var> reps;
  std::vector<AttentionTriple> triples;
  for (int f = 0; f < 6; ++f) {
    reps.push_back(tp.constant({0.1 * f, 0.2, -0.3, 0.4}, {d}));
    triples.push_back(AttentionTriple{Tensor::uniform({d, d}, 0.5, 100 + f),
                                      Tensor::uniform({d, d}, 0.5, 200 + f),
                                      Tensor::uniform({d, d}, 0.5, 300 + f)});
  }
  auto res = attentive_combine(tp, e_o, reps, triples, false);
  for (double w : res.weights.value()) CHECK(w == doctest::Approx(1.0 / 6.0).epsilon(1e-12));
  CHECK(res.v.size() == 6 * d);

  double s = 0.0;
  for (double w : res.weights.value()) s += w;
  CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("attentive combine: a dominant score saturates its weight") {
  const std::size_t d = 2;
  Tape tp;
  Var e_o = tp.constant({1.0, 0.0}, {d});
  std::vector<Var> reps;
  std::vector<AttentionTriple> triples;
  for (int f = 0; f < 3; ++f) {
    reps.push_back(tp.constant({1.0, 0.0}, {d}));
    // identity-ish triples; boost one key so its score is ~ +20 sqrt(d) higher
    double boost = f == 1 ? 40.0 : 0.0;
    triples.push_back(AttentionTriple{Tensor({d, d}, {1, 0, 0, 1}, true),
                                      Tensor({d, d}, {boost + 1, 0, 0, 1}, true),
                                      Tensor({d, d}, {1, 0, 0, 1}, true)});
  }
  auto res = attentive_combine(tp, e_o, reps, triples, false);
  auto w = res.weights.value();
  CHECK(w[1] > 0.999999);
  CHECK(w[0] < 1e-6);
}

TEST_CASE("attention weights are permutation-equivariant") {
  const std::size_t d = 3;
  auto build = [&](const std::vector<int>& order) {
    Tape tp;
    Var e_o = tp.constant({0.5, -0.2, 0.8}, {d});
    std::vector<Var> reps;
    std::vector<AttentionTriple> triples;
    for (int f : order) {
      reps.push_back(tp.constant({0.1 + f, -0.4 * f, 0.3}, {d}));
      triples.push_back(AttentionTriple{Tensor::uniform({d, d}, 0.6, 10 + f),
                                        Tensor::uniform({d, d}, 0.6, 20 + f),
                                        Tensor::uniform({d, d}, 0.6, 30 + f)});
    }
    return attentive_combine(tp, e_o, reps, triples, false).weights.value();
  };
  auto w_abc = build({0, 1, 2});
  auto w_cab = build({2, 0, 1});
  CHECK(w_abc[0] == doctest::Approx(w_cab[1]).epsilon(1e-12));
  CHECK(w_abc[1] == doctest::Approx(w_cab[2]).epsilon(1e-12));
  CHECK(w_abc[2] == doctest::Approx(w_cab[0]).epsilon(1e-12));
}

TEST_CASE("predict_msr") {
  Tensor w({3}, {0, 0, 0}, true);
  Tensor b({1}, {0}, true);
  Tape tp;
  Var v = tp.constant({1, 2, 3}, {3});
  CHECK(predict_msr(tp, v, w, b).scalar() == doctest::Approx(0.5));

  // monotone in the logit, strictly inside (0,1)
  auto rng = make_rng(17);
  std::uniform_real_distribution<double> dist(-8.0, 8.0);
  double prev_logit = -1e9, prev_y = 0.0;
  std::vector<double> logits;
  for (int i = 0; i < 50; ++i) logits.push_back(dist(rng));
  std::sort(logits.begin(), logits.end());
  for (double z : logits) {
    Tape t2;
    Tensor w1({1}, {1.0}, true), b0({1}, {0.0}, true);
    Var y = predict_msr(t2, t2.constant({z}, {1}), w1, b0);
    CHECK(y.scalar() > 0.0);
    CHECK(y.scalar() < 1.0);
    if (z > prev_logit && prev_y > 0.0) CHECK(y.scalar() > prev_y);
    prev_logit = z;
    prev_y = y.scalar();
  }
}

TEST_CASE("mv_loss hand values") {
  Tape tp;
  // y_hat = 0.5 (logit 0) -> ln 2 either way
  CHECK(mv_loss(tp.scalar_const(0.0), 1).scalar() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(mv_loss(tp.scalar_const(0.0), 0).scalar() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));

  // y_hat -> y: loss -> 0
  CHECK(mv_loss(tp.scalar_const(200.0), 1).scalar() == doctest::Approx(0.0));

  // batch {(0.9, 1), (0.1, 0)} -> -(ln .9 + ln .9)/2
  auto logit_of = [](double p) { return std::log(p / (1.0 - p)); };
  double l1 = mv_loss(tp.scalar_const(logit_of(0.9)), 1).scalar();
  double l2 = mv_loss(tp.scalar_const(logit_of(0.1)), 0).scalar();
  CHECK(0.5 * (l1 + l2) == doctest::Approx(0.10536).epsilon(1e-4));
}

TEST_CASE("mv_forward is deterministic and shape-consistent across variants") {
  MVConfig cfg = tiny_config();
  for (Ablation a : {Ablation::none, Ablation::s1, Ablation::s2, Ablation::s3, Ablation::s4}) {
    MVConfig c = cfg;
    c.ablation = a;
    MVParams p = MVParams::init(c, 91);
    SampleInput in = random_sample(c, 92);

    Tape t1;
    auto o1 = mv_forward(t1, p, in);
    Tape t2;
    auto o2 = mv_forward(t2, p, in);
    CHECK(o1.y_hat.scalar() == o2.y_hat.scalar());
    CHECK(o1.v.size() == p.v_width());
    CHECK(o1.y_hat.scalar() > 0.0);
    CHECK(o1.y_hat.scalar() < 1.0);
  }

  // s1 drops three interaction representations: v narrows by 3 * value width
  MVConfig full = cfg;
  MVConfig s1 = cfg;
  s1.ablation = Ablation::s1;
  MVParams pf = MVParams::init(full, 93);
  MVParams p1 = MVParams::init(s1, 93);
  CHECK(pf.v_width() - p1.v_width() == 3 * cfg.embed_dim);
}

TEST_CASE("s2 output is invariant to query/key parameters") {
  MVConfig cfg = tiny_config();
  cfg.ablation = Ablation::s2;
  MVParams p = MVParams::init(cfg, 95);
  SampleInput in = random_sample(cfg, 96);

  Tape t1;
  double before = mv_forward(t1, p, in).y_hat.scalar();
  for (auto& att : p.attention) {
    for (auto& v : att.query.data) v += 13.7;
    for (auto& v : att.key.data) v -= 4.2;
  }
  Tape t2;
  double after = mv_forward(t2, p, in).y_hat.scalar();
  CHECK(before == after);

  // and q/k are excluded from the trainable set under s2
  for (auto& [name, t] : p.trainable()) {
    CHECK(name.find(".q") == std::string::npos);
    CHECK(name.find(".k") == std::string::npos);
  }
}

TEST_CASE("full end-to-end gradient check on one sample") {
  MVConfig cfg = tiny_config();
  MVParams p = MVParams::init(cfg, 101);
  // a nonzero memory snapshot so the read path carries signal
  p.memory = Tensor::uniform({cfg.mem_rows, cfg.mem_cols}, 0.5, 102, false);
  SampleInput in = random_sample(cfg, 103);

  auto params = ptrs(p);
  double err = finite_diff_check_deep(
      [&](Tape& t) { return mv_loss(mv_forward(t, p, in).logit, 1); },
      std::span<Tensor* const>(params.data(), params.size()));
  CHECK(err < 1e-4);
}

TEST_CASE("gradient check under each ablation") {
  for (Ablation a : {Ablation::s1, Ablation::s2, Ablation::s3, Ablation::s4}) {
    MVConfig cfg = tiny_config();
    cfg.ablation = a;
    MVParams p = MVParams::init(cfg, 110 + static_cast<int>(a));
    if (cfg.uses_memory())
      p.memory = Tensor::uniform({cfg.mem_rows, cfg.mem_cols}, 0.5, 120, false);
    SampleInput in = random_sample(cfg, 130 + static_cast<int>(a));
    auto params = ptrs(p);
    double err = finite_diff_check_deep(
        [&](Tape& t) { return mv_loss(mv_forward(t, p, in).logit, 0); },
        std::span<Tensor* const>(params.data(), params.size()));
    CHECK(err < 1e-4);
  }
}

TEST_CASE("student variant mirrors the lean context path") {
  MVConfig cfg = tiny_config();
  cfg.student = true;
  MVParams p = MVParams::init(cfg, 141);
  CHECK_FALSE(p.cfg.uses_memory());
  CHECK(p.memory.size() == 0);
  SampleInput in = random_sample(cfg, 142);
  Tape tp;
  auto out = mv_forward(tp, p, in);
  CHECK_FALSE(out.memory_final.valid());
  CHECK(out.v.size() == p.v_width());

  MVConfig full = tiny_config();
  MVParams pf = MVParams::init(full, 141);
  CHECK(p.param_count() < pf.param_count());
  CHECK(p.v_width() == pf.v_width());
}
