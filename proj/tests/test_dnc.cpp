#include <doctest.h>

#include <cmath>
#include <random>

#include "msr/dnc.hpp"
#include "msr/gradcheck.hpp"
#include "msr/rng.hpp"

using namespace msr;

namespace {

DncConfig tiny_config(bool with_memory = true, CellKind cell = CellKind::gru) {
  DncConfig cfg;
  cfg.ctx_width = 7;
  cfg.read_heads = 2;
  cfg.mem_rows = 4;
  cfg.mem_cols = 4;
  cfg.hidden = 6;
  cfg.layers = 1;
  cfg.out_dim = 5;
  cfg.cell = cell;
  cfg.with_memory = with_memory;
  return cfg;
}

std::vector<std::vector<double>> random_context(std::size_t steps, std::size_t width,
                                                std::uint64_t seed) {
  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<std::vector<double>> ctx(steps, std::vector<double>(width));
  for (auto& slot : ctx)
    for (auto& v : slot) v = dist(rng);
  return ctx;
}

std::vector<Tensor*> param_ptrs(DncParams& p) {
  std::vector<std::pair<std::string, Tensor*>> named;
  p.collect("dnc", named);
  std::vector<Tensor*> out;
  for (auto& [name, t] : named) out.push_back(t);
  return out;
}

bool in_simplex(const std::vector<double>& w, double tol = 1e-9) {
  double s = 0.0;
  for (double v : w) {
    if (v < -tol || v > 1.0 + tol) return false;
    s += v;
  }
  return s <= 1.0 + tol;
}

}  // namespace

TEST_CASE("interface layout length") {
  CHECK(interface_length(2, 16) == 87);  // 2*17 + 17 + 16 + 16 + 2 + 2
  CHECK(interface_length(1, 4) == 5 + 5 + 4 + 4 + 1 + 2);
}

TEST_CASE("parse_interface squashing of zeros") {
  Tape tp;
  Var raw = tp.constant(std::vector<double>(interface_length(2, 16), 0.0), {87});
  auto iv = parse_interface(raw, 2, 16);
  for (double e : iv.erase.value()) CHECK(e == doctest::Approx(0.5));
  CHECK(iv.alloc_gate.scalar() == doctest::Approx(0.5));
  CHECK(iv.write_gate.scalar() == doctest::Approx(0.5));
  for (auto& g : iv.free_gates) CHECK(g.scalar() == doctest::Approx(0.5));
  for (auto& s : iv.read_strengths)
    CHECK(s.scalar() == doctest::Approx(1.0 + std::log(2.0)).epsilon(1e-12));
  CHECK(iv.write_strength.scalar() == doctest::Approx(1.0 + std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("parse_interface saturates without overflow and rejects bad lengths") {
  Tape tp;
  std::vector<double> raw(interface_length(1, 4), 0.0);
  raw.back() = 1000.0;  // write gate
  auto iv = parse_interface(tp.constant(raw, {raw.size()}), 1, 4);
  CHECK(iv.write_gate.scalar() == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(std::isfinite(iv.write_gate.scalar()));

  CHECK_THROWS_AS(parse_interface(tp.constant({0, 0, 0}, {3}), 2, 16), LayoutError);
}

TEST_CASE("content weighting") {
  Tape tp;
  // rows e1, e2; key e1 with a large strength -> nearly one-hot
  Var m = tp.constant({1, 0, 0, 1}, {2, 2});
  Var key = tp.constant({1, 0}, {2});
  auto w = content_weighting(m, key, tp.scalar_const(50.0)).value();
  CHECK(w[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(w[1] == doctest::Approx(0.0).epsilon(1e-9));

  // key orthogonal to all rows -> uniform
  Var key2 = tp.constant({0, 0}, {2});
  auto w2 = content_weighting(m, key2, tp.scalar_const(3.0)).value();
  CHECK(w2[0] == doctest::Approx(0.5).epsilon(1e-12));

  // strength 1, identity rows, diagonal key -> equal cosines -> (0.5, 0.5)
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  Var key3 = tp.constant({inv_sqrt2, inv_sqrt2}, {2});
  auto w3 = content_weighting(m, key3, tp.scalar_const(1.0)).value();
  CHECK(w3[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(w3[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("content weighting treats zero-norm rows as similarity zero") {
  Tape tp;
  Var m = tp.constant({0, 0, 3, 4}, {2, 2});
  Var key = tp.constant({3, 4}, {2});
  auto w = content_weighting(m, key, tp.scalar_const(10.0)).value();
  CHECK(std::isfinite(w[0]));
  CHECK(w[1] > w[0]);  // the aligned row wins
}

TEST_CASE("allocation weighting") {
  Tape tp;
  auto alloc = [&](std::vector<double> u) {
    return allocation_weighting(tp.constant(u, {u.size()})).value();
  };
  CHECK(alloc({0, 0, 0}) == std::vector<double>{1, 0, 0});
  CHECK(alloc({1, 1, 1}) == std::vector<double>{0, 0, 0});

  auto a = alloc({0.5, 0.0});
  CHECK(a[0] == doctest::Approx(0.0));
  CHECK(a[1] == doctest::Approx(1.0));

  // general case stays in the simplex
  auto b = alloc({0.3, 0.9, 0.1, 0.6});
  CHECK(in_simplex(b));
}

TEST_CASE("memory read") {
  Tape tp;
  Var m = tp.constant({1, 2, 3, 4, 5, 6}, {2, 3});
  CHECK(memory_read(m, tp.constant({1, 0}, {2})).value() == std::vector<double>{1, 2, 3});
  CHECK(memory_read(m, tp.constant({0, 0}, {2})).value() == std::vector<double>{0, 0, 0});

  Var m2 = tp.constant({1, 0, 0, 1}, {2, 2});
  auto r = memory_read(m2, tp.constant({0.5, 0.5}, {2})).value();
  CHECK(r == std::vector<double>{0.5, 0.5});

  CHECK_THROWS_AS(memory_read(m, tp.constant({0.9, 0.9}, {2})), ContractError);
}

TEST_CASE("memory write") {
  Tape tp;
  std::vector<double> mdata{1, 2, 3, 4, 5, 6};
  Var m = tp.constant(mdata, {3, 2});
  Var a = tp.constant({9, 8}, {2});

  // one-hot write with full erase replaces exactly that row
  Var onehot = tp.constant({0, 1, 0}, {3});
  Var full_erase = tp.constant({1, 1}, {2});
  auto next = memory_write(m, onehot, full_erase, a).value();
  CHECK(next == std::vector<double>{1, 2, 9, 8, 5, 6});

  // zero erase is purely additive
  Var no_erase = tp.constant({0, 0}, {2});
  auto add_only = memory_write(m, onehot, no_erase, a).value();
  CHECK(add_only == std::vector<double>{1, 2, 12, 12, 5, 6});

  // zero write weight is a no-op
  Var zero_w = tp.constant({0, 0, 0}, {3});
  CHECK(memory_write(m, zero_w, full_erase, a).value() == mdata);

  CHECK_THROWS_AS(memory_write(m, onehot, tp.constant({2.0, 0.0}, {2}), a), ContractError);
}

TEST_CASE("write then read round trip is exact") {
  Tape tp;
  auto rng = make_rng(5);
  std::uniform_real_distribution<double> dist(-3.0, 3.0);
  std::vector<double> mdata(4 * 3);
  for (auto& v : mdata) v = dist(rng);
  std::vector<double> adata{0.25, -1.5, 2.75};

  Var m = tp.constant(mdata, {4, 3});
  Var w = tp.constant({0, 0, 1, 0}, {4});
  Var e = tp.constant({1, 1, 1}, {3});
  Var a = tp.constant(adata, {3});
  Var written = memory_write(m, w, e, a);

  // the written row reads back bit-exactly; other rows untouched
  CHECK(memory_read(written, w).value() == adata);
  const auto& nv = written.value();
  for (std::size_t r = 0; r < 4; ++r) {
    if (r == 2) continue;
    for (std::size_t c = 0; c < 3; ++c) CHECK(nv[r * 3 + c] == mdata[r * 3 + c]);
  }
}

TEST_CASE("gru step: zero weights keep zero state, determinism holds") {
  DncConfig cfg = tiny_config(false);
  DncParams p = DncParams::init(cfg, 3);
  for (auto& layer : p.controller.layers)
    for (auto& g : layer) {
      std::fill(g.w.data.begin(), g.w.data.end(), 0.0);
      std::fill(g.u.data.begin(), g.u.data.end(), 0.0);
      std::fill(g.b.data.begin(), g.b.data.end(), 0.0);
    }
  Tape tp;
  DncState st = dnc_initial_state(tp, p, Var());
  std::vector<double> x(cfg.ctx_width, 0.7);
  dnc_step(tp, p, x, st);
  for (double h : st.h[0].value()) CHECK(h == 0.0);

  // same params/inputs on fresh tapes give identical trajectories
  DncParams q = DncParams::init(cfg, 11);
  auto run = [&] {
    Tape t;
    DncState s = dnc_initial_state(t, q, Var());
    Var out;
    for (int i = 0; i < 3; ++i) out = dnc_step(t, q, x, s);
    return out.value();
  };
  CHECK(run() == run());
}

TEST_CASE("gru chain gradient vs finite differences") {
  DncConfig cfg = tiny_config(false);
  DncParams p = DncParams::init(cfg, 17);
  auto ctx = random_context(3, cfg.ctx_width, 18);
  auto params = param_ptrs(p);
  double err = finite_diff_check(
      [&](Tape& t) {
        return sum(encode_context(t, p, ctx, Var()).embedding);
      },
      params);
  CHECK(err < 1e-4);
}

TEST_CASE("dnc step invariants under zero controller weights") {
  DncConfig cfg = tiny_config(true);
  DncParams p = DncParams::init(cfg, 23);
  std::vector<std::pair<std::string, Tensor*>> named;
  p.collect("z", named);
  for (auto& [n, t] : named) std::fill(t->data.begin(), t->data.end(), 0.0);

  Tape tp;
  auto rng = make_rng(29);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> mem(cfg.mem_rows * cfg.mem_cols);
  for (auto& v : mem) v = dist(rng);
  DncState st = dnc_initial_state(tp, p, tp.constant(mem, {cfg.mem_rows, cfg.mem_cols}));
  std::vector<double> x(cfg.ctx_width, 0.3);
  DncStepTrace trace;
  Var out = dnc_step(tp, p, x, st, &trace);

  for (double v : out.value()) CHECK(v == 0.0);
  CHECK(in_simplex(trace.write_weight));
  for (auto& rw : trace.read_weights) CHECK(in_simplex(rw));
  for (double v : trace.memory) CHECK(std::isfinite(v));
  for (double u : trace.usage) {
    CHECK(u >= 0.0);
    CHECK(u <= 1.0);
  }
}

TEST_CASE("head weights stay in the simplex over a full sequence") {
  for (std::uint64_t seed : {101ULL, 102ULL, 103ULL}) {
    DncConfig cfg = tiny_config(true);
    DncParams p = DncParams::init(cfg, seed);
    auto ctx = random_context(6, cfg.ctx_width, seed + 1000);
    Tape tp;
    Var mem0 = tp.constant(std::vector<double>(cfg.mem_rows * cfg.mem_cols, 0.0),
                           {cfg.mem_rows, cfg.mem_cols});
    std::vector<DncStepTrace> trace;
    encode_context(tp, p, ctx, mem0, &trace);
    CHECK(trace.size() == 6);
    for (const auto& step : trace) {
      CHECK(in_simplex(step.write_weight));
      for (const auto& rw : step.read_weights) CHECK(in_simplex(rw));
      for (double u : step.usage) {
        CHECK(u >= -1e-12);
        CHECK(u <= 1.0 + 1e-12);
      }
    }
  }
}

TEST_CASE("full dnc sequence gradient vs finite differences") {
  DncConfig cfg = tiny_config(true);
  DncParams p = DncParams::init(cfg, 31);
  auto ctx = random_context(4, cfg.ctx_width, 32);
  auto params = param_ptrs(p);
  auto rng = make_rng(33);
  std::uniform_real_distribution<double> dist(-0.5, 0.5);
  std::vector<double> mem(cfg.mem_rows * cfg.mem_cols);
  for (auto& v : mem) v = dist(rng);

  double err = finite_diff_check(
      [&](Tape& t) {
        Var m0 = t.constant(mem, {cfg.mem_rows, cfg.mem_cols});
        return sum(encode_context(t, p, ctx, m0).embedding);
      },
      params);
  CHECK(err < 1e-4);
}

TEST_CASE("lstm controller variant works and differs from gru") {
  DncConfig cfg = tiny_config(true, CellKind::lstm);
  DncParams p = DncParams::init(cfg, 41);
  auto ctx = random_context(3, cfg.ctx_width, 42);
  Tape tp;
  Var mem0 = tp.constant(std::vector<double>(cfg.mem_rows * cfg.mem_cols, 0.0),
                         {cfg.mem_rows, cfg.mem_cols});
  auto res = encode_context(tp, p, ctx, mem0);
  CHECK(res.embedding.size() == cfg.out_dim);
  for (double v : res.embedding.value()) CHECK(std::isfinite(v));

  auto params = param_ptrs(p);
  double err = finite_diff_check(
      [&](Tape& t) {
        Var m0 = t.constant(std::vector<double>(cfg.mem_rows * cfg.mem_cols, 0.0),
                            {cfg.mem_rows, cfg.mem_cols});
        return sum(encode_context(t, p, ctx, m0).embedding);
      },
      params);
  CHECK(err < 1e-4);
}

TEST_CASE("encode_context modes") {
  // output dim matches the configured embedding size for any sequence length
  for (std::size_t len : {1ULL, 8ULL, 32ULL}) {
    DncConfig cfg = tiny_config(true);
    DncParams p = DncParams::init(cfg, 51);
    auto ctx = random_context(len, cfg.ctx_width, 52 + len);
    Tape tp;
    Var mem0 = tp.constant(std::vector<double>(cfg.mem_rows * cfg.mem_cols, 0.0),
                           {cfg.mem_rows, cfg.mem_cols});
    CHECK(encode_context(tp, p, ctx, mem0).embedding.size() == cfg.out_dim);
  }

  // memoryless mode with zero weights gives a zero embedding
  DncConfig scfg = tiny_config(false);
  DncParams sp = DncParams::init(scfg, 53);
  std::vector<std::pair<std::string, Tensor*>> named;
  sp.collect("s", named);
  for (auto& [n, t] : named) std::fill(t->data.begin(), t->data.end(), 0.0);
  Tape tp;
  auto ctx1 = random_context(1, scfg.ctx_width, 54);
  auto o = encode_context(tp, sp, ctx1, Var()).embedding.value();
  for (double v : o) CHECK(v == 0.0);

  // empty sequence is a contract error
  std::vector<std::vector<double>> empty;
  CHECK_THROWS_AS(encode_context(tp, sp, empty, Var()), ContractError);
}

TEST_CASE("memory and memoryless paths differ on shared weights") {
  DncConfig mcfg = tiny_config(true);
  DncParams mp = DncParams::init(mcfg, 61);
  DncConfig scfg = tiny_config(false);
  scfg.out_dim = mcfg.out_dim;
  DncParams sp = DncParams::init(scfg, 61);
  // align the shared projection; controller input widths differ by design
  sp.w_out = mp.w_out;

  auto ctx = random_context(4, mcfg.ctx_width, 62);
  Tape tp;
  auto rng = make_rng(63);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> mem(mcfg.mem_rows * mcfg.mem_cols);
  for (auto& v : mem) v = dist(rng);
  Var mem0 = tp.constant(mem, {mcfg.mem_rows, mcfg.mem_cols});

  auto full = encode_context(tp, mp, ctx, mem0).embedding.value();
  auto lean = encode_context(tp, sp, ctx, Var()).embedding.value();
  CHECK(full != lean);
}

TEST_CASE("memoryless encode never touches a memory matrix") {
  DncConfig cfg = tiny_config(false);
  DncParams p = DncParams::init(cfg, 71);
  auto ctx = random_context(5, cfg.ctx_width, 72);

  Tensor snapshot = Tensor::uniform({4, 4}, 1.0, 73, false);
  std::vector<double> before = snapshot.data;
  Tape tp;
  encode_context(tp, p, ctx, Var());
  CHECK(snapshot.data == before);
}
