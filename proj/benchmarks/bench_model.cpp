#include <benchmark/benchmark.h>

#include <random>

#include "msr/kd.hpp"
#include "msr/rng.hpp"

using namespace msr;

namespace {

MVConfig bench_config(bool student) {
  MVConfig cfg;
  cfg.embed_dim = 64;
  cfg.mem_rows = 16;
  cfg.mem_cols = 16;
  cfg.hidden = 64;
  cfg.ctx_len = 8;
  cfg.student = student;
  return cfg;
}

SampleInput bench_sample(const MVConfig& cfg) {
  auto rng = make_rng(17);
  std::uniform_real_distribution<double> dist(0.0, 4.0);
  SampleInput s;
  for (auto& v : s.passenger) v = std::floor(dist(rng));
  for (auto& v : s.driver) v = std::floor(dist(rng));
  s.order = OrderCodes{2, 3, 1};
  s.context.assign(cfg.ctx_len, std::vector<double>(cfg.ctx_width, 0.5));
  return s;
}

}  // namespace

static void BM_MvForward(benchmark::State& state) {
  MVConfig cfg = bench_config(false);
  MVParams p = MVParams::init(cfg, 1);
  p.memory = Tensor::uniform({cfg.mem_rows, cfg.mem_cols}, 0.5, 2, false);
  SampleInput in = bench_sample(cfg);
  for (auto _ : state) {
    Tape tape;
    benchmark::DoNotOptimize(mv_forward(tape, p, in).y_hat.scalar());
  }
}
BENCHMARK(BM_MvForward);

static void BM_StudentForward(benchmark::State& state) {
  MVConfig cfg = bench_config(true);
  MVParams p = MVParams::init(cfg, 3);
  SampleInput in = bench_sample(cfg);
  for (auto _ : state) {
    Tape tape;
    benchmark::DoNotOptimize(mv_forward(tape, p, in).y_hat.scalar());
  }
}
BENCHMARK(BM_StudentForward);

static void BM_MvTrainStep(benchmark::State& state) {
  MVConfig cfg = bench_config(false);
  MVParams p = MVParams::init(cfg, 4);
  p.memory = Tensor::uniform({cfg.mem_rows, cfg.mem_cols}, 0.5, 5, false);
  SampleInput in = bench_sample(cfg);
  Adam adam(p.trainable());
  for (auto _ : state) {
    adam.zero_grad();
    Tape tape;
    Var loss = mv_loss(mv_forward(tape, p, in).logit, 1);
    tape.backward(loss);
    adam.step();
  }
}
BENCHMARK(BM_MvTrainStep);
