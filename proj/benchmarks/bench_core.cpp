#include <benchmark/benchmark.h>

#include <random>

#include "msr/rng.hpp"
#include "msr/tensor.hpp"

using namespace msr;

namespace {

Tensor random_tensor(Shape s, std::uint64_t seed) {
  auto rng = make_rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<double> d(numel(s));
  for (auto& v : d) v = dist(rng);
  return Tensor(std::move(s), std::move(d), true);
}

}  // namespace

static void BM_MatMul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Tensor a = random_tensor({n, n}, 1);
  Tensor b = random_tensor({n, n}, 2);
  for (auto _ : state) {
    Tape tape;
    Var c = matmul(tape.param(a), tape.param(b));
    benchmark::DoNotOptimize(c.value().data());
  }
  state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_MatMul)->Arg(16)->Arg(64)->Arg(128);

static void BM_SoftmaxRow(benchmark::State& state) {
  Tensor a = random_tensor({64, 64}, 3);
  for (auto _ : state) {
    Tape tape;
    Var s = softmax_row(tape.param(a));
    benchmark::DoNotOptimize(s.value().data());
  }
}
BENCHMARK(BM_SoftmaxRow);

static void BM_ForwardBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Tensor w = random_tensor({n, n}, 4);
  Tensor x = random_tensor({n}, 5);
  for (auto _ : state) {
    Tape tape;
    Var loss = sum(sigmoid(matvec(tape.param(w), tape.param(x))));
    tape.backward(loss);
    benchmark::DoNotOptimize(w.grad.data());
    w.zero_grad();
    x.zero_grad();
  }
}
BENCHMARK(BM_ForwardBackward)->Arg(64)->Arg(256);

BENCHMARK_MAIN();
