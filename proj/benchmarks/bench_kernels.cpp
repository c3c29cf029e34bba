#include <benchmark/benchmark.h>

#include "samdkif/tensor.hpp"

using namespace samdkif;

static void BM_gemm_nn(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const auto n = static_cast<std::size_t>(state.range(2));
  Rng rng(1);
  auto a = Tensor<float>::randn({m, k}, rng, 1.0);
  auto b = Tensor<float>::randn({k, n}, rng, 1.0);
  std::vector<float> c(m * n);
  for (auto _ : state) {
    std::fill(c.begin(), c.end(), 0.0f);
    kernels::gemm_nn(a.data().data(), b.data().data(), c.data(), m, k, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * m * k * n));
}
// sequence x d_model against the projection shapes of the default model
BENCHMARK(BM_gemm_nn)->Args({48, 64, 64})->Args({48, 64, 256})->Args({48, 256, 64})->Args({48, 64, 260});

static void BM_matmul_backward(benchmark::State& state) {
  Rng rng(2);
  auto x = Tensor<float>::randn({48, 64}, rng, 1.0);
  auto w = Tensor<float>::randn({64, 256}, rng, 1.0);
  w.set_requires_grad(true);
  for (auto _ : state) {
    Tape<float> tape;
    TapeScope<float> scope(tape);
    auto y = sum(matmul(x, w));
    tape.backward(y);
    benchmark::DoNotOptimize(w.grad().data());
    w.zero_grad();
  }
}
BENCHMARK(BM_matmul_backward);

static void BM_causal_attention(benchmark::State& state) {
  const auto seq = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  auto q = Tensor<float>::randn({seq, 64}, rng, 1.0);
  auto k = Tensor<float>::randn({seq, 64}, rng, 1.0);
  auto v = Tensor<float>::randn({seq, 64}, rng, 1.0);
  for (auto _ : state) {
    auto o = causal_attention(q, k, v, 4);
    benchmark::DoNotOptimize(o.data().data());
  }
}
BENCHMARK(BM_causal_attention)->Arg(32)->Arg(64)->Arg(128);
