#include <benchmark/benchmark.h>

#include <cmath>

#include "samdkif/cmaes.hpp"

using namespace samdkif;

static void BM_cmaes_sphere(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto sphere = [](const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    return s;
  };
  for (auto _ : state) {
    CmaConfig cfg;
    cfg.dim = n;
    cfg.mean0.assign(n, 1.0);
    cfg.max_evals = 6000;
    cfg.target_fitness = 1e-10;
    auto r = minimize(sphere, cfg);
    benchmark::DoNotOptimize(r.f_best);
    state.counters["evals"] = static_cast<double>(r.history.back().evals);
  }
}
BENCHMARK(BM_cmaes_sphere)->Arg(4)->Arg(12)->Arg(32)->Unit(benchmark::kMillisecond);

static void BM_jacobi(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(4);
  std::vector<double> a(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      a[i * n + j] = a[j * n + i] = rng.normal() + (i == j ? static_cast<double>(n) : 0.0);
    }
  }
  std::vector<double> values, vectors;
  for (auto _ : state) {
    benchmark::DoNotOptimize(jacobi_eigen(a, n, values, vectors));
  }
}
BENCHMARK(BM_jacobi)->Arg(8)->Arg(16)->Arg(64);
