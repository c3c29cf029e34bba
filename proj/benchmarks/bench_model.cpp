#include <benchmark/benchmark.h>

#include "samdkif/adalora.hpp"
#include "samdkif/fusion.hpp"
#include "samdkif/synthetic.hpp"

using namespace samdkif;

namespace {

struct Fixture {
  ModelConfig config;
  TransformerWeights<float> base;
  std::vector<SkillAdapter<float>> skills;
  std::vector<EncodedExample> batch;

  explicit Fixture(std::size_t k) {
    Rng rng(5);
    base = TransformerWeights<float>::init(config, rng);
    for (std::size_t i = 0; i < k; ++i) {
      auto s = SkillAdapter<float>::init("s" + std::to_string(i), config, 6, rng);
      for (auto& tr : s.triplets) {
        for (auto& l : tr.lambda.values()) l = static_cast<float>(rng.normal());
      }
      skills.push_back(std::move(s));
    }
    for (const auto& ex : gen_skill_corpus(SkillKind::kMapClassify, 16, 9)) {
      batch.push_back(encode_example(ex));
    }
  }
};

}  // namespace

static void BM_forward_base(benchmark::State& state) {
  Fixture f(0);
  const auto& ids = f.batch[0].ids;
  for (auto _ : state) {
    auto logits = forward(f.base, static_cast<const AdapterSet<float>*>(nullptr), std::span<const int>(ids));
    benchmark::DoNotOptimize(logits.data().data());
  }
  state.counters["tokens"] = static_cast<double>(ids.size());
}
BENCHMARK(BM_forward_base)->Unit(benchmark::kMicrosecond);

static void BM_forward_routed(benchmark::State& state) {
  Fixture f(static_cast<std::size_t>(state.range(0)));
  auto lib = SkillLibrary<float>::make(f.config, f.skills);
  std::vector<float> w(lib.size(), 1.0f / static_cast<float>(lib.size()));
  auto R = Tensor<float>::vector(w);
  auto set = routed_delta(lib, R);
  const auto& ids = f.batch[0].ids;
  for (auto _ : state) {
    auto logits = forward(f.base, &set, std::span<const int>(ids));
    benchmark::DoNotOptimize(logits.data().data());
  }
}
BENCHMARK(BM_forward_routed)->Arg(1)->Arg(4)->Arg(8)->Unit(benchmark::kMicrosecond);

// What fusion buys at inference: one dense matmul per target.
static void BM_forward_fused(benchmark::State& state) {
  Fixture f(static_cast<std::size_t>(state.range(0)));
  auto lib = SkillLibrary<float>::make(f.config, f.skills);
  std::vector<double> R(lib.size(), 1.0 / static_cast<double>(lib.size()));
  auto fused = fuse<float>(f.base, lib, R);
  const auto& ids = f.batch[0].ids;
  for (auto _ : state) {
    auto logits = forward(fused.weights, static_cast<const AdapterSet<float>*>(nullptr), std::span<const int>(ids));
    benchmark::DoNotOptimize(logits.data().data());
  }
}
BENCHMARK(BM_forward_fused)->Arg(8)->Unit(benchmark::kMicrosecond);

static void BM_skill_step(benchmark::State& state) {
  Fixture f(1);
  auto& skill = f.skills[0];
  skill.set_requires_grad(true);
  for (auto _ : state) {
    Tape<float> tape;
    TapeScope<float> scope(tape);
    auto loss = skill_loss(f.base, skill, std::span<const EncodedExample>(f.batch), 0.5);
    tape.backward(loss.total);
    sgd_step(skill, 1e-4);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(f.batch.size()));
}
BENCHMARK(BM_skill_step)->Unit(benchmark::kMillisecond);

static void BM_fuse(benchmark::State& state) {
  Fixture f(static_cast<std::size_t>(state.range(0)));
  auto lib = SkillLibrary<float>::make(f.config, f.skills);
  std::vector<double> R(lib.size(), 1.0 / static_cast<double>(lib.size()));
  for (auto _ : state) {
    auto fused = fuse<float>(f.base, lib, R);
    benchmark::DoNotOptimize(fused.weights.lm_head.data().data());
  }
}
BENCHMARK(BM_fuse)->Arg(4)->Arg(8)->Unit(benchmark::kMillisecond);
