#include <gtest/gtest.h>

#include <cmath>

#include "samdkif/router.hpp"
#include "samdkif/synthetic.hpp"
#include "support.hpp"

using namespace samdkif;
using samdkif::test_support::tiny_config;
using samdkif::test_support::worst_relative_error;

namespace {

template <typename T>
SkillLibrary<T> random_library(const ModelConfig& c, std::size_t K, std::uint64_t seed, double lambda_sd) {
  Rng rng(seed);
  std::vector<SkillAdapter<T>> skills;
  for (std::size_t i = 0; i < K; ++i) {
    auto s = SkillAdapter<T>::init("s" + std::to_string(i), c, 2, rng, 0.3);
    for (auto& tr : s.triplets)
      for (auto& l : tr.lambda.values()) l = static_cast<T>(rng.normal(0.0, lambda_sd));
    skills.push_back(std::move(s));
  }
  return SkillLibrary<T>::make(c, std::move(skills));
}

double frob(const Tensor<double>& t) {
  double s = 0;
  for (double v : t.values()) s += v * v;
  return std::sqrt(s);
}

}  // namespace

TEST(Gate, StaticOracle) {
  auto p = RouterParams<double>::uniform(RouterMode::kStatic, {"a", "b", "c"}, 0, 2.0);
  p.logits = Tensor<double>::vector({1, 2, 3});
  p.b = Tensor<double>::vector({0, 0, 1});
  const auto g = gate(p, Tensor<double>());
  const double z = std::exp(0.5) + std::exp(1.0) + std::exp(2.0);
  EXPECT_NEAR(g.R[0], std::exp(0.5) / z, 1e-15);
  EXPECT_NEAR(g.R[2], std::exp(2.0) / z, 1e-15);
  EXPECT_EQ(g.E.values(), (std::vector<double>{1, 2, 4}));
}

TEST(Gate, FeatureOracle) {
  auto p = RouterParams<double>::uniform(RouterMode::kFeature, {"a", "b"}, 3);
  p.A = Tensor<double>::matrix({{1, 0, 2}, {0, -1, 0}});
  p.b = Tensor<double>::vector({0.5, 0});
  auto f = Tensor<double>::matrix({{1, 1, 1}, {2, 3, 4}});
  const auto g = gate(p, f);
  EXPECT_NEAR(g.E[0], 3.5, 1e-15);
  EXPECT_NEAR(g.E[1], -3.0, 1e-15);
  EXPECT_NEAR(g.R[0] + g.R[1], 1.0, 1e-15);
  EXPECT_THROW(gate(p, Tensor<double>::zeros({2, 2})), ShapeError);
}

TEST(Gate, UniformRouterIsUniform) {
  auto p = RouterParams<float>::uniform(RouterMode::kStatic, {"a", "b", "c", "d"}, 0);
  const auto g = gate(p, Tensor<float>());
  for (float r : g.R.values()) EXPECT_FLOAT_EQ(r, 0.25f);
}

TEST(Router, TrainableCounts) {
  const std::size_t K = 4, F = 12;
  Rng rng(1);
  auto st = RouterParams<float>::init(RouterMode::kStatic, {"a", "b", "c", "d"}, F, rng);
  auto fe = RouterParams<float>::init(RouterMode::kFeature, {"a", "b", "c", "d"}, F, rng);
  EXPECT_EQ(st.trainable_count(), 2 * K);
  EXPECT_EQ(fe.trainable_count(), K * F + K);
  EXPECT_LE(fe.trainable_count(), 2 * K + K * F);
  EXPECT_THROW(RouterParams<float>::init(RouterMode::kStatic, {}, F, rng), ContractError);
  EXPECT_THROW(RouterParams<float>::init(RouterMode::kStatic, {"a"}, F, rng, 0.01, 0.0), ContractError);
}

TEST(Router, ModeNames) {
  EXPECT_EQ(parse_router_mode("feature"), RouterMode::kFeature);
  EXPECT_EQ(router_mode_name(RouterMode::kStatic), "static");
  EXPECT_THROW(parse_router_mode("mlp"), ContractError);
}

TEST(Router, CheckpointRoundTrip) {
  Rng rng(2);
  auto p = RouterParams<double>::init(RouterMode::kFeature, {"x", "y"}, 12, rng, 0.3, 0.7);
  auto back = RouterParams<double>::from_checkpoint(p.to_checkpoint(tiny_config()));
  EXPECT_EQ(back.mode, RouterMode::kFeature);
  EXPECT_EQ(back.tau, 0.7);
  EXPECT_EQ(back.skill_ids, p.skill_ids);
  EXPECT_EQ(back.A.values(), p.A.values());
  EXPECT_EQ(back.b.values(), p.b.values());
}

TEST(Library, RejectsInconsistentSkills) {
  const auto c = tiny_config(16, 2);
  Rng rng(3);
  auto good = SkillAdapter<float>::init("a", c, 2, rng);
  auto other = SkillAdapter<float>::init("b", tiny_config(16, 1), 2, rng);
  EXPECT_THROW(SkillLibrary<float>::make(c, {}), LibraryError);
  EXPECT_THROW(SkillLibrary<float>::make(c, {good, other}), LibraryError);
  auto lib = SkillLibrary<float>::make(c, {good});
  EXPECT_EQ(lib.feature_dim(), 12u);
  EXPECT_THROW(routed_delta(lib, Tensor<float>::vector({0.5f, 0.5f})), ShapeError);
}

TEST(Library, FeaturesAreDeltaNorms) {
  const auto c = tiny_config(16, 1);
  auto lib = random_library<double>(c, 2, 4, 1.0);
  const auto f = skill_features(lib);
  ASSERT_EQ(f.shape(), (Shape{2, 6}));
  EXPECT_NEAR(f.at(1, 3), frob(lib.skills[1].triplet(0, Target::kF1).delta()), 1e-12);
}

TEST(Router, OneHotRecoversSingleAdapter) {
  const auto c = tiny_config(16, 2);
  Rng rng(5);
  auto w = TransformerWeights<double>::init(c, rng, 0.2);
  auto lib = random_library<double>(c, 3, 6, 1.0);
  std::vector<int> ids{kBos, 'r', 'o', 'u', 't', 'e', kSep};
  for (std::size_t i = 0; i < 3; ++i) {
    std::vector<double> r(3, 0.0);
    r[i] = 1.0;
    const auto routed = routed_delta(lib, Tensor<double>::vector(r));
    const auto single = AdapterSet<double>::single(lib.skills[i]);
    const auto a = forward<double>(w, &routed, ids);
    const auto b = forward<double>(w, &single, ids);
    double worst = 0;
    for (std::size_t j = 0; j < a.size(); ++j) worst = std::max(worst, std::abs(a[j] - b[j]));
    EXPECT_LE(worst, 1e-6);
  }
}

TEST(AdaptationLoss, GradientCheckStaticAndFeature) {
  const auto c = tiny_config(16, 2);
  Rng rng(7);
  auto w = TransformerWeights<double>::init(c, rng, 0.2);
  auto lib = random_library<double>(c, 3, 8, 0.7);
  const auto feats = skill_features(lib);
  Rng data(9);
  std::vector<EncodedExample> batch;
  for (int i = 0; i < 2; ++i) batch.push_back(encode_example(skill_example(SkillKind::kReverse, data)));
  for (auto mode : {RouterMode::kStatic, RouterMode::kFeature}) {
    auto p = RouterParams<double>::init(mode, lib.ids(), lib.feature_dim(), rng, 0.5, 0.8);
    p.set_requires_grad(true);
    auto loss = [&] {
      NoGradScope<double> ng;
      return adaptation_loss(w, lib, p, feats, batch, 0.2).total.item();
    };
    auto backward = [&] {
      Tape<double> tape;
      TapeScope<double> scope(tape);
      tape.backward(adaptation_loss(w, lib, p, feats, batch, 0.2).total);
    };
    EXPECT_LT(worst_relative_error(loss, backward, p.trainable()), 1e-4) << router_mode_name(mode);
  }
}

TEST(AdaptNormal, RegularizationShrinksA) {
  const auto c = tiny_config(16, 1);
  Rng rng(10);
  auto w = TransformerWeights<double>::init(c, rng, 0.2);
  auto lib = random_library<double>(c, 3, 11, 0.5);
  auto data = gen_skill_corpus(SkillKind::kCopy, 8, 12);
  RouterTrainConfig cfg;
  cfg.mode = RouterMode::kFeature;
  cfg.lr = 1e-4;
  cfg.steps = 40;
  cfg.init_sd = 0.5;
  cfg.gamma1 = 0.0;
  const double free_norm = frob(adapt_normal(w, lib, data, cfg).params.A);
  cfg.gamma1 = 1000.0;
  const double reg_norm = frob(adapt_normal(w, lib, data, cfg).params.A);
  EXPECT_LT(reg_norm, 0.1 * free_norm) << reg_norm << " vs " << free_norm;
}

// Targets come from the base model with skill 2 attached, so only that
// skill can explain them.
TEST(AdaptNormal, FindsTheOnlyUsefulSkill) {
  const auto c = tiny_config(16, 2);
  Rng rng(13);
  auto w = TransformerWeights<float>::init(c, rng, 0.2);
  auto lib = random_library<float>(c, 4, 14, 3.0);
  const auto teacher = AdapterSet<float>::single(lib.skills[2]);
  Rng data_rng(15);
  Dataset data;
  for (int i = 0; i < 24; ++i) {
    auto ex = skill_example(SkillKind::kCopy, data_rng);
    const auto prompt = encode_prompt(ex);
    ex.answer = decode(generate<float>(w, &teacher, prompt, 4));
    data.push_back(ex);
  }
  RouterTrainConfig cfg;
  cfg.lr = 0.5;
  cfg.steps = 40;
  cfg.gamma1 = 0.0;
  auto res = adapt_normal(w, lib, data, cfg);
  const auto R = to_doubles(gate(res.params, Tensor<float>()).R);
  EXPECT_EQ(argmax(R), 2u) << R[0] << " " << R[1] << " " << R[2] << " " << R[3];
  EXPECT_EQ(res.log.size(), 40u);
  EXPECT_LT(res.log.back().task_loss, res.log.front().task_loss);
}

TEST(Router, EntropyAndArgmax) {
  std::vector<double> u{0.25, 0.25, 0.25, 0.25};
  EXPECT_NEAR(entropy(u), std::log(4.0), 1e-15);
  std::vector<double> p{0.1, 0.6, 0.3};
  EXPECT_EQ(argmax(p), 1u);
  RouterTrainConfig bad;
  bad.tau = 0;
  EXPECT_THROW(bad.validate(), ContractError);
}
