#include <gtest/gtest.h>

#include <cmath>

#include "samdkif/model.hpp"
#include "samdkif/synthetic.hpp"
#include "support.hpp"

using namespace samdkif;

TEST(Model, ConfigValidation) {
  ModelConfig c = test_support::tiny_config();
  EXPECT_NO_THROW(c.validate());
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), ContractError);
  c = test_support::tiny_config();
  c.vocab_size = 100;
  EXPECT_THROW(c.validate(), ContractError);
  c = test_support::tiny_config();
  c.n_layers = 0;
  EXPECT_THROW(c.validate(), ContractError);
}

TEST(Model, TargetShapes) {
  const auto c = test_support::tiny_config(16);
  EXPECT_EQ(target_shape(c, Target::kQ), (std::pair<std::size_t, std::size_t>{16, 16}));
  EXPECT_EQ(target_shape(c, Target::kF1), (std::pair<std::size_t, std::size_t>{16, 32}));
  EXPECT_EQ(target_shape(c, Target::kF2), (std::pair<std::size_t, std::size_t>{32, 16}));
  EXPECT_EQ(parse_target("f2"), Target::kF2);
  EXPECT_EQ(target_name(Target::kO), "o");
  EXPECT_THROW(parse_target("w"), ContractError);
}

TEST(Model, ParameterCountOracle) {
  const auto c = test_support::tiny_config(16);  // V=260, S=96, F=32, L=2
  Rng rng(1);
  auto w = TransformerWeights<float>::init(c, rng);
  const std::size_t per_layer = 4 * 16 * 16 + 2 * 16 * 32 + 4 * 16;
  EXPECT_EQ(w.parameter_count(), 260 * 16 + 96 * 16 + 2 * per_layer + 2 * 16 + 16 * 260);
  auto tied = c;
  tied.tied_head = true;
  Rng rng2(1);
  EXPECT_EQ(TransformerWeights<float>::init(tied, rng2).parameter_count(), w.parameter_count() - 16 * 260);
}

TEST(Model, ForwardShapeAndErrors) {
  const auto c = test_support::tiny_config();
  Rng rng(2);
  auto w = TransformerWeights<float>::init(c, rng);
  std::vector<int> ids{kBos, 'a', 'b', kSep};
  auto logits = forward<float>(w, nullptr, ids);
  EXPECT_EQ(logits.shape(), (Shape{4, 260}));
  for (float v : logits.values()) EXPECT_TRUE(std::isfinite(v));
  EXPECT_THROW(forward<float>(w, nullptr, std::vector<int>{}), ContractError);
  EXPECT_THROW(forward<float>(w, nullptr, std::vector<int>(97, 'a')), ContractError);
  ForwardOptions train{true, nullptr};
  EXPECT_THROW(forward<float>(w, nullptr, ids, train), ContractError);
}

TEST(Model, CausalPrefixInvariance) {
  Rng rng(3);
  auto w = TransformerWeights<double>::init(test_support::tiny_config(), rng, 0.2);
  std::vector<int> a{kBos, 'x', 'y', 'z'};
  std::vector<int> b{kBos, 'x', 'y', 'q', 'r'};
  auto la = forward<double>(w, nullptr, a);
  auto lb = forward<double>(w, nullptr, b);
  for (std::size_t t = 0; t < 3; ++t) {
    for (std::size_t j = 0; j < 260; ++j) {
      EXPECT_NEAR(la.at(t, j), lb.at(t, j), 1e-12);
    }
  }
}

TEST(Model, GenerateMatchesArgmaxAndStopsAtLimit) {
  Rng rng(4);
  auto w = TransformerWeights<double>::init(test_support::tiny_config(), rng, 0.3);
  std::vector<int> prompt{kBos, 'h', 'i', kSep};
  auto out = generate<double>(w, nullptr, prompt, 5);
  EXPECT_LE(out.size(), 5u);
  if (!out.empty()) {
    auto logits = forward<double>(w, nullptr, prompt);
    std::size_t best = 0;
    for (std::size_t j = 1; j < 260; ++j) {
      if (logits.at(3, j) > logits.at(3, best)) best = j;
    }
    EXPECT_EQ(out[0], static_cast<int>(best));
  }
  EXPECT_THROW(generate<double>(w, nullptr, std::vector<int>{}, 3), ContractError);
}

TEST(Model, CastPreservesValuesWithinFloatPrecision) {
  Rng rng(5);
  auto w = TransformerWeights<double>::init(test_support::tiny_config(), rng);
  auto f = w.template cast<float>();
  EXPECT_NEAR(f.token_embedding[7], static_cast<float>(w.token_embedding[7]), 0.0f);
  EXPECT_EQ(f.parameter_count(), w.parameter_count());
}

TEST(Model, PretrainingLowersHoldoutLoss) {
  const auto c = test_support::tiny_config();
  auto corpus = gen_pretrain_corpus(200, 1);
  auto holdout = gen_pretrain_corpus(20, 2);
  PretrainConfig pc;
  pc.steps = 40;
  pc.batch_size = 4;
  pc.lr = 1e-2;
  auto res = pretrain_base<float>(c, corpus, holdout, pc);
  EXPECT_LT(res.final_holdout_loss, res.initial_holdout_loss);
  for (const auto& p : res.weights.parameters()) EXPECT_FALSE(p.requires_grad());
  pc.lr = 1e12;
  EXPECT_THROW(pretrain_base<float>(c, corpus, holdout, pc), DivergenceError);
}
