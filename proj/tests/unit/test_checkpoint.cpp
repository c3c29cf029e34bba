#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "samdkif/adapter.hpp"
#include "samdkif/checkpoint.hpp"
#include "samdkif/model.hpp"
#include "support.hpp"

using namespace samdkif;

namespace {
std::string temp_file(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("samdkif_ck_" + name)).string();
}
}  // namespace

TEST(Checkpoint, SerializeRoundTripKeepsBits) {
  Checkpoint ck("base", test_support::tiny_config());
  ck.meta = R"({"note":"x"})";
  auto f = Tensor<float>::vector({1.5f, -0.1f, 3e-8f});
  auto d = Tensor<double>::matrix({{0.1, 0.2}, {1e-300, -7}});
  ck.put("f", f);
  ck.put("d", d);
  const auto back = Checkpoint::deserialize(ck.serialize());
  EXPECT_EQ(back.kind, "base");
  EXPECT_EQ(back.meta, ck.meta);
  EXPECT_EQ(back.config, ck.config);
  EXPECT_EQ(back.get<float>("f").values(), f.values());
  EXPECT_EQ(back.get<double>("d").values(), d.values());
  EXPECT_EQ(back.get<double>("d").shape(), (Shape{2, 2}));
  EXPECT_THROW(back.get<float>("nope"), FormatError);
}

TEST(Checkpoint, ModelSaveLoad) {
  Rng rng(3);
  auto w = TransformerWeights<float>::init(test_support::tiny_config(), rng);
  const auto path = temp_file("model.samk");
  w.to_checkpoint().save(path);
  auto back = TransformerWeights<float>::from_checkpoint(Checkpoint::load(path));
  EXPECT_TRUE(back.bit_identical(w));
  std::remove(path.c_str());
}

TEST(Checkpoint, AdapterRoundTripKeepsMask) {
  Rng rng(4);
  auto s = SkillAdapter<double>::init("copy", test_support::tiny_config(), 3, rng);
  s.triplets[2].alive[1] = 0;
  s.triplets[2].lambda[0] = 0.25;
  auto back = SkillAdapter<double>::from_checkpoint(s.to_checkpoint());
  EXPECT_EQ(back.skill_id, "copy");
  EXPECT_EQ(back.alive_count(), s.alive_count());
  EXPECT_EQ(back.triplets[2].alive, s.triplets[2].alive);
  EXPECT_EQ(back.triplets[2].lambda.values(), s.triplets[2].lambda.values());
  EXPECT_EQ(back.triplets[5].U.values(), s.triplets[5].U.values());
}

TEST(Checkpoint, RejectsBadInput) {
  EXPECT_THROW(Checkpoint::load(temp_file("does_not_exist")), FormatError);
  EXPECT_THROW(Checkpoint::deserialize("JUNKJUNKJUNK"), FormatError);
  Checkpoint ck("base", test_support::tiny_config());
  ck.put("x", Tensor<float>::vector({1, 2, 3}));
  const std::string bytes = ck.serialize();
  EXPECT_THROW(Checkpoint::deserialize(bytes.substr(0, bytes.size() - 3)), FormatError);
  EXPECT_THROW(Checkpoint::deserialize(bytes + "z"), FormatError);
  std::string wrong_version = bytes;
  wrong_version[4] = 9;
  EXPECT_THROW(Checkpoint::deserialize(wrong_version), FormatError);
  // An adapter loader refuses a base checkpoint.
  EXPECT_THROW(SkillAdapter<float>::from_checkpoint(ck), FormatError);
}

TEST(Checkpoint, ShapeMismatchOnModelLoad) {
  Rng rng(5);
  auto w = TransformerWeights<float>::init(test_support::tiny_config(), rng);
  auto ck = w.to_checkpoint();
  Checkpoint bad("base", ck.config);
  for (const auto& e : ck.tensors()) {
    if (e.name == "lnf_gain") {
      bad.put_raw(e.name, e.dtype, Shape{3}, {1, 1, 1});
    } else {
      bad.put_raw(e.name, e.dtype, e.shape, e.values);
    }
  }
  EXPECT_THROW(TransformerWeights<float>::from_checkpoint(bad), FormatError);
}
