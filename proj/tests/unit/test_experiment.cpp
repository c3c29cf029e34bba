#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "samdkif/experiment.hpp"

using namespace samdkif;
namespace fs = std::filesystem;

namespace {

const std::string kSmoke = std::string(SAMDKIF_SOURCE_DIR) + "/configs/smoke.json";

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string fresh_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("samdkif_" + name);
  fs::remove_all(p);
  return p.string();
}

struct CliResult {
  int code;
  std::string err;
};

CliResult cli(const std::string& args) {
  const std::string err_file = fresh_dir("stderr.txt");
  const std::string cmd = std::string(SAMDKIF_CLI) + " " + args + " -q 2> " + err_file;
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(err_file)};
}

std::string expect_config_error(const std::string& json) {
  try {
    parse_run_config(json);
  } catch (const ConfigError& e) {
    return e.path();
  }
  ADD_FAILURE() << "no ConfigError for " << json;
  return "";
}

std::size_t line_count(const std::string& text) {
  std::size_t n = 0;
  for (char c : text) n += c == '\n';
  return n;
}

}  // namespace

TEST(Config, DefaultsAndSmokeFile) {
  const auto d = parse_run_config("{}");
  EXPECT_EQ(d.model.d_model, 64u);
  EXPECT_EQ(d.skills.kinds.size(), 8u);
  EXPECT_EQ(d.seeds.size(), 5u);
  const auto s = load_run_config(kSmoke);
  EXPECT_EQ(s.model.d_model, 16u);
  EXPECT_EQ(s.tasks.size(), 2u);
  EXPECT_EQ(s.tasks[1].setting, Setting::kFewShot);
  EXPECT_EQ(s.tasks[0].sources.size(), 2u);
}

TEST(Config, ErrorsCarryFieldPaths) {
  EXPECT_EQ(expect_config_error(R"({"router": {"tau": -1}})"), "router.tau");
  EXPECT_EQ(expect_config_error(R"({"router": {"tua": 1}})"), "router.tua");
  EXPECT_EQ(expect_config_error(R"({"model": {"d_model": "big"}})"), "model.d_model");
  EXPECT_EQ(expect_config_error(R"({"tasks": [{"kind": "seen_mix", "n": 10}]})"), "tasks[0].n");
  EXPECT_EQ(expect_config_error(R"({"tasks": [{"kind": "nope"}]})"), "tasks[0].kind");
  EXPECT_EQ(expect_config_error(R"({"skills": {"kinds": ["copy", "juggle"]}})"), "skills.kinds[1]");
  EXPECT_EQ(expect_config_error(R"({"skills": {"train": {"r_target": 9}}})"), "skills.train.r_target");
  EXPECT_EQ(expect_config_error(R"({"seeds": []})"), "seeds");
  EXPECT_EQ(expect_config_error(R"({"skills": {"kinds": ["copy"]}, "suite": {"k_main": 1, "sweep_k": [1, 2]}})"),
            "suite.sweep_k");
  EXPECT_EQ(expect_config_error("{not json"), "<root>");
  EXPECT_THROW(load_run_config("/nonexistent/config.json"), ConfigError);
}

TEST(Config, OverridesAndHash) {
  const auto a = load_run_config(kSmoke);
  const auto b = load_run_config(kSmoke, {"router.tau=0.5", "seed=11", "out=\"elsewhere\""});
  EXPECT_EQ(b.router.tau, 0.5);
  EXPECT_EQ(b.seed, 11u);
  EXPECT_EQ(b.out, "elsewhere");
  EXPECT_NE(config_hash(a), config_hash(b));
  auto c = a;
  c.out = "another/place";
  EXPECT_EQ(config_hash(a), config_hash(c));
  EXPECT_EQ(config_hash(a), config_hash(parse_run_config(run_config_json(a))));
  EXPECT_THROW(load_run_config(kSmoke, {"novalue"}), ConfigError);
  EXPECT_EQ(fnv1a_hex(""), "cbf29ce484222325");
  EXPECT_EQ(fnv1a_hex("a"), "af63dc4c8601ec8c");
}

TEST(Config, KList) {
  EXPECT_EQ(parse_k_list("1..4"), (std::vector<std::size_t>{1, 2, 3, 4}));
  EXPECT_EQ(parse_k_list("1,2,4,8"), (std::vector<std::size_t>{1, 2, 4, 8}));
  EXPECT_EQ(parse_k_list("3"), (std::vector<std::size_t>{3}));
  EXPECT_THROW(parse_k_list("4..1"), ConfigError);
  EXPECT_THROW(parse_k_list("0"), ConfigError);
  EXPECT_THROW(parse_k_list("a,b"), ConfigError);
}

TEST(Cli, ExitCodes) {
  const std::string empty = fresh_dir("cli_empty");
  auto missing = cli("eval --config " + kSmoke + " --out " + empty + " --model base");
  EXPECT_EQ(missing.code, 2) << missing.err;
  EXPECT_NE(missing.err.find("base.samk"), std::string::npos) << missing.err;

  auto bad = cli("adapt --config " + kSmoke + " --out " + empty + " --set router.tau=-1");
  EXPECT_EQ(bad.code, 3) << bad.err;
  EXPECT_NE(bad.err.find("router.tau"), std::string::npos) << bad.err;

  auto diverge = cli("pretrain --config " + kSmoke + " --out " + empty + " --set pretrain.lr=1e30");
  EXPECT_EQ(diverge.code, 4) << diverge.err;
}

// The whole command chain on the smoke config.
TEST(Cli, PipelineWritesManifestsAndReports) {
  const std::string out = fresh_dir("cli_pipeline");
  const std::string common = " --config " + kSmoke + " --out " + out;
  ASSERT_EQ(cli("pretrain" + common).code, 0);
  ASSERT_EQ(cli("train-skill" + common + " --parallel").code, 0);
  ASSERT_EQ(cli("gen-data" + common).code, 0);
  ASSERT_EQ(cli("adapt" + common).code, 0);
  ASSERT_EQ(cli("fuse" + common).code, 0);
  ASSERT_EQ(cli("eval" + common + " --model base").code, 0);
  ASSERT_EQ(cli("eval" + common + " --model fused").code, 0);
  ASSERT_EQ(cli("sweep-skills" + common + " --k 1..4").code, 0);

  for (const char* c : {"pretrain", "train-skill", "gen-data", "adapt", "fuse", "eval-base", "eval-fused", "sweep-skills"}) {
    const auto path = out + "/manifest_" + std::string(c) + ".json";
    ASSERT_TRUE(fs::exists(path)) << path;
    const auto j = nlohmann::json::parse(slurp(path));
    EXPECT_EQ(j.at("command"), c);
    EXPECT_EQ(j.at("config_hash"), config_hash(load_run_config(kSmoke)));
    for (const auto& o : j.at("outputs")) {
      const std::string rel = o.at("path");
      ASSERT_TRUE(fs::exists(out + "/" + rel)) << rel;
      EXPECT_EQ(o.at("fnv1a").get<std::string>(), file_hash(out + "/" + rel)) << rel;
    }
  }

  const auto report = nlohmann::json::parse(slurp(out + "/reports/mix_base.json"));
  ASSERT_TRUE(report.contains("accuracy"));
  EXPECT_GE(report.at("accuracy").get<double>(), 0.0);
  EXPECT_LE(report.at("accuracy").get<double>(), 1.0);
  EXPECT_EQ(report.at("records").size(), 12u);

  const std::string sweep = slurp(out + "/sweep.csv");
  EXPECT_EQ(line_count(sweep), 5u) << sweep;  // header + K = 1..4
  {
    std::istringstream rows(sweep);
    std::string row;
    std::getline(rows, row);
    std::size_t last = 0;
    while (std::getline(rows, row)) {
      std::vector<std::string> cols;
      std::stringstream cells(row);
      for (std::string c; std::getline(cells, c, ',');) cols.push_back(c);
      ASSERT_GE(cols.size(), 4u) << row;
      const std::size_t params = std::stoul(cols[2]);
      EXPECT_GE(params, last) << row;
      last = params;
    }
  }

  // Fusing again reproduces the checkpoint bit for bit.
  const std::string first = slurp(out + "/fused/mix.samk");
  ASSERT_EQ(cli("fuse" + common).code, 0);
  EXPECT_EQ(slurp(out + "/fused/mix.samk"), first);
}

TEST(Cli, UsageErrors) {
  EXPECT_NE(cli("").code, 0);
  EXPECT_NE(cli("pretrain").code, 0);  // --config is required
  EXPECT_EQ(cli("pretrain --config /nonexistent.json").code, 3);
}
