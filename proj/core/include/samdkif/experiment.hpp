#pragma once

// Run configuration and the experiment commands behind the samdkif CLI.
//
// Every command takes an effective RunConfig, writes its artifacts under
// RunConfig::out and finishes with a manifest_<command>.json that lists the
// inputs, outputs (with content hashes), config hash and seed.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "samdkif/adalora.hpp"
#include "samdkif/cmaes.hpp"
#include "samdkif/dataformat.hpp"
#include "samdkif/fusion.hpp"
#include "samdkif/model.hpp"
#include "samdkif/router.hpp"
#include "samdkif/synthetic.hpp"

namespace samdkif {

struct PretrainSection {
  PretrainConfig train;
  std::size_t corpus_size = 8000;
  std::size_t holdout_size = 200;
};

struct SkillSection {
  std::vector<SkillKind> kinds{kAllSkillKinds.begin(), kAllSkillKinds.end()};
  std::size_t corpus_size = 4000;
  SkillTrainConfig train;
};

struct TaskConfig {
  std::string id;
  DownstreamKind kind = DownstreamKind::kUnseenComposite;
  std::size_t n = 200;
  Setting setting = Setting::kNormal;
  std::vector<SkillKind> sources;  // seen_mix only
};

/// repro-suite settings. Thresholds are the acceptance margins in
/// accuracy points.
struct SuiteSection {
  DownstreamKind task = DownstreamKind::kUnseenComposite;
  std::size_t task_size = 200;
  std::size_t k_main = 4;
  std::vector<std::size_t> sweep_k{1, 2, 4, 8};
  double margin_uniform = 3.0;
  double margin_base = 10.0;
  double margin_fewshot = 5.0;
  double sweep_tolerance = 1.0;
  double sweep_gain = 5.0;
};

struct RunConfig {
  ModelConfig model;
  PretrainSection pretrain;
  SkillSection skills;
  RouterTrainConfig router;
  FewShotConfig cmaes;
  std::vector<TaskConfig> tasks;
  SuiteSection suite;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::uint64_t seed = 7;
  std::size_t eval_max_new = 16;
  std::string out = "runs/default";
};

/// Parses a JSON config. Absent keys keep their defaults; unknown keys and
/// invalid values throw ConfigError with the dotted field path.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

/// Same as load_run_config, after applying "a.b.c=value" overrides to the
/// JSON tree (value parsed as JSON, else taken as a string).
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides);
std::string apply_overrides(const std::string& json_text, const std::vector<std::string>& overrides);

/// Canonical JSON of the effective config (every field, fixed key order).
std::string run_config_json(const RunConfig& cfg);
std::string config_hash(const RunConfig& cfg);

/// FNV-1a 64 as 16 hex digits.
std::string fnv1a_hex(const std::string& bytes);
std::string file_hash(const std::string& path);

struct Manifest {
  std::string command;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<std::string> inputs;   // paths relative to out
  std::vector<std::string> outputs;  // paths relative to out
  std::map<std::string, std::string> notes;

  /// Writes <out>/manifest_<command>.json and returns its path.
  std::string write(const std::string& out_dir, const RunConfig& cfg) const;
};

/// Sink for progress lines; may be null.
using Logger = std::function<void(const std::string&)>;

// Artifact layout under RunConfig::out.
std::string base_path(const RunConfig& cfg);
std::string skill_path(const RunConfig& cfg, SkillKind kind);
std::string router_path(const RunConfig& cfg, const std::string& task_id);
std::string fused_path(const RunConfig& cfg, const std::string& task_id);

// Commands. Missing inputs throw MissingCheckpointError; invalid settings
// ConfigError; non-finite training DivergenceError.
Manifest cmd_pretrain(const RunConfig& cfg, const Logger& log = {});
Manifest cmd_train_skill(const RunConfig& cfg, bool parallel, const Logger& log = {});
Manifest cmd_gen_data(const RunConfig& cfg, const Logger& log = {});
Manifest cmd_adapt(const RunConfig& cfg, const Logger& log = {});
Manifest cmd_fuse(const RunConfig& cfg, const Logger& log = {});
/// model: "base" or "fused".
Manifest cmd_eval(const RunConfig& cfg, const std::string& model, const Logger& log = {});

struct SweepRow {
  std::size_t k = 0;
  std::string skills;           // ids joined with '+'
  std::size_t skill_params = 0;  // alive adapter scalars across the K skills
  double mean_accuracy = 0.0;   // points
  std::vector<double> accuracy;  // per seed, points
};

struct SweepResult {
  std::vector<SweepRow> rows;
  Manifest manifest;
};

/// Parses "1..4" or "1,2,4,8".
std::vector<std::size_t> parse_k_list(const std::string& text);

/// Normal-setting router per K on the suite task, averaged over cfg.seeds.
/// Writes sweep.csv.
SweepResult cmd_sweep_skills(const RunConfig& cfg, const std::vector<std::size_t>& ks,
                             const Logger& log = {});

struct CriterionResult {
  int id = 0;
  std::string name;
  bool passed = false;
  std::string detail;
};

struct SuiteResult {
  std::vector<CriterionResult> criteria;
  std::map<std::string, double> means;  // "<method>" or "sweep_k<K>" -> points
  Manifest manifest;

  bool passed() const;
};

/// Base, skills (reused from the out dir when their cache keys match),
/// then per seed: base, uniform router, adapted router (normal) and CMA-ES
/// router (few-shot) on the suite task, followed by the skill-count sweep.
/// Writes summary.csv and criteria.csv. Contains no timings, so a fixed
/// config reproduces summary.csv byte for byte; timings go to timing.csv.
SuiteResult cmd_repro_suite(const RunConfig& cfg, bool parallel, const Logger& log = {});

}  // namespace samdkif
