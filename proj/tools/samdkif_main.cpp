// samdkif <command> --config <path> [--seed N] [--out DIR] [--set key=value ...]
//
// Exit codes: 0 ok, 1 other error, 2 missing checkpoint, 3 invalid config,
// 4 numerical divergence, 5 repro-suite criterion failed. Errors go to
// stderr as "error[<category>] <message>".

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "samdkif/errors.hpp"
#include "samdkif/experiment.hpp"

namespace {

enum Exit { kOk = 0, kOther = 1, kMissing = 2, kConfig = 3, kDivergence = 4, kCriteria = 5 };

int fail(const char* category, const std::string& message, int code) {
  std::cerr << "error[" << category << "] " << message << '\n';
  return code;
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "run config (JSON)")->required();
  cmd->add_option("--seed", c.seed, "root seed; overrides the config's seed");
  cmd->add_option("--out", c.out, "output directory; overrides the config's out");
  cmd->add_option("--set", c.overrides, "override a config leaf, e.g. router.tau=0.5");
  cmd->add_flag("-q,--quiet", c.quiet, "no progress output");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Skill adapters, routers and fusion on a tiny transformer"};
  app.require_subcommand(1);

  Common common;
  bool parallel = false;
  std::string k_list = "1,2,4,8";
  std::string model = "fused";

  auto* pretrain = app.add_subcommand("pretrain", "train the base model");
  auto* train_skill = app.add_subcommand("train-skill", "train every configured skill adapter");
  auto* adapt = app.add_subcommand("adapt", "fit a router per task (GD or CMA-ES by setting)");
  auto* fuse = app.add_subcommand("fuse", "materialize routed adapters into the base weights");
  auto* eval = app.add_subcommand("eval", "evaluate base or fused models on the task test splits");
  auto* gen_data = app.add_subcommand("gen-data", "write skill corpora and task datasets as JSONL");
  auto* sweep = app.add_subcommand("sweep-skills", "accuracy as a function of the number of skills");
  auto* repro = app.add_subcommand("repro-suite", "end-to-end run that checks the trend criteria");
  for (auto* cmd : {pretrain, train_skill, adapt, fuse, eval, gen_data, sweep, repro}) {
    add_common(cmd, common);
  }
  train_skill->add_flag("--parallel", parallel, "one worker thread per skill");
  repro->add_flag("--parallel", parallel, "train skills on worker threads");
  sweep->add_option("--k", k_list, "skill counts, \"1..4\" or \"1,2,4,8\"");
  eval->add_option("--model", model, "base or fused")->check(CLI::IsMember({"base", "fused"}));

  CLI11_PARSE(app, argc, argv);

  try {
    samdkif::RunConfig cfg = samdkif::load_run_config(common.config, common.overrides);
    if (common.seed) {
      cfg.seed = *common.seed;
    }
    if (!common.out.empty()) {
      cfg.out = common.out;
    }
    const samdkif::Logger log = [&](const std::string& line) {
      if (!common.quiet) {
        std::cout << line << std::endl;
      }
    };
    if (*pretrain) {
      samdkif::cmd_pretrain(cfg, log);
    } else if (*train_skill) {
      samdkif::cmd_train_skill(cfg, parallel, log);
    } else if (*adapt) {
      samdkif::cmd_adapt(cfg, log);
    } else if (*fuse) {
      samdkif::cmd_fuse(cfg, log);
    } else if (*eval) {
      samdkif::cmd_eval(cfg, model, log);
    } else if (*gen_data) {
      samdkif::cmd_gen_data(cfg, log);
    } else if (*sweep) {
      const auto result = samdkif::cmd_sweep_skills(cfg, samdkif::parse_k_list(k_list), log);
      std::cout << "k,skills,skill_params,mean_accuracy\n";
      for (const auto& r : result.rows) {
        std::cout << r.k << ',' << r.skills << ',' << r.skill_params << ',' << r.mean_accuracy << '\n';
      }
    } else if (*repro) {
      const auto result = samdkif::cmd_repro_suite(cfg, parallel, log);
      for (const auto& c : result.criteria) {
        std::cout << "criterion " << c.id << " " << (c.passed ? "PASS" : "FAIL") << ": " << c.name
                  << " (" << c.detail << ")\n";
      }
      if (!result.passed()) {
        return fail("criteria", "repro-suite: at least one criterion failed", kCriteria);
      }
    }
  } catch (const samdkif::ConfigError& e) {
    return fail("config", e.what(), kConfig);
  } catch (const samdkif::MissingCheckpointError& e) {
    return fail("missing_checkpoint", e.what(), kMissing);
  } catch (const samdkif::DivergenceError& e) {
    return fail("divergence", e.what(), kDivergence);
  } catch (const samdkif::LibraryError& e) {
    return fail("library", e.what(), kOther);
  } catch (const samdkif::FormatError& e) {
    return fail("format", e.what(), kOther);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), kOther);
  }
  return kOk;
}
