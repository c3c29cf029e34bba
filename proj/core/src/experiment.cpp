#include "samdkif/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "samdkif/errors.hpp"

namespace samdkif {

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using Real = float;

namespace {

// ---------------------------------------------------------------------------
// Config reading

class Section {
 public:
  Section(const ordered_json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) {
      throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
    }
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const ordered_json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void get(const std::string& key, std::size_t& out) {
    if (const auto* v = find(key)) {
      if (!v->is_number_integer() || v->get<std::int64_t>() < 0) {
        throw ConfigError(at(key), "expected a non-negative integer");
      }
      out = v->get<std::size_t>();
    }
  }
  void get(const std::string& key, std::uint64_t& out, int) {
    if (const auto* v = find(key)) {
      if (!v->is_number_integer() || v->get<std::int64_t>() < 0) {
        throw ConfigError(at(key), "expected a non-negative integer");
      }
      out = v->get<std::uint64_t>();
    }
  }
  void get(const std::string& key, double& out) {
    if (const auto* v = find(key)) {
      if (!v->is_number()) {
        throw ConfigError(at(key), "expected a number");
      }
      out = v->get<double>();
    }
  }
  void get(const std::string& key, bool& out) {
    if (const auto* v = find(key)) {
      if (!v->is_boolean()) {
        throw ConfigError(at(key), "expected true or false");
      }
      out = v->get<bool>();
    }
  }
  void get(const std::string& key, std::string& out) {
    if (const auto* v = find(key)) {
      if (!v->is_string()) {
        throw ConfigError(at(key), "expected a string");
      }
      out = v->get<std::string>();
    }
  }
  template <typename E, typename Parse>
  void get_enum(const std::string& key, E& out, Parse parse) {
    std::string name;
    get(key, name);
    if (name.empty()) {
      return;
    }
    try {
      out = parse(name);
    } catch (const ContractError&) {
      throw ConfigError(at(key), "unknown value '" + name + "'");
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) {
        throw ConfigError(at(it.key()), "unknown key");
      }
    }
  }

 private:
  const ordered_json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& path, const std::string& why) {
  if (!ok) {
    throw ConfigError(path, why);
  }
}

std::vector<SkillKind> parse_kind_list(const ordered_json& v, const std::string& path) {
  require(v.is_array(), path, "expected an array of skill kinds");
  std::vector<SkillKind> out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::string p = path + "[" + std::to_string(i) + "]";
    require(v[i].is_string(), p, "expected a skill kind");
    try {
      out.push_back(parse_skill_kind(v[i].get<std::string>()));
    } catch (const ContractError&) {
      throw ConfigError(p, "unknown skill kind '" + v[i].get<std::string>() + "'");
    }
  }
  return out;
}

void read_model(Section s, ModelConfig& m) {
  s.get("n_layers", m.n_layers);
  s.get("d_model", m.d_model);
  s.get("n_heads", m.n_heads);
  s.get("d_ffn", m.d_ffn);
  s.get("vocab_size", m.vocab_size);
  s.get("max_seq_len", m.max_seq_len);
  s.get("tied_head", m.tied_head);
  s.finish();
  require(m.n_layers >= 1, s.at("n_layers"), "must be >= 1");
  require(m.d_model >= 1, s.at("d_model"), "must be >= 1");
  require(m.n_heads >= 1 && m.d_model % m.n_heads == 0, s.at("n_heads"),
          "must be >= 1 and divide d_model");
  require(m.d_ffn >= 1, s.at("d_ffn"), "must be >= 1");
  require(m.vocab_size >= kByteVocab, s.at("vocab_size"),
          "must be >= " + std::to_string(kByteVocab));
  require(m.max_seq_len >= 8, s.at("max_seq_len"), "must be >= 8");
}

void read_pretrain(Section s, PretrainSection& p) {
  s.get("steps", p.train.steps);
  s.get("batch_size", p.train.batch_size);
  s.get("lr", p.train.lr);
  s.get("init_sd", p.train.init_sd);
  s.get("log_interval", p.train.log_interval);
  s.get("instruction_weight", p.train.instruction_weight);
  s.get("corpus_size", p.corpus_size);
  s.get("holdout_size", p.holdout_size);
  s.finish();
  require(p.train.batch_size >= 1, s.at("batch_size"), "must be >= 1");
  require(p.train.lr > 0.0, s.at("lr"), "must be > 0");
  require(p.train.init_sd >= 0.0, s.at("init_sd"), "must be >= 0");
  require(p.train.log_interval >= 1, s.at("log_interval"), "must be >= 1");
  require(p.train.instruction_weight >= 0.0, s.at("instruction_weight"), "must be >= 0");
  require(p.corpus_size >= 1, s.at("corpus_size"), "must be >= 1");
}

void read_skill_train(Section s, SkillTrainConfig& c) {
  s.get("r_init", c.r_init);
  s.get("r_target", c.r_target);
  s.get("gamma", c.gamma);
  s.get("t0", c.t0);
  s.get("t1", c.t1);
  s.get("total_steps", c.total_steps);
  s.get("lr", c.lr);
  s.get("batch_size", c.batch_size);
  s.get("dropout_p", c.dropout_p);
  s.get("prune_interval", c.prune_interval);
  s.get("importance_ema", c.importance_ema);
  s.get("ema_beta", c.ema_beta);
  s.get("optimizer", c.optimizer);
  s.get("init_sd", c.init_sd);
  s.finish();
  require(c.r_init >= 1, s.at("r_init"), "must be >= 1");
  require(c.r_target <= c.r_init, s.at("r_target"), "must not exceed r_init");
  require(c.gamma >= 0.0, s.at("gamma"), "must be >= 0");
  require(c.t0 < c.t1, s.at("t0"), "must be < t1");
  require(c.t1 <= c.total_steps, s.at("t1"), "must be <= total_steps");
  require(c.lr > 0.0, s.at("lr"), "must be > 0");
  require(c.batch_size >= 1, s.at("batch_size"), "must be >= 1");
  require(c.dropout_p >= 0.0 && c.dropout_p < 1.0, s.at("dropout_p"), "must lie in [0, 1)");
  require(c.prune_interval >= 1, s.at("prune_interval"), "must be >= 1");
  require(c.ema_beta >= 0.0 && c.ema_beta < 1.0, s.at("ema_beta"), "must lie in [0, 1)");
  require(c.optimizer == "adam" || c.optimizer == "sgd", s.at("optimizer"), "must be adam or sgd");
  require(c.init_sd > 0.0, s.at("init_sd"), "must be > 0");
}

void read_skills(Section s, SkillSection& k) {
  if (const auto* v = s.find("kinds")) {
    k.kinds = parse_kind_list(*v, s.at("kinds"));
  }
  s.get("corpus_size", k.corpus_size);
  if (const auto* v = s.find("train")) {
    read_skill_train(Section(*v, s.at("train")), k.train);
  }
  s.finish();
  require(!k.kinds.empty(), s.at("kinds"), "needs at least one skill");
  std::set<SkillKind> unique(k.kinds.begin(), k.kinds.end());
  require(unique.size() == k.kinds.size(), s.at("kinds"), "lists a skill twice");
  require(k.corpus_size >= 1, s.at("corpus_size"), "must be >= 1");
}

void read_router(Section s, RouterTrainConfig& r) {
  s.get_enum("mode", r.mode, parse_router_mode);
  s.get("tau", r.tau);
  s.get("gamma1", r.gamma1);
  s.get("lr", r.lr);
  s.get("steps", r.steps);
  s.get("batch_size", r.batch_size);
  s.get("full_batch_limit", r.full_batch_limit);
  s.get("init_sd", r.init_sd);
  s.finish();
  require(r.tau > 0.0, s.at("tau"), "must be > 0");
  require(r.gamma1 >= 0.0, s.at("gamma1"), "must be >= 0");
  require(r.lr >= 0.0, s.at("lr"), "must be >= 0");
  require(r.batch_size >= 1, s.at("batch_size"), "must be >= 1");
  require(r.init_sd >= 0.0, s.at("init_sd"), "must be >= 0");
}

void read_cmaes(Section s, FewShotConfig& c) {
  s.get("tau", c.tau);
  s.get("sigma0", c.sigma0);
  s.get("max_evals", c.max_evals);
  s.finish();
  require(c.tau > 0.0, s.at("tau"), "must be > 0");
  require(c.sigma0 > 0.0, s.at("sigma0"), "must be > 0");
  require(c.max_evals >= 1, s.at("max_evals"), "must be >= 1");
}

TaskConfig read_task(Section s) {
  TaskConfig t;
  s.get("id", t.id);
  s.get_enum("kind", t.kind, parse_downstream_kind);
  s.get("n", t.n);
  s.get_enum("setting", t.setting, parse_setting);
  if (const auto* v = s.find("sources")) {
    t.sources = parse_kind_list(*v, s.at("sources"));
  }
  s.finish();
  if (t.id.empty()) {
    t.id = std::string(downstream_kind_name(t.kind));
  }
  const std::size_t min_n = t.setting == Setting::kNormal ? 40 : kFewShotSize + 1;
  require(t.n >= min_n, s.at("n"), "must be >= " + std::to_string(min_n) + " for this setting");
  return t;
}

void read_suite(Section s, SuiteSection& u) {
  s.get_enum("task", u.task, parse_downstream_kind);
  s.get("task_size", u.task_size);
  s.get("k_main", u.k_main);
  if (const auto* v = s.find("sweep_k")) {
    require(v->is_array() && !v->empty(), s.at("sweep_k"), "expected a non-empty array");
    u.sweep_k.clear();
    for (std::size_t i = 0; i < v->size(); ++i) {
      const auto& e = (*v)[i];
      require(e.is_number_integer() && e.get<std::int64_t>() >= 1,
              s.at("sweep_k") + "[" + std::to_string(i) + "]", "expected an integer >= 1");
      u.sweep_k.push_back(e.get<std::size_t>());
    }
  }
  s.get("margin_uniform", u.margin_uniform);
  s.get("margin_base", u.margin_base);
  s.get("margin_fewshot", u.margin_fewshot);
  s.get("sweep_tolerance", u.sweep_tolerance);
  s.get("sweep_gain", u.sweep_gain);
  s.finish();
  require(u.task_size >= 40, s.at("task_size"), "must be >= 40");
  require(u.k_main >= 1, s.at("k_main"), "must be >= 1");
  require(std::is_sorted(u.sweep_k.begin(), u.sweep_k.end()), s.at("sweep_k"), "must be ascending");
}

std::string fmt(double v, int digits = 6) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(digits) << v;
  return o.str();
}

// ---------------------------------------------------------------------------
// Files

std::string rel(const RunConfig& cfg, const std::string& path) {
  return fs::relative(fs::path(path), fs::path(cfg.out)).generic_string();
}

void ensure_parent(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) {
    fs::create_directories(parent);
  }
}

void write_text(const std::string& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw FormatError("cannot open '" + path + "' for writing");
  }
  out << text;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw FormatError("cannot read '" + path + "'");
  }
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Checkpoint load_required(const std::string& path) {
  if (!fs::exists(path)) {
    throw MissingCheckpointError(path);
  }
  return Checkpoint::load(path);
}

void say(const Logger& log, const std::string& line) {
  if (log) {
    log(line);
  }
}

// ---------------------------------------------------------------------------
// Seeds. Everything hangs off RunConfig::seed.

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::size_t kind_index(SkillKind kind) {
  return static_cast<std::size_t>(
      std::find(kAllSkillKinds.begin(), kAllSkillKinds.end(), kind) - kAllSkillKinds.begin());
}

std::uint64_t pretrain_seed(const RunConfig& c) { return mix_seed(c.seed, 1); }
std::uint64_t corpus_seed(const RunConfig& c) { return mix_seed(c.seed, 2); }
std::uint64_t holdout_seed(const RunConfig& c) { return mix_seed(c.seed, 3); }
std::uint64_t skill_seed(const RunConfig& c, SkillKind k) { return mix_seed(c.seed, 100 + kind_index(k)); }
std::uint64_t skill_data_seed(const RunConfig& c, SkillKind k) {
  return mix_seed(c.seed, 200 + kind_index(k));
}
std::uint64_t task_seed(const RunConfig& c, const std::string& id) { return mix_seed(c.seed, fnv1a(id)); }
std::uint64_t trial_data_seed(const RunConfig& c, std::uint64_t s) { return mix_seed(c.seed, 1000 + s); }
std::uint64_t trial_router_seed(const RunConfig& c, std::uint64_t s) { return mix_seed(c.seed, 2000 + s); }
std::uint64_t trial_cma_seed(const RunConfig& c, std::uint64_t s) { return mix_seed(c.seed, 3000 + s); }

// ---------------------------------------------------------------------------
// Cache keys for the expensive artifacts.

ordered_json model_json(const ModelConfig& m) {
  ordered_json j;
  j["n_layers"] = m.n_layers;
  j["d_model"] = m.d_model;
  j["n_heads"] = m.n_heads;
  j["d_ffn"] = m.d_ffn;
  j["vocab_size"] = m.vocab_size;
  j["max_seq_len"] = m.max_seq_len;
  j["tied_head"] = m.tied_head;
  return j;
}

ordered_json pretrain_json(const PretrainSection& p) {
  ordered_json j;
  j["steps"] = p.train.steps;
  j["batch_size"] = p.train.batch_size;
  j["lr"] = p.train.lr;
  j["init_sd"] = p.train.init_sd;
  j["log_interval"] = p.train.log_interval;
  j["instruction_weight"] = p.train.instruction_weight;
  j["corpus_size"] = p.corpus_size;
  j["holdout_size"] = p.holdout_size;
  return j;
}

ordered_json skill_train_json(const SkillTrainConfig& c) {
  ordered_json j;
  j["r_init"] = c.r_init;
  j["r_target"] = c.r_target;
  j["gamma"] = c.gamma;
  j["t0"] = c.t0;
  j["t1"] = c.t1;
  j["total_steps"] = c.total_steps;
  j["lr"] = c.lr;
  j["batch_size"] = c.batch_size;
  j["dropout_p"] = c.dropout_p;
  j["prune_interval"] = c.prune_interval;
  j["importance_ema"] = c.importance_ema;
  j["ema_beta"] = c.ema_beta;
  j["optimizer"] = c.optimizer;
  j["init_sd"] = c.init_sd;
  return j;
}

std::string base_key(const RunConfig& c) {
  ordered_json j;
  j["model"] = model_json(c.model);
  j["pretrain"] = pretrain_json(c.pretrain);
  j["seed"] = c.seed;
  return fnv1a_hex(j.dump());
}

std::string skill_key(const RunConfig& c, SkillKind kind) {
  ordered_json j;
  j["base"] = base_key(c);
  j["kind"] = std::string(skill_kind_name(kind));
  j["corpus_size"] = c.skills.corpus_size;
  j["train"] = skill_train_json(c.skills.train);
  return fnv1a_hex(j.dump());
}

bool cache_hit(const std::string& path, const std::string& key) {
  const std::string key_path = path + ".key";
  return fs::exists(path) && fs::exists(key_path) && read_text(key_path) == key;
}

// ---------------------------------------------------------------------------
// Shared pipeline pieces

TransformerWeights<Real> train_base(const RunConfig& cfg, const Logger& log) {
  const auto corpus = gen_pretrain_corpus(cfg.pretrain.corpus_size, corpus_seed(cfg));
  const auto holdout = gen_pretrain_corpus(cfg.pretrain.holdout_size, holdout_seed(cfg));
  PretrainConfig pc = cfg.pretrain.train;
  pc.seed = pretrain_seed(cfg);
  say(log, "pretraining base: " + std::to_string(pc.steps) + " steps");
  auto result = pretrain_base<Real>(cfg.model, corpus, holdout, pc);
  const std::string path = base_path(cfg);
  Checkpoint ck = result.weights.to_checkpoint("base");
  ordered_json meta;
  meta["key"] = base_key(cfg);
  meta["initial_holdout_loss"] = result.initial_holdout_loss;
  meta["final_holdout_loss"] = result.final_holdout_loss;
  ck.meta = meta.dump();
  ensure_parent(path);
  ck.save(path);
  write_text(path + ".key", base_key(cfg));
  std::ostringstream csv;
  csv << "step,loss\n";
  for (const auto& row : result.log) {
    csv << row.step << ',' << fmt(row.loss) << '\n';
  }
  write_text(cfg.out + "/pretrain_log.csv", csv.str());
  say(log, "base holdout loss " + fmt(result.initial_holdout_loss, 3) + " -> " +
               fmt(result.final_holdout_loss, 3));
  return std::move(result.weights);
}

TransformerWeights<Real> load_base(const RunConfig& cfg) {
  return TransformerWeights<Real>::from_checkpoint(load_required(base_path(cfg)));
}

TransformerWeights<Real> ensure_base(const RunConfig& cfg, const Logger& log, bool& reused) {
  reused = cache_hit(base_path(cfg), base_key(cfg));
  if (reused) {
    say(log, "reusing base " + base_path(cfg));
    return load_base(cfg);
  }
  return train_base(cfg, log);
}

SkillAdapter<Real> train_one_skill(const RunConfig& cfg, const TransformerWeights<Real>& base,
                                   SkillKind kind) {
  const std::string id(skill_kind_name(kind));
  const Dataset data = gen_skill_corpus(kind, cfg.skills.corpus_size, skill_data_seed(cfg, kind));
  SkillTrainConfig sc = cfg.skills.train;
  sc.seed = skill_seed(cfg, kind);
  const std::string path = skill_path(cfg, kind);
  ensure_parent(path);
  sc.divergence_checkpoint = path + ".last_good";
  auto result = train_skill<Real>(base, id, data, sc);
  result.skill.to_checkpoint().save(path);
  write_text(path + ".key", skill_key(cfg, kind));
  write_skill_log_csv(cfg.out + "/skills/" + id + "_log.csv", result.log);
  return std::move(result.skill);
}

/// Trains (or reuses) every configured skill. Results come back in
/// cfg.skills.kinds order regardless of thread scheduling.
std::vector<SkillAdapter<Real>> ensure_skills(const RunConfig& cfg,
                                              const TransformerWeights<Real>& base, bool parallel,
                                              bool use_cache, const Logger& log,
                                              std::vector<std::string>* reused) {
  const auto& kinds = cfg.skills.kinds;
  std::vector<std::optional<SkillAdapter<Real>>> slots(kinds.size());
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < kinds.size(); ++i) {
    const std::string path = skill_path(cfg, kinds[i]);
    if (use_cache && cache_hit(path, skill_key(cfg, kinds[i]))) {
      slots[i] = SkillAdapter<Real>::from_checkpoint(Checkpoint::load(path));
      if (reused) {
        reused->push_back(std::string(skill_kind_name(kinds[i])));
      }
    } else {
      todo.push_back(i);
    }
  }
  std::mutex log_mutex;
  auto locked_say = [&](const std::string& line) {
    std::lock_guard<std::mutex> lock(log_mutex);
    say(log, line);
  };
  auto work = [&](std::size_t i) {
    const std::string id(skill_kind_name(kinds[i]));
    locked_say("training skill " + id);
    slots[i] = train_one_skill(cfg, base, kinds[i]);
    locked_say("skill " + id + " done: " + std::to_string(slots[i]->alive_count()) +
               " singular values alive");
  };
  if (parallel && todo.size() > 1) {
    const std::size_t workers =
        std::max<std::size_t>(1, std::min<std::size_t>(todo.size(), std::thread::hardware_concurrency()));
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t j = w; j < todo.size(); j += workers) {
            work(todo[j]);
          }
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) {
      t.join();
    }
    for (const auto& e : errors) {
      if (e) {
        std::rethrow_exception(e);
      }
    }
  } else {
    for (const std::size_t i : todo) {
      work(i);
    }
  }
  std::vector<SkillAdapter<Real>> out;
  for (auto& s : slots) {
    out.push_back(std::move(*s));
  }
  return out;
}

std::vector<SkillAdapter<Real>> load_skills(const RunConfig& cfg) {
  std::vector<SkillAdapter<Real>> out;
  for (const SkillKind k : cfg.skills.kinds) {
    out.push_back(SkillAdapter<Real>::from_checkpoint(load_required(skill_path(cfg, k))));
  }
  return out;
}

SkillLibrary<Real> make_library(const RunConfig& cfg, const std::vector<SkillAdapter<Real>>& skills,
                                std::size_t k) {
  std::vector<SkillAdapter<Real>> subset(skills.begin(), skills.begin() + static_cast<std::ptrdiff_t>(k));
  return SkillLibrary<Real>::make(cfg.model, std::move(subset));
}

DownstreamTask make_task(const RunConfig& cfg, const TaskConfig& t) {
  DownstreamTask task = gen_downstream_task(t.kind, t.n, task_seed(cfg, t.id), t.sources);
  task.spec.task_id = t.id;
  task.spec.setting = t.setting;
  return task;
}

std::vector<double> router_weights(const RouterParams<Real>& params, const SkillLibrary<Real>& lib) {
  NoGradScope<Real> no_grad;
  const Tensor<Real> features =
      params.mode == RouterMode::kFeature ? skill_features(lib) : Tensor<Real>();
  return to_doubles(gate(params, features).R);
}

std::string join_ids(const std::vector<std::string>& ids) {
  std::string out;
  for (const auto& id : ids) {
    out += (out.empty() ? "" : "+") + id;
  }
  return out;
}

std::string r_string(const std::vector<double>& R) {
  std::string out;
  for (const double r : R) {
    out += (out.empty() ? "" : " ") + fmt(r, 3);
  }
  return out;
}

double elapsed(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - since).count();
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (const double x : v) {
    s += x;
  }
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

// ---------------------------------------------------------------------------
// Public config API

RunConfig parse_run_config(const std::string& json_text) {
  ordered_json root;
  try {
    root = ordered_json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<root>", std::string("not valid JSON: ") + e.what());
  }
  RunConfig cfg;
  Section s(root, "");
  if (const auto* v = s.find("model")) read_model(Section(*v, "model"), cfg.model);
  if (const auto* v = s.find("pretrain")) read_pretrain(Section(*v, "pretrain"), cfg.pretrain);
  if (const auto* v = s.find("skills")) read_skills(Section(*v, "skills"), cfg.skills);
  if (const auto* v = s.find("router")) read_router(Section(*v, "router"), cfg.router);
  if (const auto* v = s.find("cmaes")) read_cmaes(Section(*v, "cmaes"), cfg.cmaes);
  if (const auto* v = s.find("tasks")) {
    require(v->is_array(), "tasks", "expected an array");
    std::set<std::string> ids;
    for (std::size_t i = 0; i < v->size(); ++i) {
      const std::string path = "tasks[" + std::to_string(i) + "]";
      cfg.tasks.push_back(read_task(Section((*v)[i], path)));
      require(ids.insert(cfg.tasks.back().id).second, path + ".id", "duplicate task id");
    }
  }
  if (const auto* v = s.find("suite")) read_suite(Section(*v, "suite"), cfg.suite);
  if (const auto* v = s.find("seeds")) {
    require(v->is_array() && !v->empty(), "seeds", "expected a non-empty array of integers");
    cfg.seeds.clear();
    for (std::size_t i = 0; i < v->size(); ++i) {
      const auto& e = (*v)[i];
      require(e.is_number_integer() && e.get<std::int64_t>() >= 0, "seeds[" + std::to_string(i) + "]",
              "expected a non-negative integer");
      cfg.seeds.push_back(e.get<std::uint64_t>());
    }
  }
  s.get("seed", cfg.seed, 0);
  s.get("eval_max_new", cfg.eval_max_new);
  s.get("out", cfg.out);
  s.finish();
  require(cfg.eval_max_new >= 1, "eval_max_new", "must be >= 1");
  require(!cfg.out.empty(), "out", "must not be empty");
  require(cfg.suite.k_main <= cfg.skills.kinds.size(), "suite.k_main",
          "exceeds the number of configured skills");
  require(cfg.suite.sweep_k.back() <= cfg.skills.kinds.size(), "suite.sweep_k",
          "exceeds the number of configured skills");
  return cfg;
}

RunConfig load_run_config(const std::string& path) { return load_run_config(path, {}); }

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::string text;
  try {
    text = read_text(path);
  } catch (const FormatError&) {
    throw ConfigError("<file>", "cannot read config '" + path + "'");
  }
  return parse_run_config(apply_overrides(text, overrides));
}

std::string apply_overrides(const std::string& json_text, const std::vector<std::string>& overrides) {
  if (overrides.empty()) {
    return json_text;
  }
  ordered_json root;
  try {
    root = ordered_json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<root>", std::string("not valid JSON: ") + e.what());
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError(o, "override must look like a.b.c=value");
    }
    const std::string path = o.substr(0, eq);
    const std::string raw = o.substr(eq + 1);
    ordered_json value;
    try {
      value = ordered_json::parse(raw);
    } catch (const nlohmann::json::parse_error&) {
      value = raw;
    }
    ordered_json* node = &root;
    std::size_t start = 0;
    while (true) {
      const auto dot = path.find('.', start);
      const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (!node->is_object()) {
        throw ConfigError(path, "cannot descend into a non-object");
      }
      if (dot == std::string::npos) {
        (*node)[key] = value;
        break;
      }
      node = &(*node)[key];
      if (node->is_null()) {
        *node = ordered_json::object();
      }
      start = dot + 1;
    }
  }
  return root.dump();
}

std::string run_config_json(const RunConfig& c) {
  ordered_json j;
  j["model"] = model_json(c.model);
  j["pretrain"] = pretrain_json(c.pretrain);
  ordered_json skills;
  std::vector<std::string> kinds;
  for (const SkillKind k : c.skills.kinds) {
    kinds.emplace_back(skill_kind_name(k));
  }
  skills["kinds"] = kinds;
  skills["corpus_size"] = c.skills.corpus_size;
  skills["train"] = skill_train_json(c.skills.train);
  j["skills"] = skills;
  ordered_json router;
  router["mode"] = router_mode_name(c.router.mode);
  router["tau"] = c.router.tau;
  router["gamma1"] = c.router.gamma1;
  router["lr"] = c.router.lr;
  router["steps"] = c.router.steps;
  router["batch_size"] = c.router.batch_size;
  router["full_batch_limit"] = c.router.full_batch_limit;
  router["init_sd"] = c.router.init_sd;
  j["router"] = router;
  ordered_json cma;
  cma["tau"] = c.cmaes.tau;
  cma["sigma0"] = c.cmaes.sigma0;
  cma["max_evals"] = c.cmaes.max_evals;
  j["cmaes"] = cma;
  ordered_json tasks = ordered_json::array();
  for (const auto& t : c.tasks) {
    ordered_json e;
    e["id"] = t.id;
    e["kind"] = std::string(downstream_kind_name(t.kind));
    e["n"] = t.n;
    e["setting"] = setting_name(t.setting);
    std::vector<std::string> src;
    for (const SkillKind k : t.sources) {
      src.emplace_back(skill_kind_name(k));
    }
    e["sources"] = src;
    tasks.push_back(e);
  }
  j["tasks"] = tasks;
  ordered_json suite;
  suite["task"] = std::string(downstream_kind_name(c.suite.task));
  suite["task_size"] = c.suite.task_size;
  suite["k_main"] = c.suite.k_main;
  suite["sweep_k"] = c.suite.sweep_k;
  suite["margin_uniform"] = c.suite.margin_uniform;
  suite["margin_base"] = c.suite.margin_base;
  suite["margin_fewshot"] = c.suite.margin_fewshot;
  suite["sweep_tolerance"] = c.suite.sweep_tolerance;
  suite["sweep_gain"] = c.suite.sweep_gain;
  j["suite"] = suite;
  j["seeds"] = c.seeds;
  j["seed"] = c.seed;
  j["eval_max_new"] = c.eval_max_new;
  j["out"] = c.out;
  return j.dump(2);
}

std::string config_hash(const RunConfig& cfg) {
  // The output directory does not change any result.
  RunConfig copy = cfg;
  copy.out.clear();
  return fnv1a_hex(run_config_json(copy));
}

std::string fnv1a_hex(const std::string& bytes) {
  std::ostringstream o;
  o << std::hex << std::setw(16) << std::setfill('0') << fnv1a(bytes);
  return o.str();
}

std::string file_hash(const std::string& path) { return fnv1a_hex(read_text(path)); }

std::string Manifest::write(const std::string& out_dir, const RunConfig& cfg) const {
  ordered_json j;
  j["command"] = command;
  j["config_hash"] = config_hash;
  j["seed"] = seed;
  auto list = [&](const std::vector<std::string>& paths) {
    ordered_json arr = ordered_json::array();
    for (const auto& p : paths) {
      ordered_json e;
      e["path"] = p;
      const fs::path full = fs::path(out_dir) / p;
      e["fnv1a"] = fs::exists(full) ? file_hash(full.string()) : std::string();
      arr.push_back(e);
    }
    return arr;
  };
  j["inputs"] = list(inputs);
  j["outputs"] = list(outputs);
  ordered_json n = ordered_json::object();
  for (const auto& [k, v] : notes) {
    n[k] = v;
  }
  j["notes"] = n;
  j["config"] = ordered_json::parse(run_config_json(cfg));
  const std::string path = out_dir + "/manifest_" + command + ".json";
  write_text(path, j.dump(2) + "\n");
  return path;
}

std::string base_path(const RunConfig& cfg) { return cfg.out + "/base.samk"; }
std::string skill_path(const RunConfig& cfg, SkillKind kind) {
  return cfg.out + "/skills/" + std::string(skill_kind_name(kind)) + ".samk";
}
std::string router_path(const RunConfig& cfg, const std::string& task_id) {
  return cfg.out + "/routers/" + task_id + ".samk";
}
std::string fused_path(const RunConfig& cfg, const std::string& task_id) {
  return cfg.out + "/fused/" + task_id + ".samk";
}

// ---------------------------------------------------------------------------
// Commands

namespace {

Manifest start(const std::string& command, const RunConfig& cfg) {
  Manifest m;
  m.command = command;
  m.config_hash = config_hash(cfg);
  m.seed = cfg.seed;
  fs::create_directories(cfg.out);
  return m;
}

void require_tasks(const RunConfig& cfg) {
  if (cfg.tasks.empty()) {
    throw ConfigError("tasks", "this command needs at least one task");
  }
}

}  // namespace

Manifest cmd_pretrain(const RunConfig& cfg, const Logger& log) {
  Manifest m = start("pretrain", cfg);
  train_base(cfg, log);
  m.outputs = {"base.samk", "base.samk.key", "pretrain_log.csv"};
  m.notes["corpus"] = "general:" + std::to_string(cfg.pretrain.corpus_size) + ":" +
                      std::to_string(corpus_seed(cfg));
  m.write(cfg.out, cfg);
  return m;
}

Manifest cmd_train_skill(const RunConfig& cfg, bool parallel, const Logger& log) {
  Manifest m = start("train-skill", cfg);
  const auto base = load_base(cfg);
  const auto skills = ensure_skills(cfg, base, parallel, false, log, nullptr);
  m.inputs = {"base.samk"};
  for (std::size_t i = 0; i < skills.size(); ++i) {
    const std::string id(skill_kind_name(cfg.skills.kinds[i]));
    m.outputs.push_back("skills/" + id + ".samk");
    m.outputs.push_back("skills/" + id + ".samk.key");
    m.outputs.push_back("skills/" + id + "_log.csv");
    m.notes["corpus." + id] = id + ":" + std::to_string(cfg.skills.corpus_size) + ":" +
                              std::to_string(skill_data_seed(cfg, cfg.skills.kinds[i]));
    m.notes["alive." + id] = std::to_string(skills[i].alive_count());
  }
  m.notes["parallel"] = parallel ? "true" : "false";
  m.write(cfg.out, cfg);
  return m;
}

Manifest cmd_gen_data(const RunConfig& cfg, const Logger& log) {
  Manifest m = start("gen-data", cfg);
  for (const SkillKind k : cfg.skills.kinds) {
    const std::string id(skill_kind_name(k));
    const std::string rel_path = "data/skills/" + id + ".jsonl";
    ensure_parent(cfg.out + "/" + rel_path);
    write_jsonl(cfg.out + "/" + rel_path,
                gen_skill_corpus(k, cfg.skills.corpus_size, skill_data_seed(cfg, k)));
    m.outputs.push_back(rel_path);
    m.notes["generator." + rel_path] = id + ":" + std::to_string(cfg.skills.corpus_size) + ":" +
                                       std::to_string(skill_data_seed(cfg, k));
  }
  for (const auto& t : cfg.tasks) {
    const DownstreamTask task = make_task(cfg, t);
    const std::string rel_path = "data/tasks/" + t.id + ".jsonl";
    ensure_parent(cfg.out + "/" + rel_path);
    write_jsonl(cfg.out + "/" + rel_path, task.data);
    m.outputs.push_back(rel_path);
    m.notes["generator." + rel_path] = std::string(downstream_kind_name(t.kind)) + ":" +
                                       std::to_string(t.n) + ":" + std::to_string(task_seed(cfg, t.id));
  }
  say(log, "wrote " + std::to_string(m.outputs.size()) + " datasets");
  m.write(cfg.out, cfg);
  return m;
}

Manifest cmd_adapt(const RunConfig& cfg, const Logger& log) {
  require_tasks(cfg);
  Manifest m = start("adapt", cfg);
  const auto base = load_base(cfg);
  const auto skills = load_skills(cfg);
  const auto lib = make_library(cfg, skills, skills.size());
  m.inputs.push_back("base.samk");
  for (const SkillKind k : cfg.skills.kinds) {
    m.inputs.push_back("skills/" + std::string(skill_kind_name(k)) + ".samk");
  }
  for (const auto& t : cfg.tasks) {
    const DownstreamTask task = make_task(cfg, t);
    const AdaptationSplit sp = split(task.data, task.spec, cfg.seed);
    RouterParams<Real> params;
    std::string log_rel;
    if (t.setting == Setting::kNormal) {
      RouterTrainConfig rc = cfg.router;
      rc.seed = mix_seed(cfg.seed, fnv1a(t.id) + 1);
      auto result = adapt_normal<Real>(base, lib, sp.adaptation, rc);
      params = std::move(result.params);
      log_rel = "routers/" + t.id + "_log.csv";
      ensure_parent(cfg.out + "/" + log_rel);
      write_router_log_csv(cfg.out + "/" + log_rel, result.log);
    } else {
      FewShotConfig fc = cfg.cmaes;
      fc.seed = mix_seed(cfg.seed, fnv1a(t.id) + 2);
      const std::size_t before = Tape<Real>::backward_calls();
      auto result = adapt_fewshot<Real>(base, lib, sp.adaptation, fc);
      m.notes["backward_calls." + t.id] = std::to_string(Tape<Real>::backward_calls() - before);
      params = std::move(result.params);
      log_rel = "routers/" + t.id + "_cma.csv";
      ensure_parent(cfg.out + "/" + log_rel);
      write_cma_history_csv(cfg.out + "/" + log_rel, result.history);
    }
    const std::string path = router_path(cfg, t.id);
    ensure_parent(path);
    params.to_checkpoint(cfg.model).save(path);
    m.outputs.push_back(rel(cfg, path));
    m.outputs.push_back(log_rel);
    const auto R = router_weights(params, lib);
    m.notes["R." + t.id] = r_string(R);
    say(log, t.id + " (" + setting_name(t.setting) + "): R = " + r_string(R));
  }
  m.write(cfg.out, cfg);
  return m;
}

Manifest cmd_fuse(const RunConfig& cfg, const Logger& log) {
  require_tasks(cfg);
  Manifest m = start("fuse", cfg);
  const Checkpoint base_ck = load_required(base_path(cfg));
  const auto base = TransformerWeights<Real>::from_checkpoint(base_ck);
  const auto skills = load_skills(cfg);
  const auto lib = make_library(cfg, skills, skills.size());
  const std::string base_id = "base:" + fnv1a_hex(base_ck.serialize());
  m.inputs.push_back("base.samk");
  for (const SkillKind k : cfg.skills.kinds) {
    m.inputs.push_back("skills/" + std::string(skill_kind_name(k)) + ".samk");
  }
  for (const auto& t : cfg.tasks) {
    const auto params = RouterParams<Real>::from_checkpoint(load_required(router_path(cfg, t.id)));
    if (params.skill_ids != lib.ids()) {
      throw LibraryError("router for '" + t.id + "' was trained on a different skill list");
    }
    const auto R = router_weights(params, lib);
    const auto fused = fuse<Real>(base, lib, R, base_id, params.tau);
    const std::string path = fused_path(cfg, t.id);
    ensure_parent(path);
    fused.to_checkpoint().save(path);
    m.inputs.push_back(rel(cfg, router_path(cfg, t.id)));
    m.outputs.push_back(rel(cfg, path));
    say(log, "fused " + t.id + ": R = " + r_string(R));
  }
  m.write(cfg.out, cfg);
  return m;
}

Manifest cmd_eval(const RunConfig& cfg, const std::string& model, const Logger& log) {
  require_tasks(cfg);
  if (model != "base" && model != "fused") {
    throw ConfigError("model", "must be base or fused");
  }
  Manifest m = start("eval-" + model, cfg);
  std::optional<TransformerWeights<Real>> base;
  if (model == "base") {
    base = load_base(cfg);
    m.inputs.push_back("base.samk");
  }
  std::ostringstream csv;
  csv << EvalReport::kCsvHeader << '\n';
  for (const auto& t : cfg.tasks) {
    const DownstreamTask task = make_task(cfg, t);
    const AdaptationSplit sp = split(task.data, task.spec, cfg.seed);
    EvalReport report;
    if (model == "base") {
      report = evaluate<Real>(*base, nullptr, sp.test, task.spec, cfg.seed, cfg.eval_max_new);
    } else {
      const auto fused = FusedModel<Real>::from_checkpoint(load_required(fused_path(cfg, t.id)));
      m.inputs.push_back(rel(cfg, fused_path(cfg, t.id)));
      report = evaluate<Real>(fused.weights, nullptr, sp.test, task.spec, cfg.seed, cfg.eval_max_new);
    }
    const std::string rel_path = "reports/" + t.id + "_" + model + ".json";
    write_text(cfg.out + "/" + rel_path, report.to_json() + "\n");
    m.outputs.push_back(rel_path);
    csv << report.csv_row() << '\n';
    say(log, t.id + " [" + model + "] " + metric_name(report.metric) + " = " + fmt(report.value(), 4));
  }
  const std::string csv_rel = "eval_" + model + ".csv";
  write_text(cfg.out + "/" + csv_rel, csv.str());
  m.outputs.push_back(csv_rel);
  m.notes["model"] = model;
  m.write(cfg.out, cfg);
  return m;
}

std::vector<std::size_t> parse_k_list(const std::string& text) {
  std::vector<std::size_t> out;
  auto to_k = [&](const std::string& s) {
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(s, &pos);
    } catch (const std::exception&) {
      throw ConfigError("k", "cannot parse '" + text + "'");
    }
    if (pos != s.size() || v == 0) {
      throw ConfigError("k", "cannot parse '" + text + "'");
    }
    return static_cast<std::size_t>(v);
  };
  const auto dots = text.find("..");
  if (dots != std::string::npos) {
    const std::size_t lo = to_k(text.substr(0, dots));
    const std::size_t hi = to_k(text.substr(dots + 2));
    if (hi < lo) {
      throw ConfigError("k", "empty range '" + text + "'");
    }
    for (std::size_t k = lo; k <= hi; ++k) {
      out.push_back(k);
    }
    return out;
  }
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    out.push_back(to_k(item));
  }
  if (out.empty() || !std::is_sorted(out.begin(), out.end())) {
    throw ConfigError("k", "expected an ascending list, got '" + text + "'");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Suite

namespace {

struct Trial {
  TaskSpec spec;
  AdaptationSplit normal;
  AdaptationSplit fewshot;
};

Trial make_trial(const RunConfig& cfg, std::uint64_t s) {
  DownstreamTask task = gen_downstream_task(cfg.suite.task, cfg.suite.task_size, trial_data_seed(cfg, s));
  Trial t;
  t.spec = task.spec;
  t.spec.setting = Setting::kNormal;
  t.normal = split(task.data, t.spec, s);
  TaskSpec fs_spec = t.spec;
  fs_spec.setting = Setting::kFewShot;
  t.fewshot = split(task.data, fs_spec, s);
  return t;
}

double points(const TransformerWeights<Real>& w, const Dataset& test, const TaskSpec& spec,
              std::uint64_t seed, std::size_t max_new) {
  return 100.0 * evaluate<Real>(w, nullptr, test, spec, seed, max_new).value();
}

double routed_points(const RunConfig& cfg, const TransformerWeights<Real>& base,
                     const SkillLibrary<Real>& lib, const std::vector<double>& R, const Trial& t,
                     const Dataset& test, std::uint64_t s) {
  const auto fused = fuse<Real>(base, lib, R, "base", cfg.router.tau);
  return points(fused.weights, test, t.spec, s, cfg.eval_max_new);
}

double adapted_points(const RunConfig& cfg, const TransformerWeights<Real>& base,
                      const SkillLibrary<Real>& lib, const Trial& t, std::uint64_t s,
                      std::size_t* trainable, std::vector<double>* R_out) {
  RouterTrainConfig rc = cfg.router;
  rc.seed = trial_router_seed(cfg, s);
  const auto result = adapt_normal<Real>(base, lib, t.normal.adaptation, rc);
  if (trainable) {
    *trainable = result.params.trainable_count();
  }
  const auto R = router_weights(result.params, lib);
  if (R_out) {
    *R_out = R;
  }
  return routed_points(cfg, base, lib, R, t, t.normal.test, s);
}

}  // namespace

SweepResult cmd_sweep_skills(const RunConfig& cfg, const std::vector<std::size_t>& ks,
                             const Logger& log) {
  if (ks.empty()) {
    throw ConfigError("k", "no skill counts given");
  }
  if (ks.back() > cfg.skills.kinds.size()) {
    throw ConfigError("k", "asks for " + std::to_string(ks.back()) + " skills but only " +
                               std::to_string(cfg.skills.kinds.size()) + " are configured");
  }
  SweepResult out;
  out.manifest = start("sweep-skills", cfg);
  const auto base = load_base(cfg);
  std::vector<SkillAdapter<Real>> skills;
  for (std::size_t i = 0; i < ks.back(); ++i) {
    skills.push_back(SkillAdapter<Real>::from_checkpoint(load_required(skill_path(cfg, cfg.skills.kinds[i]))));
    out.manifest.inputs.push_back("skills/" + std::string(skill_kind_name(cfg.skills.kinds[i])) + ".samk");
  }
  out.manifest.inputs.insert(out.manifest.inputs.begin(), "base.samk");
  std::vector<Trial> trials;
  for (const auto s : cfg.seeds) {
    trials.push_back(make_trial(cfg, s));
  }
  std::ostringstream csv;
  csv << "k,skills,skill_params,mean_accuracy";
  for (const auto s : cfg.seeds) {
    csv << ",seed_" << s;
  }
  csv << '\n';
  for (const std::size_t k : ks) {
    const auto lib = make_library(cfg, skills, k);
    SweepRow row;
    row.k = k;
    row.skills = join_ids(lib.ids());
    for (const auto& sk : lib.skills) {
      for (const auto& tr : sk.triplets) {
        row.skill_params += tr.alive_count() * (tr.U.rows() + tr.V.cols() + 1);
      }
    }
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
      row.accuracy.push_back(adapted_points(cfg, base, lib, trials[i], cfg.seeds[i], nullptr, nullptr));
    }
    row.mean_accuracy = mean_of(row.accuracy);
    csv << k << ',' << row.skills << ',' << row.skill_params << ',' << fmt(row.mean_accuracy, 4);
    for (const double a : row.accuracy) {
      csv << ',' << fmt(a, 4);
    }
    csv << '\n';
    say(log, "K=" + std::to_string(k) + " mean accuracy " + fmt(row.mean_accuracy, 2));
    out.rows.push_back(std::move(row));
  }
  write_text(cfg.out + "/sweep.csv", csv.str());
  out.manifest.outputs.push_back("sweep.csv");
  out.manifest.write(cfg.out, cfg);
  return out;
}

bool SuiteResult::passed() const {
  return std::all_of(criteria.begin(), criteria.end(), [](const CriterionResult& c) { return c.passed; });
}

SuiteResult cmd_repro_suite(const RunConfig& cfg, bool parallel, const Logger& log) {
  SuiteResult out;
  out.manifest = start("repro-suite", cfg);
  auto& m = out.manifest;
  std::ostringstream timing;
  timing << "stage,seconds\n";
  auto t_stage = std::chrono::steady_clock::now();

  bool base_reused = false;
  const auto base = ensure_base(cfg, log, base_reused);
  timing << "base," << fmt(elapsed(t_stage), 1) << '\n';
  m.notes["base_reused"] = base_reused ? "true" : "false";
  if (!base_reused) {
    m.outputs.push_back("pretrain_log.csv");
  }
  m.outputs.push_back("base.samk");
  m.outputs.push_back("base.samk.key");

  t_stage = std::chrono::steady_clock::now();
  std::vector<std::string> reused;
  const auto skills = ensure_skills(cfg, base, parallel, true, log, &reused);
  timing << "skills," << fmt(elapsed(t_stage), 1) << '\n';
  for (const SkillKind k : cfg.skills.kinds) {
    const std::string id(skill_kind_name(k));
    m.outputs.push_back("skills/" + id + ".samk");
    m.outputs.push_back("skills/" + id + ".samk.key");
    if (fs::exists(cfg.out + "/skills/" + id + "_log.csv")) {
      m.outputs.push_back("skills/" + id + "_log.csv");
    }
  }
  m.notes["skills_reused"] = join_ids(reused);

  const std::string task_name(downstream_kind_name(cfg.suite.task));
  const std::size_t K = cfg.suite.k_main;
  const auto lib = make_library(cfg, skills, K);
  std::vector<Trial> trials;
  for (const auto s : cfg.seeds) {
    trials.push_back(make_trial(cfg, s));
  }

  std::ostringstream summary;
  summary << "task,method,k,seed,accuracy\n";
  auto row = [&](const std::string& method, std::size_t k, const std::string& seed, double v) {
    summary << task_name << ',' << method << ',' << k << ',' << seed << ',' << fmt(v, 4) << '\n';
  };
  std::vector<double> acc_base, acc_base_fs, acc_uniform, acc_adapted, acc_fewshot;
  std::size_t stage2_normal = 0, stage2_fewshot = 0, backward_calls = 0;
  t_stage = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
    const auto s = cfg.seeds[i];
    const Trial& t = trials[i];
    acc_base.push_back(points(base, t.normal.test, t.spec, s, cfg.eval_max_new));
    acc_base_fs.push_back(t.fewshot.test == t.normal.test
                              ? acc_base.back()
                              : points(base, t.fewshot.test, t.spec, s, cfg.eval_max_new));
    const std::vector<double> uniform(K, 1.0 / static_cast<double>(K));
    acc_uniform.push_back(routed_points(cfg, base, lib, uniform, t, t.normal.test, s));
    std::vector<double> R;
    acc_adapted.push_back(adapted_points(cfg, base, lib, t, s, &stage2_normal, &R));

    FewShotConfig fc = cfg.cmaes;
    fc.seed = trial_cma_seed(cfg, s);
    const std::size_t before = Tape<Real>::backward_calls();
    const auto fsr = adapt_fewshot<Real>(base, lib, t.fewshot.adaptation, fc);
    backward_calls += Tape<Real>::backward_calls() - before;
    stage2_fewshot = fsr.params.trainable_count();
    const auto R_fs = router_weights(fsr.params, lib);
    acc_fewshot.push_back(routed_points(cfg, base, lib, R_fs, t, t.fewshot.test, s));

    row("base", 0, std::to_string(s), acc_base.back());
    row("uniform_router", K, std::to_string(s), acc_uniform.back());
    row("adapted_normal", K, std::to_string(s), acc_adapted.back());
    row("base_fewshot_test", 0, std::to_string(s), acc_base_fs.back());
    row("adapted_fewshot", K, std::to_string(s), acc_fewshot.back());
    say(log, "seed " + std::to_string(s) + ": base " + fmt(acc_base.back(), 1) + " uniform " +
                 fmt(acc_uniform.back(), 1) + " adapted " + fmt(acc_adapted.back(), 1) + " [R " +
                 r_string(R) + "] fewshot " + fmt(acc_fewshot.back(), 1) + " [R " + r_string(R_fs) + "]");
  }
  timing << "table," << fmt(elapsed(t_stage), 1) << '\n';
  out.means["base"] = mean_of(acc_base);
  out.means["base_fewshot_test"] = mean_of(acc_base_fs);
  out.means["uniform_router"] = mean_of(acc_uniform);
  out.means["adapted_normal"] = mean_of(acc_adapted);
  out.means["adapted_fewshot"] = mean_of(acc_fewshot);
  row("base", 0, "mean", out.means["base"]);
  row("uniform_router", K, "mean", out.means["uniform_router"]);
  row("adapted_normal", K, "mean", out.means["adapted_normal"]);
  row("base_fewshot_test", 0, "mean", out.means["base_fewshot_test"]);
  row("adapted_fewshot", K, "mean", out.means["adapted_fewshot"]);

  // Skill-count sweep. The K = k_main point is the adapted run above.
  t_stage = std::chrono::steady_clock::now();
  std::vector<double> sweep_means;
  for (const std::size_t k : cfg.suite.sweep_k) {
    std::vector<double> acc;
    if (k == K) {
      acc = acc_adapted;
    } else {
      const auto lib_k = make_library(cfg, skills, k);
      for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
        acc.push_back(adapted_points(cfg, base, lib_k, trials[i], cfg.seeds[i], nullptr, nullptr));
      }
    }
    for (std::size_t i = 0; i < acc.size(); ++i) {
      row("sweep", k, std::to_string(cfg.seeds[i]), acc[i]);
    }
    sweep_means.push_back(mean_of(acc));
    out.means["sweep_k" + std::to_string(k)] = sweep_means.back();
    row("sweep", k, "mean", sweep_means.back());
    say(log, "sweep K=" + std::to_string(k) + ": " + fmt(sweep_means.back(), 2));
  }
  timing << "sweep," << fmt(elapsed(t_stage), 1) << '\n';

  // Criteria.
  const auto& u = cfg.suite;
  const double a = out.means["adapted_normal"], un = out.means["uniform_router"], b = out.means["base"];
  out.criteria.push_back({5, "adapted router beats uniform router and base",
                          a >= un + u.margin_uniform && a >= b + u.margin_base,
                          "adapted " + fmt(a, 2) + " uniform " + fmt(un, 2) + " base " + fmt(b, 2)});
  const double f = out.means["adapted_fewshot"], bf = out.means["base_fewshot_test"];
  out.criteria.push_back({6, "few-shot CMA-ES router beats base without backward passes",
                          f >= bf + u.margin_fewshot && backward_calls == 0,
                          "fewshot " + fmt(f, 2) + " base " + fmt(bf, 2) + " backward_calls " +
                              std::to_string(backward_calls)});
  bool monotone = true;
  for (std::size_t i = 1; i < sweep_means.size(); ++i) {
    monotone = monotone && sweep_means[i] >= sweep_means[i - 1] - u.sweep_tolerance;
  }
  const bool gain = sweep_means.back() >= sweep_means.front() + u.sweep_gain;
  std::string sweep_detail;
  for (std::size_t i = 0; i < sweep_means.size(); ++i) {
    sweep_detail += (i ? " " : "") + std::string("K") + std::to_string(u.sweep_k[i]) + "=" +
                    fmt(sweep_means[i], 2);
  }
  out.criteria.push_back({7, "accuracy grows with the number of skills", monotone && gain, sweep_detail});
  const std::size_t base_params = base.parameter_count();
  std::size_t worst_skill = 0;
  for (const auto& sk : skills) {
    worst_skill = std::max(worst_skill, sk.parameter_count());
  }
  const std::size_t F = lib.feature_dim();
  const double ratio = static_cast<double>(worst_skill) / static_cast<double>(base_params);
  const bool eff = ratio < 0.10 && stage2_normal <= 2 * K + K * F && stage2_fewshot <= 2 * K + K * F;
  out.criteria.push_back({8, "parameter efficiency", eff,
                          "stage1 " + std::to_string(worst_skill) + "/" + std::to_string(base_params) +
                              " = " + fmt(ratio, 4) + " stage2 " + std::to_string(stage2_normal) +
                              "," + std::to_string(stage2_fewshot) + " <= " +
                              std::to_string(2 * K + K * F)});

  write_text(cfg.out + "/summary.csv", summary.str());
  std::ostringstream crit;
  crit << "criterion,name,passed,detail\n";
  for (const auto& c : out.criteria) {
    crit << c.id << ',' << c.name << ',' << (c.passed ? "pass" : "fail") << ",\"" << c.detail << "\"\n";
  }
  write_text(cfg.out + "/criteria.csv", crit.str());
  write_text(cfg.out + "/timing.csv", timing.str());
  m.outputs.push_back("summary.csv");
  m.outputs.push_back("criteria.csv");
  m.outputs.push_back("timing.csv");
  m.notes["summary_fnv1a"] = file_hash(cfg.out + "/summary.csv");
  m.write(cfg.out, cfg);
  return out;
}

}  // namespace samdkif
