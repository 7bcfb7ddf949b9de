#pragma once

// Experiment configuration: JSON file over pinned defaults, strict key
// validation (unknown keys are rejected, every violation listed), and the
// mapping onto ExperimentPlans. Defaults follow the training protocol's
// stated values: batches of 4 tasks, 1 adaptation step, AdamW at lr 0.001
// with weight decay 0.01, 10,000 search episodes.

#include <cstdlib>
#include <fstream>

#include "json.hpp"
#include "metabias/engine.hpp"

namespace metabias {

using Json = nlohmann::json;

inline Json default_config() {
  return Json{
      {"task",
       {{"family", "concept"},
        {"scheme", "odd_even"},
        {"subset", "all"},
        {"representation", "bits"},
        {"support_sizes", Json::array()},   // empty = task default
        {"train_support", {{"min", 0}, {"max", 0}}},  // 0 = task default
        {"n_way", 20},
        {"k_shot", 5},
        {"n_query", 5},
        {"category_map", ""}}},
      {"architecture",
       {{"families", Json::array({"mlp"})},
        {"grid", "desk"},
        {"variants", Json::array()}}},     // non-empty overrides the grid
      {"training",
       {{"search_episodes", 10000},
        {"batch_tasks", 4},
        {"adapt_steps", 1},
        {"outer_lr", 0.001},
        {"weight_decay", 0.01},
        {"beta1", 0.9},
        {"beta2", 0.999},
        {"epsilon", 1e-8},
        {"alpha_init", Json::array({0.005, 0.1})},
        {"first_order", false},
        {"patience", 2000},
        {"max_episodes", 50000},
        {"val_every", 500},
        {"val_tasks", 100},
        {"improve_tol", 1e-4}}},
      {"evaluation",
       {{"conditions", Json::array()},     // empty = task default
        {"n_tasks", 100},
        {"seeds", Json::array({0, 1, 2})}}},
      {"io",
       {{"data_root", ""},
        {"output_dir", "out"},
        {"checkpoint_dir", ""},
        {"workers", 0}}}};
}

namespace detail {

inline bool same_json_kind(const Json& a, const Json& b) {
  if (a.is_number() && b.is_number()) return true;
  return a.type() == b.type();
}

inline void merge_into(Json& base, const Json& user, const std::string& path,
                       std::vector<std::string>& violations) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    std::string key_path = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) {
      violations.push_back("unknown key: " + key_path);
      continue;
    }
    Json& slot = base[it.key()];
    if (slot.is_object() && it.value().is_object()) {
      merge_into(slot, it.value(), key_path, violations);
    } else if (slot.is_object() != it.value().is_object()) {
      violations.push_back("wrong type for " + key_path);
    } else if (!same_json_kind(slot, it.value())) {
      violations.push_back("wrong type for " + key_path + ": expected " +
                           std::string(slot.type_name()) + ", got " +
                           std::string(it.value().type_name()));
    } else {
      slot = it.value();
    }
  }
}

}  // namespace detail

// Resolved experiment configuration plus the derived plans.
struct ExperimentConfig {
  Json resolved;

  TaskKind task = TaskKind::Concept;
  ModuliScheme scheme = ModuliScheme::OddEven;
  OmniglotSubset subset = OmniglotSubset::All;
  Representation repr = Representation::Bits;
  std::vector<Family> families;
  std::vector<std::pair<int, int>> explicit_variants;
  bool paper_grid = false;

  std::vector<int> support_sizes;
  int train_support_lo = 0, train_support_hi = 0;
  int n_way = 20, k_shot = 5, n_query = 5;
  std::string category_map_path;

  AdamWConfig outer;
  int64_t search_episodes = 10000;
  int batch_tasks = 4;
  int adapt_steps = 1;
  double alpha_lo = 0.005, alpha_hi = 0.1;
  bool first_order = false;
  TrainBudget budget;

  std::vector<Condition> conditions;
  int eval_tasks = 100;
  std::vector<uint64_t> seeds;

  std::string data_root;      // empty: use METABIAS_DATA when needed
  std::string output_dir = "out";
  std::string checkpoint_dir;
  int workers = 0;

  std::string resolved_data_root() const {
    if (!data_root.empty()) return data_root;
    const char* env = std::getenv("METABIAS_DATA");
    return env ? env : "";
  }

  std::string resolved_checkpoint_dir() const {
    return checkpoint_dir.empty() ? output_dir + "/checkpoints"
                                  : checkpoint_dir;
  }

  // Conditions a task's tables report.
  static std::vector<Condition> reported_conditions(TaskKind task) {
    switch (task) {
      case TaskKind::Concept:
        return {Condition::R1, Condition::R10, Condition::R200,
                Condition::M1};
      case TaskKind::Modular:
        return {Condition::R1, Condition::R10, Condition::M1};
      case TaskKind::Omniglot:
        return {Condition::R1, Condition::R10, Condition::R50,
                Condition::R100, Condition::R200, Condition::M1};
    }
    return {};
  }

  // Table 1 grid (16 variants) or the two-variant desk profile.
  static std::vector<std::pair<int, int>> grid_variants(Family family,
                                                        bool paper) {
    std::vector<std::pair<int, int>> out;
    bool deep = family == Family::MLP || family == Family::CNN;
    std::vector<int> layers = deep ? std::vector<int>{2, 4, 6, 8}
                                   : std::vector<int>{1, 2, 3, 4};
    std::vector<int> widths = family == Family::CNN
                                  ? std::vector<int>{16, 32, 64, 128}
                                  : std::vector<int>{8, 16, 32, 64};
    if (paper) {
      for (int l : layers)
        for (int w : widths) out.emplace_back(l, w);
      return out;
    }
    switch (family) {
      case Family::MLP: return {{2, 32}, {2, 64}};
      case Family::CNN: return {{2, 16}, {2, 32}};
      case Family::LSTM: return {{1, 32}, {1, 64}};
      case Family::Transformer: return {{1, 16}, {1, 32}};
    }
    return out;
  }

  ExperimentPlan plan_for(Family family) const {
    ExperimentPlan plan;
    plan.task = task;
    plan.scheme = scheme;
    plan.subset = subset;
    plan.repr = repr;
    plan.family = family;
    plan.variants = explicit_variants.empty()
                        ? grid_variants(family, paper_grid)
                        : explicit_variants;
    plan.batch_tasks = batch_tasks;
    plan.adapt_steps = adapt_steps;
    plan.outer = outer;
    plan.alpha_init_lo = alpha_lo;
    plan.alpha_init_hi = alpha_hi;
    plan.first_order = first_order;
    plan.budget = budget;
    plan.budget.search_episodes = search_episodes;
    plan.conditions = conditions;
    plan.eval_tasks = eval_tasks;
    plan.support_sizes = support_sizes;
    plan.seeds = seeds;
    plan.train_support_lo = train_support_lo;
    plan.train_support_hi = train_support_hi;
    plan.n_way = n_way;
    plan.k_shot = k_shot;
    plan.n_query = n_query;
    // validate every variant against the grid constraints
    for (const auto& [l, w] : plan.variants) plan.arch_spec(l, w);
    return plan;
  }
};

namespace detail {

template <typename T, typename Fn>
T parse_enum(const Json& v, const std::string& what, Fn lookup) {
  auto r = lookup(v.get<std::string>());
  if (!r) throw ConfigError("invalid " + what + ": " + v.get<std::string>());
  return *r;
}

inline std::optional<Family> family_from(const std::string& s) {
  if (s == "mlp") return Family::MLP;
  if (s == "cnn") return Family::CNN;
  if (s == "lstm") return Family::LSTM;
  if (s == "transformer") return Family::Transformer;
  return std::nullopt;
}

inline std::optional<Condition> condition_from(const std::string& s) {
  for (Condition c : {Condition::M1, Condition::R1, Condition::R10,
                      Condition::R50, Condition::R100, Condition::R200})
    if (s == to_string(c)) return c;
  return std::nullopt;
}

}  // namespace detail

// Builds the resolved config from defaults, an optional JSON file, and
// `key.path=value` overrides (flags win over the file, the file over the
// defaults). Every violation is reported, not just the first.
inline ExperimentConfig load_config(const std::string& path,
                                    const std::vector<std::string>& overrides =
                                        {}) {
  Json resolved = default_config();
  std::vector<std::string> violations;

  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file: " + path);
    Json user;
    try {
      user = Json::parse(f);
    } catch (const Json::parse_error& e) {
      throw ConfigError("config parse error in " + path + ": " + e.what());
    }
    detail::merge_into(resolved, user, "", violations);
  }

  for (const std::string& ov : overrides) {
    auto eq = ov.find('=');
    if (eq == std::string::npos) {
      violations.push_back("override is not key.path=value: " + ov);
      continue;
    }
    std::string key_path = ov.substr(0, eq);
    std::string value = ov.substr(eq + 1);
    Json parsed;
    try {
      parsed = Json::parse(value);
    } catch (const Json::parse_error&) {
      parsed = value;  // bare strings stay strings
    }
    // build a nested single-key object and merge it
    Json nested = parsed;
    size_t pos = key_path.size();
    while (true) {
      auto dot = key_path.rfind('.', pos - 1);
      std::string key = key_path.substr(
          dot == std::string::npos ? 0 : dot + 1,
          pos - (dot == std::string::npos ? 0 : dot + 1));
      nested = Json{{key, nested}};
      if (dot == std::string::npos) break;
      pos = dot;
    }
    detail::merge_into(resolved, nested, "", violations);
  }

  if (!violations.empty()) {
    std::string msg = "config validation failed:";
    for (const auto& v : violations) msg += "\n  - " + v;
    throw ConfigError(msg);
  }

  ExperimentConfig cfg;
  cfg.resolved = resolved;
  const Json& t = resolved["task"];
  {
    std::string fam = t["family"].get<std::string>();
    if (fam == "concept") cfg.task = TaskKind::Concept;
    else if (fam == "modular") cfg.task = TaskKind::Modular;
    else if (fam == "omniglot") cfg.task = TaskKind::Omniglot;
    else violations.push_back("invalid task.family: " + fam);
  }
  {
    std::string s = t["scheme"].get<std::string>();
    if (s == "odd_even") cfg.scheme = ModuliScheme::OddEven;
    else if (s == "twenty_twenty") cfg.scheme = ModuliScheme::TwentyTwenty;
    else violations.push_back("invalid task.scheme: " + s);
  }
  {
    std::string s = t["subset"].get<std::string>();
    bool found = false;
    for (OmniglotSubset sub :
         {OmniglotSubset::All, OmniglotSubset::Ancient, OmniglotSubset::Asian,
          OmniglotSubset::MiddleEastern, OmniglotSubset::European})
      if (s == to_string(sub)) {
        cfg.subset = sub;
        found = true;
      }
    if (!found) violations.push_back("invalid task.subset: " + s);
  }
  {
    std::string s = t["representation"].get<std::string>();
    if (s == "bits") cfg.repr = Representation::Bits;
    else if (s == "image") cfg.repr = Representation::Image;
    else violations.push_back("invalid task.representation: " + s);
  }
  if (cfg.task == TaskKind::Omniglot) cfg.repr = Representation::Image;

  for (const auto& v : t["support_sizes"])
    cfg.support_sizes.push_back(v.get<int>());
  if (cfg.support_sizes.empty()) {
    cfg.support_sizes = cfg.task == TaskKind::Concept
                            ? std::vector<int>{5, 10, 15}
                        : cfg.task == TaskKind::Modular
                            ? std::vector<int>{20, 40, 100}
                            : std::vector<int>{cfg.n_way * cfg.k_shot};
  }
  cfg.train_support_lo = t["train_support"]["min"].get<int>();
  cfg.train_support_hi = t["train_support"]["max"].get<int>();
  if (cfg.train_support_lo == 0 && cfg.train_support_hi == 0) {
    if (cfg.task == TaskKind::Concept) {
      cfg.train_support_lo = 2;
      cfg.train_support_hi = 15;
    } else {
      cfg.train_support_lo = 10;
      cfg.train_support_hi = 100;
    }
  }
  if (cfg.train_support_lo < 1 || cfg.train_support_hi < cfg.train_support_lo)
    violations.push_back("invalid task.train_support range");
  cfg.n_way = t["n_way"].get<int>();
  cfg.k_shot = t["k_shot"].get<int>();
  cfg.n_query = t["n_query"].get<int>();
  cfg.category_map_path = t["category_map"].get<std::string>();

  const Json& a = resolved["architecture"];
  for (const auto& f : a["families"]) {
    auto fam = detail::family_from(f.get<std::string>());
    if (!fam)
      violations.push_back("invalid architecture family: " +
                           f.get<std::string>());
    else
      cfg.families.push_back(*fam);
  }
  if (cfg.families.empty())
    violations.push_back("architecture.families must not be empty");
  {
    std::string grid = a["grid"].get<std::string>();
    if (grid == "paper") cfg.paper_grid = true;
    else if (grid == "desk") cfg.paper_grid = false;
    else violations.push_back("invalid architecture.grid: " + grid);
  }
  for (const auto& v : a["variants"]) {
    if (!v.is_array() || v.size() != 2)
      violations.push_back("architecture.variants entries must be "
                           "[layers, width] pairs");
    else
      cfg.explicit_variants.emplace_back(v[0].get<int>(), v[1].get<int>());
  }

  const Json& tr = resolved["training"];
  cfg.search_episodes = tr["search_episodes"].get<int64_t>();
  cfg.batch_tasks = tr["batch_tasks"].get<int>();
  cfg.adapt_steps = tr["adapt_steps"].get<int>();
  cfg.outer.lr = tr["outer_lr"].get<double>();
  cfg.outer.weight_decay = tr["weight_decay"].get<double>();
  cfg.outer.beta1 = tr["beta1"].get<double>();
  cfg.outer.beta2 = tr["beta2"].get<double>();
  cfg.outer.eps = tr["epsilon"].get<double>();
  if (tr["alpha_init"].size() != 2)
    violations.push_back("training.alpha_init must be [lo, hi]");
  else {
    cfg.alpha_lo = tr["alpha_init"][0].get<double>();
    cfg.alpha_hi = tr["alpha_init"][1].get<double>();
  }
  cfg.first_order = tr["first_order"].get<bool>();
  cfg.budget.search_episodes = cfg.search_episodes;
  cfg.budget.patience = tr["patience"].get<int64_t>();
  cfg.budget.max_episodes = tr["max_episodes"].get<int64_t>();
  cfg.budget.val_every = tr["val_every"].get<int64_t>();
  cfg.budget.val_tasks = tr["val_tasks"].get<int>();
  cfg.budget.improve_tol = tr["improve_tol"].get<double>();
  if (cfg.batch_tasks < 1) violations.push_back("training.batch_tasks < 1");
  if (cfg.adapt_steps < 1) violations.push_back("training.adapt_steps < 1");

  const Json& ev = resolved["evaluation"];
  auto allowed = ExperimentConfig::reported_conditions(cfg.task);
  for (const auto& c : ev["conditions"]) {
    auto cond = detail::condition_from(c.get<std::string>());
    if (!cond) {
      violations.push_back("invalid condition: " + c.get<std::string>());
      continue;
    }
    bool ok = false;
    for (Condition x : allowed) ok = ok || x == *cond;
    if (!ok)
      violations.push_back("condition " + c.get<std::string>() +
                           " is not reported for this task");
    else
      cfg.conditions.push_back(*cond);
  }
  if (cfg.conditions.empty()) cfg.conditions = allowed;
  cfg.eval_tasks = ev["n_tasks"].get<int>();
  for (const auto& s : ev["seeds"]) cfg.seeds.push_back(s.get<uint64_t>());
  if (cfg.seeds.empty()) violations.push_back("evaluation.seeds is empty");

  const Json& io = resolved["io"];
  cfg.data_root = io["data_root"].get<std::string>();
  cfg.output_dir = io["output_dir"].get<std::string>();
  cfg.checkpoint_dir = io["checkpoint_dir"].get<std::string>();
  cfg.workers = io["workers"].get<int>();

  if (!violations.empty()) {
    std::string msg = "config validation failed:";
    for (const auto& v : violations) msg += "\n  - " + v;
    throw ConfigError(msg);
  }
  return cfg;
}

// Deterministic checkpoint name for a (plan, seed) unit.
inline std::string checkpoint_name(const ExperimentPlan& plan,
                                   uint64_t seed) {
  std::string task_tag = to_string(plan.task);
  if (plan.task == TaskKind::Modular)
    task_tag += std::string("_") + to_string(plan.scheme);
  if (plan.task == TaskKind::Omniglot)
    task_tag += std::string("_") + to_string(plan.subset);
  return task_tag + "_" + to_string(plan.repr) + "_" +
         to_string(plan.family) + "_seed" + std::to_string(seed) + ".ckpt";
}

}  // namespace metabias
