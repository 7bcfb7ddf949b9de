// Command-line entry point: episode generation, meta-training with
// architecture search, random-initialization baselines, meta-testing,
// report emission, curve dumps, and the gradient/oracle self check.
//
// Exit codes: 0 success, 1 validation error, 2 numerical failure,
// 3 missing data.

#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <mutex>

#include "CLI11.hpp"
#include "metabias/checks.hpp"
#include "metabias/config.hpp"
#include "metabias/data_io.hpp"

namespace fs = std::filesystem;
using namespace metabias;

namespace {

// Partial outputs never land on the final path.
void atomic_write(const std::string& path, const std::string& content) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw DataError("cannot write " + tmp);
    f << content;
  }
  fs::rename(tmp, path);
}

void atomic_save_checkpoint(const std::string& path, const MetaState& st) {
  fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::string tmp = path + ".tmp";
  save_checkpoint(tmp, st);
  fs::rename(tmp, path);
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read " + path);
  return std::string((std::istreambuf_iterator<char>(f)),
                     std::istreambuf_iterator<char>());
}

// Runs fn(i) for i in [0, n) on up to `workers` threads; outputs are
// collected by index so scheduling never changes results.
template <typename Fn>
void parallel_units(int n, int workers, Fn fn) {
  if (workers <= 0)
    workers = static_cast<int>(std::thread::hardware_concurrency());
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<size_t>(n));
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      while (true) {
        int i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          errors[static_cast<size_t>(i)] = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

struct LoadedData {
  std::optional<OmniglotData> omniglot;
  const OmniglotIndex* background = nullptr;
  const OmniglotIndex* evaluation = nullptr;
  OmniglotIndex synthetic_bg, synthetic_eval;
};

LoadedData load_task_data(const ExperimentConfig& cfg) {
  LoadedData data;
  if (cfg.task != TaskKind::Omniglot) return data;
  std::string root = cfg.resolved_data_root();
  if (root == "synthetic") {
    // offline stand-in; results carry no Omniglot semantics
    data.synthetic_bg = synthetic_glyph_index(1000, 30, 14, 20);
    data.synthetic_eval = synthetic_glyph_index(2000, 20, 14, 20);
    data.background = &data.synthetic_bg;
    data.evaluation = &data.synthetic_eval;
    return data;
  }
  if (root.empty())
    throw DataError(
        "omniglot tasks need a data root: set METABIAS_DATA or "
        "io.data_root (or \"synthetic\" for the offline stand-in)");
  std::string cat = cfg.category_map_path.empty()
                        ? std::string(kDefaultOmniglotCategories)
                        : read_file(cfg.category_map_path);
  data.omniglot = load_omniglot(root, cat);
  data.background = &data.omniglot->background;
  data.evaluation = &data.omniglot->evaluation;
  return data;
}

std::vector<Split> splits_for(TaskKind task) {
  if (task == TaskKind::Modular) return {Split::MetaVal, Split::MetaTest};
  return {Split::MetaTest};
}

void echo_config(const ExperimentConfig& cfg) {
  atomic_write(cfg.output_dir + "/config_resolved.json",
               cfg.resolved.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

int run_gen(const ExperimentConfig& cfg, uint64_t seed, int count,
            const std::string& out_path, bool dump_images) {
  LoadedData data = load_task_data(cfg);
  ExperimentPlan plan = cfg.plan_for(cfg.families[0]);
  TaskSource src(plan, data.background, data.evaluation);
  Rng rng(derive_seed(seed, "gen"));
  std::vector<Episode> episodes;
  episodes.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) episodes.push_back(src.train_episode(rng));

  fs::path out = out_path.empty()
                     ? fs::path(cfg.output_dir) /
                           (std::string("episodes_") + to_string(cfg.task) +
                            "_" + to_string(cfg.repr) + ".bin")
                     : fs::path(out_path);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::string tmp = out.string() + ".tmp";
  write_episodes(tmp, episodes);
  fs::rename(tmp, out);
  std::cout << "wrote " << episodes.size() << " episodes to " << out.string()
            << "\n";

  if (dump_images) {
    if (cfg.repr != Representation::Image)
      throw ConfigError("--dump-images requires an image representation");
    std::string dir = cfg.output_dir + "/images";
    for (int i = 0; i < std::min(count, 4); ++i)
      dump_episode_images(episodes[static_cast<size_t>(i)], dir, i);
    std::cout << "dumped input images to " << dir << "\n";
  }
  echo_config(cfg);
  return 0;
}

// ---------------------------------------------------------------------------
// meta-train
// ---------------------------------------------------------------------------

int run_meta_train(const ExperimentConfig& cfg) {
  LoadedData data = load_task_data(cfg);
  echo_config(cfg);
  fs::create_directories(cfg.resolved_checkpoint_dir());
  fs::create_directories(cfg.output_dir + "/logs");

  struct Unit {
    Family family;
    uint64_t seed;
  };
  std::vector<Unit> units;
  for (Family f : cfg.families)
    for (uint64_t s : cfg.seeds) units.push_back({f, s});

  std::mutex io_mutex;
  parallel_units(static_cast<int>(units.size()), cfg.workers, [&](int i) {
    const Unit& u = units[static_cast<size_t>(i)];
    ExperimentPlan plan = cfg.plan_for(u.family);
    TaskSource src(plan, data.background, data.evaluation);

    std::string name = checkpoint_name(plan, u.seed);
    std::string log_path =
        cfg.output_dir + "/logs/train_" + name + ".log";
    std::ofstream log(log_path, std::ios::app);
    ProgressFn progress = [&](int64_t episode, double loss,
                              std::optional<double> val) {
      log << episode << ',' << loss << ',';
      if (val) log << *val;
      log << '\n';
    };

    auto results = run_search(plan, src, u.seed, progress);
    size_t pick = select_variant(plan, results);
    {
      std::lock_guard<std::mutex> lk(io_mutex);
      std::cout << name << ": selected variant "
                << results[pick].state.spec.id() << " (val metric "
                << results[pick].val_metric << ")\n";
    }
    MetaState st = continue_to_convergence(plan, src,
                                           std::move(results[pick].state),
                                           progress);
    atomic_save_checkpoint(
        (fs::path(cfg.resolved_checkpoint_dir()) / name).string(), st);
    {
      std::lock_guard<std::mutex> lk(io_mutex);
      std::cout << name << ": converged at episode " << st.episode
                << " (best val " << st.best_val << " at "
                << st.best_episode << ")"
                << (st.budget_exhausted ? " [budget exhausted]" : "") << "\n";
    }
  });
  return 0;
}

// ---------------------------------------------------------------------------
// eval (M1) and baseline (R-k)
// ---------------------------------------------------------------------------

MetaState load_unit_checkpoint(const ExperimentConfig& cfg,
                               const ExperimentPlan& plan, uint64_t seed) {
  fs::path path =
      fs::path(cfg.resolved_checkpoint_dir()) / checkpoint_name(plan, seed);
  if (!fs::exists(path))
    throw DataError("missing checkpoint " + path.string() +
                    " (run meta-train first)");
  return load_checkpoint(path.string());
}

int run_eval(const ExperimentConfig& cfg) {
  LoadedData data = load_task_data(cfg);
  echo_config(cfg);
  std::vector<ResultRecord> records;
  std::mutex rec_mutex;

  struct Unit {
    Family family;
    uint64_t seed;
  };
  std::vector<Unit> units;
  for (Family f : cfg.families)
    for (uint64_t s : cfg.seeds) units.push_back({f, s});

  std::vector<std::vector<ResultRecord>> per_unit(units.size());
  parallel_units(static_cast<int>(units.size()), cfg.workers, [&](int i) {
    const Unit& u = units[static_cast<size_t>(i)];
    ExperimentPlan plan = cfg.plan_for(u.family);
    TaskSource src(plan, data.background, data.evaluation);
    MetaState st = load_unit_checkpoint(cfg, plan, u.seed);
    for (Split split : splits_for(cfg.task))
      for (int n : plan.support_sizes) {
        auto episodes = make_test_set(plan, src, u.seed, split, n);
        per_unit[static_cast<size_t>(i)].push_back(
            meta_test(plan, st, episodes, split, n));
      }
  });
  for (const auto& batch : per_unit)
    records.insert(records.end(), batch.begin(), batch.end());

  atomic_write(cfg.output_dir + "/records_" + to_string(cfg.task) + "_M1.csv",
               records_to_csv(records));
  std::cout << "wrote " << records.size() << " M1 records\n";
  return 0;
}

int run_baseline(const ExperimentConfig& cfg) {
  LoadedData data = load_task_data(cfg);
  echo_config(cfg);

  std::vector<Condition> rconds;
  for (Condition c : cfg.conditions)
    if (c != Condition::M1) rconds.push_back(c);
  if (rconds.empty())
    throw ConfigError("no R-conditions configured for baseline");

  struct Unit {
    Family family;
    uint64_t seed;
  };
  std::vector<Unit> units;
  for (Family f : cfg.families)
    for (uint64_t s : cfg.seeds) units.push_back({f, s});

  std::vector<std::vector<ResultRecord>> per_unit(units.size());
  parallel_units(static_cast<int>(units.size()), cfg.workers, [&](int i) {
    const Unit& u = units[static_cast<size_t>(i)];
    ExperimentPlan plan = cfg.plan_for(u.family);
    TaskSource src(plan, data.background, data.evaluation);
    // baselines reuse the architecture selected by meta-training
    MetaState st = load_unit_checkpoint(cfg, plan, u.seed);
    for (Split split : splits_for(cfg.task))
      for (int n : plan.support_sizes) {
        auto episodes = make_test_set(plan, src, u.seed, split, n);
        for (Condition c : rconds)
          per_unit[static_cast<size_t>(i)].push_back(baseline_condition(
              plan, st.spec, episodes, c, split, n, u.seed));
      }
  });

  std::map<std::string, std::vector<ResultRecord>> by_condition;
  for (const auto& batch : per_unit)
    for (const ResultRecord& r : batch) by_condition[r.condition].push_back(r);
  for (const auto& [cond, records] : by_condition)
    atomic_write(cfg.output_dir + "/records_" + to_string(cfg.task) + "_" +
                     cond + ".csv",
                 records_to_csv(records));
  std::cout << "wrote baseline records for " << by_condition.size()
            << " conditions\n";
  return 0;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

int run_report(const ExperimentConfig& cfg) {
  std::vector<ResultRecord> records;
  for (const auto& entry : fs::directory_iterator(cfg.output_dir)) {
    std::string name = entry.path().filename().string();
    if (name.rfind("records_", 0) == 0 && entry.path().extension() == ".csv") {
      auto batch = records_from_csv(read_file(entry.path().string()));
      records.insert(records.end(), batch.begin(), batch.end());
    }
  }
  if (records.empty())
    throw DataError("no records_*.csv files in " + cfg.output_dir);

  std::map<std::string, std::vector<ResultRecord>> by_task;
  for (const ResultRecord& r : records) by_task[r.task].push_back(r);
  for (const auto& [task, recs] : by_task) {
    TableLayout layout = task == "concept"   ? TableLayout::Concept
                         : task == "modular" ? TableLayout::Modular
                                             : TableLayout::Omniglot;
    atomic_write(cfg.output_dir + "/table_" + task + ".md",
                 emit_table(recs, layout));
    atomic_write(cfg.output_dir + "/table_" + task + ".csv",
                 emit_aggregate_csv(recs, layout));
    std::cout << "wrote table_" << task << ".{md,csv} from " << recs.size()
              << " records\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// curves
// ---------------------------------------------------------------------------

int run_curves(const ExperimentConfig& cfg, int per_split) {
  if (cfg.task != TaskKind::Modular)
    throw ConfigError("curves requires a modular-arithmetic task config");
  LoadedData data = load_task_data(cfg);
  echo_config(cfg);
  int support = cfg.support_sizes.empty() ? 20 : cfg.support_sizes[0];

  for (Family f : cfg.families) {
    ExperimentPlan plan = cfg.plan_for(f);
    TaskSource src(plan, data.background, data.evaluation);
    for (uint64_t seed : cfg.seeds) {
      MetaState st = load_unit_checkpoint(cfg, plan, seed);
      for (Split split : {Split::MetaVal, Split::MetaTest}) {
        Rng rng(derive_seed(seed, "curves", static_cast<uint64_t>(split)));
        for (int i = 0; i < per_split; ++i) {
          Episode e = src.test_episode(split, support, rng);
          auto points = curve_dump(plan, st, e);
          std::string name = cfg.output_dir + "/curves_" +
                             to_string(plan.family) + "_" +
                             to_string(plan.repr) + "_seed" +
                             std::to_string(seed) + "_" + to_string(split) +
                             "_m" + std::to_string(e.modulus) + "_" +
                             std::to_string(i) + ".csv";
          atomic_write(name, curve_to_csv(points));
        }
      }
    }
  }
  std::cout << "wrote curve dumps to " << cfg.output_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"meta-learning laboratory: meta-trained vs randomly "
               "initialized architectures on concept, modular-arithmetic "
               "and character tasks"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("-c,--config", config_path, "JSON experiment config");
  app.add_option("--set", overrides,
                 "override config values, e.g. --set training.outer_lr=0.01");

  auto* gen = app.add_subcommand("gen", "generate and serialize episodes");
  uint64_t gen_seed = 0;
  int gen_count = 100;
  std::string gen_out;
  bool gen_dump = false;
  gen->add_option("--seed", gen_seed, "episode stream seed");
  gen->add_option("--count", gen_count, "number of episodes");
  gen->add_option("--out", gen_out, "output file (episode records)");
  gen->add_flag("--dump-images", gen_dump, "also dump input PNGs");

  auto* train = app.add_subcommand(
      "meta-train", "search the variant grid, then train to convergence");
  auto* baseline = app.add_subcommand(
      "baseline", "R-k conditions from random initializations");
  auto* eval = app.add_subcommand("eval", "M1 meta-testing from checkpoints");
  auto* report = app.add_subcommand("report", "emit result tables");
  auto* curves = app.add_subcommand("curves", "pre/post adaptation fits");
  int curves_count = 4;
  curves->add_option("--count", curves_count, "episodes per split");
  auto* check =
      app.add_subcommand("check", "gradient and task-oracle self test");

  CLI11_PARSE(app, argc, argv);

  try {
    if (check->parsed()) return run_self_checks(std::cout) ? 0 : 2;

    ExperimentConfig cfg = load_config(config_path, overrides);
    if (gen->parsed())
      return run_gen(cfg, gen_seed, gen_count, gen_out, gen_dump);
    if (train->parsed()) return run_meta_train(cfg);
    if (baseline->parsed()) return run_baseline(cfg);
    if (eval->parsed()) return run_eval(cfg);
    if (report->parsed()) return run_report(cfg);
    if (curves->parsed()) return run_curves(cfg, curves_count);
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "missing data: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
