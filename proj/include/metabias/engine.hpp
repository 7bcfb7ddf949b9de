#pragma once

// Meta-training orchestration: episode batches with one Meta-SGD adaptation
// step, architecture search over a variant grid, meta-validation driven
// convergence, meta-testing (M1) and random-initialization baselines (R-k),
// plus versioned binary checkpoints that restore bit-identical state.

#include <functional>
#include <optional>
#include <sstream>

#include "metabias/data_io.hpp"
#include "metabias/gradcheck.hpp"
#include "metabias/nn.hpp"
#include "metabias/optim.hpp"
#include "metabias/report.hpp"
#include "metabias/tasks.hpp"

namespace metabias {

enum class Condition { M1, R1, R10, R50, R100, R200 };

inline const char* to_string(Condition c) {
  switch (c) {
    case Condition::M1: return "M1";
    case Condition::R1: return "R1";
    case Condition::R10: return "R10";
    case Condition::R50: return "R50";
    case Condition::R100: return "R100";
    case Condition::R200: return "R200";
  }
  return "?";
}

inline int baseline_steps(Condition c) {
  switch (c) {
    case Condition::M1: return 0;
    case Condition::R1: return 1;
    case Condition::R10: return 10;
    case Condition::R50: return 50;
    case Condition::R100: return 100;
    case Condition::R200: return 200;
  }
  return 0;
}

enum class Split { MetaVal, MetaTest };

inline const char* to_string(Split s) {
  return s == Split::MetaVal ? "meta_val" : "meta_test";
}

// ---------------------------------------------------------------------------
// Plans.
// ---------------------------------------------------------------------------

struct TrainBudget {
  int64_t search_episodes = 10000;   // per variant, before selection
  int64_t patience = 2000;           // episodes without val improvement
  int64_t max_episodes = 50000;      // post-selection cap
  int64_t val_every = 500;
  int val_tasks = 100;
  double improve_tol = 1e-4;
};

struct ExperimentPlan {
  TaskKind task = TaskKind::Concept;
  ModuliScheme scheme = ModuliScheme::OddEven;   // modular only
  OmniglotSubset subset = OmniglotSubset::All;   // omniglot only
  Representation repr = Representation::Bits;
  Family family = Family::MLP;
  std::vector<std::pair<int, int>> variants;     // (num_layers, hidden_width)

  int batch_tasks = 4;
  int adapt_steps = 1;
  AdamWConfig outer;
  double alpha_init_lo = 0.005;
  double alpha_init_hi = 0.1;
  bool first_order = false;
  TrainBudget budget;

  std::vector<Condition> conditions{Condition::M1, Condition::R1};
  int eval_tasks = 100;
  std::vector<int> support_sizes{5, 10, 15};
  std::vector<uint64_t> seeds{0, 1, 2};

  // meta-training support-size ranges (inclusive)
  int train_support_lo = 2;
  int train_support_hi = 15;

  // omniglot protocol
  int n_way = 20;
  int k_shot = 5;
  int n_query = 5;

  bool higher_is_better() const { return task != TaskKind::Modular; }
  const char* metric_name() const {
    return task == TaskKind::Modular ? "mse" : "accuracy";
  }

  ArchSpec arch_spec(int num_layers, int hidden_width) const {
    int channels = task == TaskKind::Concept ? 3 : 1;
    int bits = task == TaskKind::Concept ? 4 : 8;
    int out = task == TaskKind::Concept ? 2
              : task == TaskKind::Modular ? 1
                                          : n_way;
    return make_arch_spec(family, num_layers, hidden_width, repr, channels,
                          bits, out);
  }
};

// ---------------------------------------------------------------------------
// Task sources bind a plan to concrete episode generators.
// ---------------------------------------------------------------------------

class TaskSource {
 public:
  TaskSource(const ExperimentPlan& plan, const OmniglotIndex* background,
             const OmniglotIndex* evaluation)
      : plan_(plan), background_(background), evaluation_(evaluation) {
    if (plan.task == TaskKind::Modular) {
      auto [train, test] = moduli_split(plan.scheme);
      train_moduli_ = std::move(train);
      test_moduli_ = std::move(test);
    }
    if (plan.task == TaskKind::Omniglot) {
      if (!background_)
        throw DataError("omniglot task requires a character index");
      train_pool_ = background_->pool(plan.subset);
      if (evaluation_ && !evaluation_->characters.empty())
        for (size_t i = 0; i < evaluation_->characters.size(); ++i)
          test_pool_.push_back(static_cast<int>(i));
    }
  }

  // Meta-training episode with variable support size.
  Episode train_episode(Rng& rng) const {
    switch (plan_.task) {
      case TaskKind::Concept: {
        ConceptFormula f = sample_concept(rng);
        int n = static_cast<int>(uniform_int(rng, plan_.train_support_lo,
                                             plan_.train_support_hi));
        return concept_episode(f, n, rng, plan_.repr);
      }
      case TaskKind::Modular: {
        int m = train_moduli_[static_cast<size_t>(uniform_int(
            rng, 0, static_cast<int64_t>(train_moduli_.size()) - 1))];
        int n = static_cast<int>(uniform_int(rng, plan_.train_support_lo,
                                             plan_.train_support_hi));
        return mod_episode(m, n, rng, plan_.repr);
      }
      case TaskKind::Omniglot:
        return omniglot_episode(*background_, train_pool_, rng, plan_.n_way,
                                plan_.k_shot, plan_.n_query);
    }
    throw SpecError("train_episode: unhandled task");
  }

  // Validation episodes come from the training distribution.
  Episode val_episode(Rng& rng) const { return train_episode(rng); }

  // Test episode at a fixed support size. MetaVal draws from the training
  // task distribution with fresh noise; MetaTest from the held-out split.
  Episode test_episode(Split split, int n_support, Rng& rng) const {
    switch (plan_.task) {
      case TaskKind::Concept: {
        ConceptFormula f = sample_concept(rng);
        return concept_episode(f, n_support, rng, plan_.repr);
      }
      case TaskKind::Modular: {
        const auto& moduli =
            split == Split::MetaVal ? train_moduli_ : test_moduli_;
        int m = moduli[static_cast<size_t>(uniform_int(
            rng, 0, static_cast<int64_t>(moduli.size()) - 1))];
        return mod_episode(m, n_support, rng, plan_.repr);
      }
      case TaskKind::Omniglot: {
        if (split == Split::MetaVal)
          return omniglot_episode(*background_, train_pool_, rng, plan_.n_way,
                                  plan_.k_shot, plan_.n_query);
        if (test_pool_.empty())
          throw DataError("no held-out alphabets available for meta-testing");
        return omniglot_episode(*evaluation_, test_pool_, rng, plan_.n_way,
                                plan_.k_shot, plan_.n_query);
      }
    }
    throw SpecError("test_episode: unhandled task");
  }

  const ExperimentPlan& plan() const { return plan_; }

 private:
  ExperimentPlan plan_;
  std::vector<int> train_moduli_, test_moduli_;
  const OmniglotIndex* background_ = nullptr;
  const OmniglotIndex* evaluation_ = nullptr;
  std::vector<int> train_pool_, test_pool_;
};

// ---------------------------------------------------------------------------
// Episode-level forward/loss plumbing.
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor episode_loss(const ArchSpec& spec, const ParamSet& params,
                           const Episode& e, const Tensor& x,
                           const std::vector<double>& targets) {
  Tensor out = forward(spec, params, x);
  if (e.label_kind == LabelKind::ClassIndex) {
    std::vector<int> labels(targets.size());
    for (size_t i = 0; i < targets.size(); ++i)
      labels[i] = static_cast<int>(targets[i]);
    return cross_entropy_loss(out, labels);
  }
  Tensor t(Shape{static_cast<int64_t>(targets.size()), 1},
           std::vector<double>(targets.begin(), targets.end()));
  return mse_loss(out, t);
}

inline Tensor support_loss(const ArchSpec& spec, const ParamSet& params,
                           const Episode& e, const Tensor& sx) {
  return episode_loss(spec, params, e, sx, e.support_y);
}

// Query metric after adaptation: accuracy for classification, query-set
// MSE for regression.
inline double query_metric(const ArchSpec& spec, const ParamSet& params,
                           const Episode& e, const Tensor& qx) {
  Tensor out = forward(spec, params, qx);
  if (e.label_kind == LabelKind::ClassIndex)
    return accuracy(argmax_rows(out), e.query_labels());
  std::vector<double> preds(out.data().begin(), out.data().end());
  return mse(preds, e.query_y);
}

}  // namespace detail

// Adapts theta on the episode's support set with the learned per-parameter
// rates (no meta-graph) and returns the query metric.
inline double adapt_and_score(const ArchSpec& spec, const ParamSet& theta,
                              const ParamSet& alpha, const Episode& e,
                              int adapt_steps = 1) {
  Tape tape;
  Tape::Scope scope(tape);
  ParamSet cur = theta.watched(tape);
  Tensor sx = adapt(e.support_x, e.repr, spec.family);
  Tensor qx = adapt(e.query_x, e.repr, spec.family);
  for (int s = 0; s < adapt_steps; ++s)
    cur = inner_adapt(
        cur, alpha,
        [&](const ParamSet& p) { return detail::support_loss(spec, p, e, sx); },
        /*create_graph=*/false);
  double metric = detail::query_metric(spec, cur, e, qx);
  if (!std::isfinite(metric))
    throw NumericError("non-finite query metric on episode: " + e.describe());
  return metric;
}

// ---------------------------------------------------------------------------
// MetaState and checkpointing.
// ---------------------------------------------------------------------------

struct MetaState {
  ArchSpec spec;
  ParamSet theta;
  ParamSet alpha;
  AdamWState outer;
  int64_t episode = 0;
  uint64_t seed = 0;
  Rng rng;  // training episode stream

  double best_val = 0.0;
  bool has_best = false;
  int64_t best_episode = 0;
  std::vector<double> best_theta, best_alpha;
  bool budget_exhausted = false;

  void snapshot_best(double val) {
    best_val = val;
    has_best = true;
    best_episode = episode;
    best_theta = theta.flatten_values();
    best_alpha = alpha.flatten_values();
  }

  void restore_best() {
    if (!has_best) return;
    theta = theta.unflatten(best_theta);
    alpha = alpha.unflatten(best_alpha);
  }
};

inline MetaState init_state(const ExperimentPlan& plan, int num_layers,
                            int hidden_width, uint64_t seed) {
  MetaState st;
  st.spec = plan.arch_spec(num_layers, hidden_width);
  st.theta = build(st.spec, derive_seed(seed, "theta"));
  st.alpha = make_alpha(st.theta, derive_seed(seed, "alpha"),
                        plan.alpha_init_lo, plan.alpha_init_hi);
  st.outer = AdamWState(
      plan.outer,
      static_cast<size_t>(st.theta.total_params() + st.alpha.total_params()));
  st.seed = seed;
  st.rng.seed(derive_seed(seed, "train_stream",
                          static_cast<uint64_t>(num_layers),
                          static_cast<uint64_t>(hidden_width)));
  return st;
}

// Meta-gradients of the query loss after one (or more) inner steps, as one
// flat vector over theta then alpha. Also reports the query loss value.
inline std::vector<double> episode_meta_grads(const ExperimentPlan& plan,
                                              const MetaState& st,
                                              const Episode& e,
                                              double* query_loss_out) {
  Tape tape;
  Tape::Scope scope(tape);
  ParamSet th = st.theta.watched(tape);
  ParamSet al = st.alpha.watched(tape);
  Tensor sx = adapt(e.support_x, e.repr, st.spec.family);
  Tensor qx = adapt(e.query_x, e.repr, st.spec.family);

  ParamSet adapted = th;
  for (int s = 0; s < plan.adapt_steps; ++s)
    adapted = inner_adapt(
        adapted, al,
        [&](const ParamSet& p) {
          return detail::support_loss(st.spec, p, e, sx);
        },
        /*create_graph=*/!plan.first_order);

  Tensor qloss = detail::episode_loss(st.spec, adapted, e, qx, e.query_y);
  if (!qloss.all_finite())
    throw NumericError("non-finite query loss on episode: " + e.describe());
  if (query_loss_out) *query_loss_out = qloss.scalar_value();

  std::vector<Tensor> wrt;
  for (const auto& [name, t] : th.items()) wrt.push_back(t);
  for (const auto& [name, t] : al.items()) wrt.push_back(t);
  auto grads = grad(qloss, wrt);
  std::vector<double> flat;
  flat.reserve(static_cast<size_t>(st.theta.total_params() +
                                   st.alpha.total_params()));
  for (const Tensor& g : grads)
    flat.insert(flat.end(), g.data().begin(), g.data().end());
  return flat;
}

// One outer update on a batch of episodes: per-episode meta-gradients are
// averaged in task order, then applied with AdamW to (theta, alpha).
inline double outer_step(const ExperimentPlan& plan, MetaState& st,
                         std::span<const Episode> batch) {
  std::vector<double> acc;
  double mean_loss = 0.0;
  for (const Episode& e : batch) {
    double qloss = 0.0;
    std::vector<double> g = episode_meta_grads(plan, st, e, &qloss);
    if (acc.empty()) acc.assign(g.size(), 0.0);
    for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
    mean_loss += qloss;
  }
  double inv = 1.0 / static_cast<double>(batch.size());
  for (double& v : acc) v *= inv;
  mean_loss *= inv;

  std::vector<double> flat = st.theta.flatten_values();
  std::vector<double> aflat = st.alpha.flatten_values();
  flat.insert(flat.end(), aflat.begin(), aflat.end());
  st.outer.step(flat, acc);
  size_t nt = static_cast<size_t>(st.theta.total_params());
  st.theta = st.theta.unflatten(
      std::span<const double>(flat.data(), nt));
  st.alpha = st.alpha.unflatten(
      std::span<const double>(flat.data() + nt, aflat.size()));
  return mean_loss;
}

// Progress log: append-only "episode,train_loss,val_metric" lines;
// val_metric is empty except on validation episodes.
using ProgressFn = std::function<void(int64_t episode, double train_loss,
                                      std::optional<double> val_metric)>;

// Runs `episodes` outer updates (batches of plan.batch_tasks tasks).
inline void train_episodes(const ExperimentPlan& plan, const TaskSource& src,
                           MetaState& st, int64_t episodes,
                           const ProgressFn& progress = nullptr) {
  for (int64_t i = 0; i < episodes; ++i) {
    std::vector<Episode> batch;
    batch.reserve(static_cast<size_t>(plan.batch_tasks));
    for (int b = 0; b < plan.batch_tasks; ++b)
      batch.push_back(src.train_episode(st.rng));
    double loss;
    try {
      loss = outer_step(plan, st, batch);
    } catch (const NumericError& err) {
      throw NumericError("episode " + std::to_string(st.episode + 1) + ": " +
                         err.what());
    }
    st.episode += 1;
    if (progress) progress(st.episode, loss, std::nullopt);
  }
}

// Fixed validation set for one seed ("unseen training tasks").
inline std::vector<Episode> make_val_set(const ExperimentPlan& plan,
                                         const TaskSource& src,
                                         uint64_t seed) {
  Rng rng(derive_seed(seed, "val_set"));
  std::vector<Episode> out;
  out.reserve(static_cast<size_t>(plan.budget.val_tasks));
  for (int i = 0; i < plan.budget.val_tasks; ++i)
    out.push_back(src.val_episode(rng));
  return out;
}

inline double meta_validate(const ExperimentPlan& plan, const MetaState& st,
                            std::span<const Episode> val_set) {
  double sum = 0.0;
  for (const Episode& e : val_set)
    sum += adapt_and_score(st.spec, st.theta, st.alpha, e, plan.adapt_steps);
  return sum / static_cast<double>(val_set.size());
}

// ---------------------------------------------------------------------------
// Search, selection, convergence.
// ---------------------------------------------------------------------------

struct VariantResult {
  MetaState state;
  double val_metric = 0.0;
  int64_t param_count = 0;
};

// Meta-trains every variant for the search budget and scores it on the
// seed's validation set.
inline std::vector<VariantResult> run_search(const ExperimentPlan& plan,
                                             const TaskSource& src,
                                             uint64_t seed,
                                             const ProgressFn& progress =
                                                 nullptr) {
  if (plan.variants.empty()) throw ConfigError("empty variant grid");
  std::vector<VariantResult> results;
  std::vector<Episode> val_set = make_val_set(plan, src, seed);
  for (const auto& [layers, width] : plan.variants) {
    VariantResult r;
    r.state = init_state(plan, layers, width, seed);
    r.param_count = r.state.theta.total_params();
    train_episodes(plan, src, r.state, plan.budget.search_episodes, progress);
    r.val_metric = meta_validate(plan, r.state, val_set);
    results.push_back(std::move(r));
  }
  return results;
}

// Best validation metric wins; ties break toward fewer parameters, then
// the lower variant index.
inline size_t select_variant(const ExperimentPlan& plan,
                             std::span<const VariantResult> results) {
  if (results.empty()) throw ConfigError("select_variant: empty grid");
  size_t best = 0;
  for (size_t i = 1; i < results.size(); ++i) {
    double a = results[i].val_metric, b = results[best].val_metric;
    bool better = plan.higher_is_better() ? a > b : a < b;
    bool equal = a == b;
    if (better || (equal && results[i].param_count <
                                results[best].param_count))
      best = i;
  }
  return best;
}

// Continues training the selected variant until validation stops improving
// (patience window) or the cap is hit; returns the best-validation
// checkpoint.
inline MetaState continue_to_convergence(const ExperimentPlan& plan,
                                         const TaskSource& src, MetaState st,
                                         const ProgressFn& progress =
                                             nullptr) {
  std::vector<Episode> val_set = make_val_set(plan, src, st.seed);
  double val0 = meta_validate(plan, st, val_set);
  st.snapshot_best(val0);
  if (progress) progress(st.episode, 0.0, val0);

  int64_t start = st.episode;
  while (st.episode - start < plan.budget.max_episodes) {
    int64_t chunk = std::min<int64_t>(
        plan.budget.val_every,
        plan.budget.max_episodes - (st.episode - start));
    train_episodes(plan, src, st, chunk, progress);
    double val = meta_validate(plan, st, val_set);
    if (progress) progress(st.episode, 0.0, val);
    double improvement = plan.higher_is_better() ? val - st.best_val
                                                 : st.best_val - val;
    if (!st.has_best || improvement > plan.budget.improve_tol)
      st.snapshot_best(val);
    else if (st.episode - st.best_episode >= plan.budget.patience)
      break;  // validation plateaued for a full patience window
  }
  if (st.episode - start >= plan.budget.max_episodes)
    st.budget_exhausted = true;
  st.restore_best();
  return st;
}

// ---------------------------------------------------------------------------
// Meta-testing and baselines.
// ---------------------------------------------------------------------------

// Deterministic test episodes for (seed, split, n_support); shared between
// M1 and the R-k baselines so conditions see identical tasks.
inline std::vector<Episode> make_test_set(const ExperimentPlan& plan,
                                          const TaskSource& src,
                                          uint64_t seed, Split split,
                                          int n_support) {
  Rng rng(derive_seed(seed, "test_set", static_cast<uint64_t>(split),
                      static_cast<uint64_t>(n_support)));
  std::vector<Episode> out;
  out.reserve(static_cast<size_t>(plan.eval_tasks));
  for (int i = 0; i < plan.eval_tasks; ++i)
    out.push_back(src.test_episode(split, n_support, rng));
  return out;
}

namespace detail {

inline ResultRecord base_record(const ExperimentPlan& plan, Split split,
                                int n_support, uint64_t seed) {
  ResultRecord r;
  r.task = to_string(plan.task);
  r.arch = to_string(plan.family);
  r.repr = to_string(plan.repr);
  r.split = to_string(split);
  r.subset = plan.task == TaskKind::Omniglot ? to_string(plan.subset) : "";
  r.n_support = n_support;
  r.seed = seed;
  r.metric = plan.metric_name();
  return r;
}

inline void fold_metrics(ResultRecord& r, std::span<const double> metrics,
                         int n_failed) {
  r.n_tasks = static_cast<int>(metrics.size()) + n_failed;
  r.n_failed = n_failed;
  if (metrics.empty()) {
    r.value = std::nullopt;
    return;
  }
  std::vector<double> sorted(metrics.begin(), metrics.end());
  std::sort(sorted.begin(), sorted.end());
  double sum = 0;
  for (double m : sorted) sum += m;
  r.value = sum / static_cast<double>(sorted.size());
}

}  // namespace detail

// One adaptation step with the learned rates on every episode; failures
// become explicit nulls in the seed-level record.
inline ResultRecord meta_test(const ExperimentPlan& plan, const MetaState& st,
                              std::span<const Episode> episodes, Split split,
                              int n_support) {
  std::vector<double> metrics;
  int failed = 0;
  for (const Episode& e : episodes) {
    try {
      metrics.push_back(
          adapt_and_score(st.spec, st.theta, st.alpha, e, plan.adapt_steps));
    } catch (const NumericError&) {
      ++failed;
    }
  }
  ResultRecord r = detail::base_record(plan, split, n_support, st.seed);
  r.condition = "M1";
  detail::fold_metrics(r, metrics, failed);
  return r;
}

// Fresh random initialization fitted with `steps` AdamW updates on the
// support set; returns the query metric.
inline double baseline_run(const ArchSpec& spec, const Episode& e, int steps,
                           uint64_t init_seed, const AdamWConfig& adamw) {
  if (steps != 1 && steps != 10 && steps != 50 && steps != 100 &&
      steps != 200)
    throw ConfigError("baseline steps must be one of {1,10,50,100,200}, got " +
                      std::to_string(steps));
  ParamSet params = build(spec, init_seed);
  AdamWState opt(adamw, static_cast<size_t>(params.total_params()));
  Tensor sx, qx;
  {
    Tape tape;
    Tape::Scope scope(tape);
    sx = adapt(e.support_x, e.repr, spec.family);
    qx = adapt(e.query_x, e.repr, spec.family);
  }
  for (int s = 0; s < steps; ++s) {
    Tape tape;
    Tape::Scope scope(tape);
    ParamSet wp = params.watched(tape);
    Tensor loss = detail::support_loss(spec, wp, e, sx);
    if (!loss.all_finite())
      throw NumericError("baseline: non-finite support loss on " +
                         e.describe());
    std::vector<Tensor> wrt;
    for (const auto& [name, t] : wp.items()) wrt.push_back(t);
    auto grads = grad(loss, wrt);
    params = adamw_step(opt, params, grads);
  }
  Tape tape;
  Tape::Scope scope(tape);
  return detail::query_metric(spec, params, e, qx);
}

// R-k condition over a test set: per-episode fresh init, per-episode
// failures recorded as nulls.
inline ResultRecord baseline_condition(const ExperimentPlan& plan,
                                       const ArchSpec& spec,
                                       std::span<const Episode> episodes,
                                       Condition condition, Split split,
                                       int n_support, uint64_t seed) {
  int steps = baseline_steps(condition);
  std::vector<double> metrics;
  int failed = 0;
  for (size_t i = 0; i < episodes.size(); ++i) {
    uint64_t init_seed = derive_seed(seed, "baseline_init",
                                     static_cast<uint64_t>(steps), i);
    try {
      metrics.push_back(
          baseline_run(spec, episodes[i], steps, init_seed, plan.outer));
    } catch (const NumericError&) {
      ++failed;
    }
  }
  ResultRecord r = detail::base_record(plan, split, n_support, seed);
  r.condition = to_string(condition);
  detail::fold_metrics(r, metrics, failed);
  return r;
}

// ---------------------------------------------------------------------------
// Curve dumps (modular tasks): model fit before and after one adaptation
// step against the noiseless ground truth.
// ---------------------------------------------------------------------------

inline std::vector<CurvePoint> curve_dump(const ExperimentPlan&,
                                          const MetaState& st,
                                          const Episode& e) {
  if (e.task != TaskKind::Modular)
    throw ConfigError("curve_dump: requires a modular-arithmetic episode");
  Tape tape;
  Tape::Scope scope(tape);
  ParamSet th = st.theta.watched(tape);
  Tensor sx = adapt(e.support_x, e.repr, st.spec.family);
  Tensor qx = adapt(e.query_x, e.repr, st.spec.family);
  Tensor pred0 = forward(st.spec, th, qx);
  ParamSet adapted = inner_adapt(
      th, st.alpha,
      [&](const ParamSet& p) { return detail::support_loss(st.spec, p, e, sx); },
      /*create_graph=*/false);
  Tensor pred1 = forward(st.spec, adapted, qx);

  // recover the support x values from the episode encoding
  std::vector<int> support_xs;
  for (int64_t i = 0; i < e.support_x.dim(0); ++i) {
    if (e.repr == Representation::Bits) {
      int v = 0;
      for (int b = 0; b < 8; ++b)
        v = v * 2 + static_cast<int>(e.support_x.value(i * 8 + b));
      support_xs.push_back(v);
    } else {
      support_xs.push_back(-1);  // resolved below by image match
    }
  }
  if (e.repr == Representation::Image) {
    for (int64_t i = 0; i < e.support_x.dim(0); ++i)
      for (int x = 0; x < kModDomain; ++x) {
        bool same = true;
        int64_t plane = e.support_x.numel() / e.support_x.dim(0);
        for (int64_t j = 0; j < plane && same; ++j)
          same = e.support_x.value(i * plane + j) ==
                 e.query_x.value(x * plane + j);
        if (same) {
          support_xs[static_cast<size_t>(i)] = x;
          break;
        }
      }
  }

  std::vector<CurvePoint> points;
  for (int x = 0; x < kModDomain; ++x) {
    CurvePoint p;
    p.x = x;
    p.y_true = static_cast<double>(x % e.modulus);
    p.pred_step0 = pred0.value(x);
    p.pred_step1 = pred1.value(x);
    for (size_t i = 0; i < support_xs.size(); ++i)
      if (support_xs[i] == x) {
        p.is_support = true;
        p.support_y = e.support_y[i];
      }
    points.push_back(p);
  }
  return points;
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned binary, bit-identical round trip.
// ---------------------------------------------------------------------------

inline constexpr uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const MetaState& st) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path);
  os.write("MBCK", 4);
  detail::put_raw<uint32_t>(os, kCheckpointVersion);
  const ArchSpec& s = st.spec;
  detail::put_raw<uint8_t>(os, static_cast<uint8_t>(s.family));
  detail::put_raw<int32_t>(os, s.num_layers);
  detail::put_raw<int32_t>(os, s.hidden_width);
  detail::put_raw<uint8_t>(os, static_cast<uint8_t>(s.input_kind));
  detail::put_raw<int32_t>(os, s.flat_dim);
  detail::put_raw<int32_t>(os, s.channels);
  detail::put_raw<int32_t>(os, s.token_dim);
  detail::put_raw<int32_t>(os, s.seq_len);
  detail::put_raw<int32_t>(os, s.output_dim);
  detail::put_raw<uint8_t>(os, s.positional_encoding ? 1 : 0);
  detail::put_raw<uint8_t>(os, static_cast<uint8_t>(s.readout));

  auto put_params = [&](const ParamSet& p) {
    detail::put_raw<uint32_t>(os, static_cast<uint32_t>(p.size()));
    for (const auto& [name, t] : p.items()) {
      detail::put_string(os, name);
      detail::put_tensor(os, t);
    }
  };
  put_params(st.theta);
  put_params(st.alpha);

  detail::put_raw<int64_t>(os, st.outer.steps());
  detail::put_values(os, std::vector<double>(st.outer.m().begin(),
                                             st.outer.m().end()));
  detail::put_values(os, std::vector<double>(st.outer.v().begin(),
                                             st.outer.v().end()));
  detail::put_raw<double>(os, st.outer.config().lr);
  detail::put_raw<double>(os, st.outer.config().weight_decay);
  detail::put_raw<double>(os, st.outer.config().beta1);
  detail::put_raw<double>(os, st.outer.config().beta2);
  detail::put_raw<double>(os, st.outer.config().eps);

  detail::put_raw<int64_t>(os, st.episode);
  detail::put_raw<uint64_t>(os, st.seed);
  detail::put_raw<uint8_t>(os, st.has_best ? 1 : 0);
  detail::put_raw<double>(os, st.best_val);
  detail::put_raw<int64_t>(os, st.best_episode);
  detail::put_values(os, st.best_theta);
  detail::put_values(os, st.best_alpha);
  detail::put_raw<uint8_t>(os, st.budget_exhausted ? 1 : 0);

  std::ostringstream rs;
  rs << st.rng;
  detail::put_string(os, rs.str());
}

inline MetaState load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "MBCK")
    throw DataError(path + " is not a checkpoint");
  uint32_t version = detail::get_raw<uint32_t>(is);
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " +
                    std::to_string(version));
  MetaState st;
  ArchSpec& s = st.spec;
  s.family = static_cast<Family>(detail::get_raw<uint8_t>(is));
  s.num_layers = detail::get_raw<int32_t>(is);
  s.hidden_width = detail::get_raw<int32_t>(is);
  s.input_kind = static_cast<InputKind>(detail::get_raw<uint8_t>(is));
  s.flat_dim = detail::get_raw<int32_t>(is);
  s.channels = detail::get_raw<int32_t>(is);
  s.token_dim = detail::get_raw<int32_t>(is);
  s.seq_len = detail::get_raw<int32_t>(is);
  s.output_dim = detail::get_raw<int32_t>(is);
  s.positional_encoding = detail::get_raw<uint8_t>(is) != 0;
  s.readout = static_cast<TransformerReadout>(detail::get_raw<uint8_t>(is));

  auto get_params = [&]() {
    ParamSet p;
    uint32_t n = detail::get_raw<uint32_t>(is);
    for (uint32_t i = 0; i < n; ++i) {
      std::string name = detail::get_string(is);
      p.add(name, detail::get_tensor(is));
    }
    return p;
  };
  st.theta = get_params();
  st.alpha = get_params();

  int64_t t = detail::get_raw<int64_t>(is);
  std::vector<double> m = detail::get_values(is);
  std::vector<double> v = detail::get_values(is);
  AdamWConfig cfg;
  cfg.lr = detail::get_raw<double>(is);
  cfg.weight_decay = detail::get_raw<double>(is);
  cfg.beta1 = detail::get_raw<double>(is);
  cfg.beta2 = detail::get_raw<double>(is);
  cfg.eps = detail::get_raw<double>(is);
  st.outer = AdamWState(cfg, m.size());
  st.outer.restore(t, std::move(m), std::move(v));

  st.episode = detail::get_raw<int64_t>(is);
  st.seed = detail::get_raw<uint64_t>(is);
  st.has_best = detail::get_raw<uint8_t>(is) != 0;
  st.best_val = detail::get_raw<double>(is);
  st.best_episode = detail::get_raw<int64_t>(is);
  st.best_theta = detail::get_values(is);
  st.best_alpha = detail::get_values(is);
  st.budget_exhausted = detail::get_raw<uint8_t>(is) != 0;

  std::istringstream rs(detail::get_string(is));
  rs >> st.rng;
  return st;
}

// ---------------------------------------------------------------------------
// Meta-gradient self check: engine-path gradients for theta and alpha vs
// central finite differences on a 2-layer width-4 MLP.
// ---------------------------------------------------------------------------

inline CheckResult check_meta_gradient_mlp2x4(uint64_t seed = 123) {
  ArchSpec spec;  // intentionally below the search grid: a tiny probe model
  spec.family = Family::MLP;
  spec.num_layers = 2;
  spec.hidden_width = 4;
  spec.input_kind = InputKind::FlatVector;
  spec.flat_dim = 4;
  spec.output_dim = 2;

  Rng rng(derive_seed(seed, "meta_check"));
  ParamSet theta;
  theta.add("layer0.weight", random_tensor(rng, {4, 4}, -0.5, 0.5));
  theta.add("layer0.bias", random_tensor(rng, {4}, -0.1, 0.1));
  theta.add("layer0.bn.gamma", random_tensor(rng, {4}, 0.9, 1.1));
  theta.add("layer0.bn.beta", random_tensor(rng, {4}, -0.1, 0.1));
  theta.add("head.weight", random_tensor(rng, {4, 2}, -0.5, 0.5));
  theta.add("head.bias", random_tensor(rng, {2}, -0.1, 0.1));
  ParamSet alpha = make_alpha(theta, derive_seed(seed, "meta_check_alpha"));

  Tensor sx = random_tensor(rng, {6, 4}, 0, 1);
  Tensor qx = random_tensor(rng, {6, 4}, 0, 1);
  std::vector<int> sy{0, 1, 1, 0, 1, 0}, qy{1, 0, 1, 0, 0, 1};

  std::vector<Tensor> inputs;
  for (const auto& [name, t] : theta.items()) inputs.push_back(t);
  for (const auto& [name, t] : alpha.items()) inputs.push_back(t);
  size_t nt = theta.size();

  auto fn = [&, nt](const std::vector<Tensor>& in) -> Tensor {
    std::optional<Tape> own;
    std::optional<Tape::Scope> scope;
    std::vector<Tensor> vars = in;
    if (Tape::active() == nullptr) {
      own.emplace();
      scope.emplace(*own);
      for (Tensor& v : vars) v = Tape::active()->watch(v);
    }
    ParamSet th, al;
    for (size_t i = 0; i < nt; ++i) th.add(theta.items()[i].first, vars[i]);
    for (size_t i = 0; i < nt; ++i)
      al.add(alpha.items()[i].first, vars[nt + i]);
    ParamSet adapted = inner_adapt(
        th, al,
        [&](const ParamSet& p) {
          return cross_entropy_loss(forward(spec, p, sx), sy);
        },
        /*create_graph=*/true);
    return cross_entropy_loss(forward(spec, adapted, qx), qy);
  };
  return check_gradient("meta-gradient mlp-2x4", fn, inputs, 1e-5, 1e-3);
}

}  // namespace metabias
