#pragma once

// Result records, seed-level aggregation with normal-approximation
// confidence intervals, and deterministic table emission (CSV is the
// canonical form, markdown the human view).

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "metabias/common.hpp"

namespace metabias {

// One row per (architecture, representation, condition, split, support
// size, seed): the seed's mean metric over its evaluation tasks. A missing
// value marks a numerical failure that is reported, never dropped.
struct ResultRecord {
  std::string task;       // concept | modular | omniglot
  std::string arch;       // mlp | cnn | lstm | transformer
  std::string repr;       // bits | image
  std::string condition;  // M1 | R1 | R10 | R50 | R100 | R200
  std::string split;      // meta_val | meta_test
  std::string subset;     // omniglot meta-training subset, else empty
  int n_support = 0;
  uint64_t seed = 0;
  std::string metric;     // accuracy | mse
  std::optional<double> value;
  int n_tasks = 0;        // tasks behind this seed-level mean
  int n_failed = 0;       // tasks that failed numerically

  std::string field(const std::string& name) const {
    if (name == "task") return task;
    if (name == "arch") return arch;
    if (name == "repr") return repr;
    if (name == "condition") return condition;
    if (name == "split") return split;
    if (name == "subset") return subset;
    if (name == "n_support") return std::to_string(n_support);
    if (name == "seed") return std::to_string(seed);
    if (name == "metric") return metric;
    throw ConfigError("unknown record field: " + name);
  }
};

inline double accuracy(std::span<const int> preds, std::span<const int> labels) {
  if (preds.size() != labels.size())
    throw ShapeError("accuracy: " + std::to_string(preds.size()) +
                     " predictions vs " + std::to_string(labels.size()) +
                     " labels");
  if (preds.empty()) throw ConfigError("accuracy: empty input");
  int correct = 0;
  for (size_t i = 0; i < preds.size(); ++i)
    correct += preds[i] == labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

inline double mse(std::span<const double> preds,
                  std::span<const double> targets) {
  if (preds.size() != targets.size())
    throw ShapeError("mse: " + std::to_string(preds.size()) +
                     " predictions vs " + std::to_string(targets.size()) +
                     " targets");
  if (preds.empty()) throw ConfigError("mse: empty input");
  double s = 0;
  for (size_t i = 0; i < preds.size(); ++i) {
    double d = preds[i] - targets[i];
    s += d * d;
  }
  return s / static_cast<double>(preds.size());
}

// ---------------------------------------------------------------------------
// Aggregation.
// ---------------------------------------------------------------------------

struct Aggregate {
  double mean = 0.0;
  std::optional<double> ci95;  // undefined for singleton groups
  int n = 0;                   // records with a value
  int n_null = 0;              // records without one
};

struct ResultTable {
  std::vector<std::string> keys;
  std::map<std::vector<std::string>, Aggregate> groups;
};

// Mean and 1.96 * sd / sqrt(n) per group over seed-level records. Values
// are sorted before summation so the result is permutation-invariant.
inline ResultTable aggregate(std::span<const ResultRecord> records,
                             std::vector<std::string> keys) {
  ResultTable table;
  table.keys = keys;
  std::map<std::vector<std::string>, std::vector<double>> values;
  std::map<std::vector<std::string>, int> nulls;
  for (const ResultRecord& r : records) {
    std::vector<std::string> key;
    key.reserve(keys.size());
    for (const auto& k : keys) key.push_back(r.field(k));
    if (r.value)
      values[key].push_back(*r.value);
    else
      nulls[key] += 1;
  }
  for (auto& [key, vals] : values) {
    std::sort(vals.begin(), vals.end());
    double sum = 0;
    for (double v : vals) sum += v;
    Aggregate a;
    a.n = static_cast<int>(vals.size());
    a.n_null = nulls.count(key) ? nulls[key] : 0;
    a.mean = sum / a.n;
    if (a.n > 1) {
      double ss = 0;
      for (double v : vals) ss += (v - a.mean) * (v - a.mean);
      double sd = std::sqrt(ss / (a.n - 1));
      a.ci95 = 1.96 * sd / std::sqrt(static_cast<double>(a.n));
    }
    table.groups[key] = a;
  }
  for (auto& [key, n] : nulls) {
    if (!table.groups.count(key)) {
      Aggregate a;
      a.n = 0;
      a.n_null = n;
      table.groups[key] = a;
    }
  }
  return table;
}

// ---------------------------------------------------------------------------
// CSV records (canonical output of eval/baseline runs).
// ---------------------------------------------------------------------------

inline const char* kRecordsCsvHeader =
    "task,arch,repr,condition,split,subset,n_support,seed,metric,value,"
    "n_tasks,n_failed";

namespace detail {

inline std::string format_value(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

inline std::string records_to_csv(std::span<const ResultRecord> records) {
  std::ostringstream os;
  os << kRecordsCsvHeader << "\n";
  for (const ResultRecord& r : records) {
    os << r.task << ',' << r.arch << ',' << r.repr << ',' << r.condition
       << ',' << r.split << ',' << r.subset << ',' << r.n_support << ','
       << r.seed << ',' << r.metric << ','
       << (r.value ? detail::format_value(*r.value) : "") << ',' << r.n_tasks
       << ',' << r.n_failed << "\n";
  }
  return os.str();
}

inline std::vector<ResultRecord> records_from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != kRecordsCsvHeader)
    throw DataError("records csv: unexpected header: " + line);
  std::vector<ResultRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto f = detail::split_csv_line(line);
    if (f.size() != 12)
      throw DataError("records csv: expected 12 fields, got " +
                      std::to_string(f.size()) + ": " + line);
    ResultRecord r;
    r.task = f[0];
    r.arch = f[1];
    r.repr = f[2];
    r.condition = f[3];
    r.split = f[4];
    r.subset = f[5];
    r.n_support = std::stoi(f[6]);
    r.seed = std::stoull(f[7]);
    r.metric = f[8];
    if (!f[9].empty()) r.value = std::stod(f[9]);
    r.n_tasks = std::stoi(f[10]);
    r.n_failed = std::stoi(f[11]);
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Table layouts mirroring the reported result tables. Cells are formatted
// to three decimals; missing cells render as an em dash.
// ---------------------------------------------------------------------------

enum class TableLayout { Concept, Modular, Omniglot };

namespace detail {

inline std::string cell(const ResultTable& table,
                        const std::vector<std::string>& key) {
  auto it = table.groups.find(key);
  if (it == table.groups.end() || it->second.n == 0) return "—";
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << it->second.mean;
  return os.str();
}

inline std::vector<std::pair<std::string, std::string>> arch_repr_rows(
    std::span<const ResultRecord> records) {
  // fixed family order, image block before bits, matching the tables
  std::vector<std::pair<std::string, std::string>> rows;
  std::set<std::pair<std::string, std::string>> present;
  for (const auto& r : records) present.insert({r.arch, r.repr});
  for (const char* repr : {"image", "bits"})
    for (const char* arch : {"mlp", "cnn", "lstm", "transformer"})
      if (present.count({arch, repr})) rows.push_back({arch, repr});
  return rows;
}

}  // namespace detail

// Markdown table for a layout; deterministic row and column order.
inline std::string emit_table(std::span<const ResultRecord> records,
                              TableLayout layout) {
  std::ostringstream os;
  if (layout == TableLayout::Concept) {
    ResultTable t = aggregate(records,
                              {"arch", "repr", "condition", "n_support"});
    std::vector<int> supports;
    {
      std::set<int> s;
      for (const auto& r : records) s.insert(r.n_support);
      supports.assign(s.begin(), s.end());
    }
    const std::vector<std::string> conds{"R1", "R10", "R200", "M1"};
    os << "| Arch | Data |";
    for (int n : supports)
      for (const auto& c : conds) os << " n=" << n << " " << c << " |";
    os << "\n|---|---|";
    for (size_t i = 0; i < supports.size() * conds.size(); ++i) os << "---|";
    os << "\n";
    for (const auto& [arch, repr] : detail::arch_repr_rows(records)) {
      os << "| " << arch << " | " << repr << " |";
      for (int n : supports)
        for (const auto& c : conds)
          os << " " << detail::cell(t, {arch, repr, c, std::to_string(n)})
             << " |";
      os << "\n";
    }
  } else if (layout == TableLayout::Modular) {
    ResultTable t = aggregate(
        records, {"condition", "arch", "repr", "split", "n_support"});
    std::vector<int> supports;
    {
      std::set<int> s;
      for (const auto& r : records) s.insert(r.n_support);
      supports.assign(s.begin(), s.end());
    }
    std::vector<std::string> conds;
    for (const char* c : {"M1", "R1", "R10", "R50", "R100", "R200"}) {
      bool present = false;
      for (const auto& r : records) present = present || r.condition == c;
      if (present) conds.push_back(c);
    }
    os << "| Arch | Data |";
    for (int n : supports)
      os << " n=" << n << " Meta-Val | n=" << n << " Meta-Test |";
    os << "\n|---|---|";
    for (size_t i = 0; i < supports.size() * 2; ++i) os << "---|";
    os << "\n";
    for (const auto& cond : conds) {
      for (const auto& [arch, repr] : detail::arch_repr_rows(records)) {
        os << "| " << arch << " (" << cond << ") | " << repr << " |";
        for (int n : supports) {
          os << " "
             << detail::cell(
                    t, {cond, arch, repr, "meta_val", std::to_string(n)})
             << " |";
          os << " "
             << detail::cell(
                    t, {cond, arch, repr, "meta_test", std::to_string(n)})
             << " |";
        }
        os << "\n";
      }
    }
  } else {
    ResultTable t = aggregate(records, {"arch", "condition", "subset"});
    const std::vector<std::string> rconds{"R1", "R10", "R50", "R100", "R200"};
    const std::vector<std::string> subsets{"all", "ancient", "asian",
                                           "middle_eastern", "european"};
    os << "| Arch |";
    for (const auto& c : rconds) os << " " << c << " |";
    for (const auto& s : subsets) os << " M1 " << s << " |";
    os << "\n|---|";
    for (size_t i = 0; i < rconds.size() + subsets.size(); ++i) os << "---|";
    os << "\n";
    for (const char* arch : {"mlp", "cnn", "lstm", "transformer"}) {
      bool present = false;
      for (const auto& r : records) present = present || r.arch == arch;
      if (!present) continue;
      os << "| " << arch << " |";
      for (const auto& c : rconds)
        os << " " << detail::cell(t, {arch, c, ""}) << " |";
      for (const auto& s : subsets)
        os << " " << detail::cell(t, {arch, "M1", s}) << " |";
      os << "\n";
    }
  }
  return os.str();
}

// Flat CSV of the aggregates behind a layout (canonical machine output).
inline std::string emit_aggregate_csv(std::span<const ResultRecord> records,
                                      TableLayout layout) {
  std::vector<std::string> keys;
  switch (layout) {
    case TableLayout::Concept:
      keys = {"arch", "repr", "condition", "n_support"};
      break;
    case TableLayout::Modular:
      keys = {"condition", "arch", "repr", "split", "n_support"};
      break;
    case TableLayout::Omniglot:
      keys = {"arch", "condition", "subset"};
      break;
  }
  ResultTable t = aggregate(records, keys);
  std::ostringstream os;
  for (size_t i = 0; i < keys.size(); ++i) os << keys[i] << ',';
  os << "mean,ci95,n,n_null\n";
  for (const auto& [key, a] : t.groups) {
    for (const auto& k : key) os << k << ',';
    if (a.n > 0)
      os << detail::format_value(a.mean);
    os << ',';
    if (a.ci95) os << detail::format_value(*a.ci95);
    os << ',' << a.n << ',' << a.n_null << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Curve dumps: per-integer rows for pre/post-adaptation fits on a modular
// task, plus ground truth and the support points.
// ---------------------------------------------------------------------------

struct CurvePoint {
  int x = 0;
  double y_true = 0.0;    // noiseless x mod m
  double pred_step0 = 0.0;
  double pred_step1 = 0.0;
  bool is_support = false;
  std::optional<double> support_y;  // observed (noisy) value when present
};

inline std::string curve_to_csv(std::span<const CurvePoint> points) {
  std::ostringstream os;
  os << "x,y_true,pred_step0,pred_step1,is_support,support_y\n";
  for (const CurvePoint& p : points) {
    os << p.x << ',' << detail::format_value(p.y_true) << ','
       << detail::format_value(p.pred_step0) << ','
       << detail::format_value(p.pred_step1) << ',' << (p.is_support ? 1 : 0)
       << ',' << (p.support_y ? detail::format_value(*p.support_y) : "")
       << "\n";
  }
  return os.str();
}

}  // namespace metabias
