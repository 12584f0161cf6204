#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "diffstack/simulator.hpp"
#include "diffstack/training.hpp"

namespace diffstack::report {

/// Version of the metrics CSV column contract. Bump on any header change.
inline constexpr int kCsvVersion = 1;

/// Leading columns of every metrics CSV; metric columns follow, then one
/// `<metric>_se` column per metric.
inline const std::vector<std::string>& key_columns() {
  static const std::vector<std::string> k{"csv_version", "table", "setting", "method", "kind", "seed", "n"};
  return k;
}

inline std::string num(double x) {
  if (std::isnan(x)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return static_cast<int>(i);
    return -1;
  }

  std::string to_csv() const {
    std::ostringstream o;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) o << (i ? "," : "") << cells[i];
      o << '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return o.str();
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write '" + path + "'");
    f << to_csv();
  }

  /// Cells never contain commas or quotes, so splitting on ',' is exact.
  static Table parse(const std::string& text) {
    Table t;
    std::istringstream in(text);
    std::string line;
    auto split = [](const std::string& l) {
      std::vector<std::string> cells;
      std::string cell;
      std::istringstream ls(l);
      while (std::getline(ls, cell, ',')) cells.push_back(cell);
      if (!l.empty() && l.back() == ',') cells.emplace_back();
      return cells;
    };
    if (!std::getline(in, line)) throw DataError("metrics csv: empty file");
    t.header = split(line);
    if (t.header.size() < key_columns().size() ||
        !std::equal(key_columns().begin(), key_columns().end(), t.header.begin()))
      throw DataError("metrics csv: unexpected header");
    int lineno = 1;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      auto cells = split(line);
      if (cells.size() != t.header.size())
        throw DataError("metrics csv: line " + std::to_string(lineno) + " has " + std::to_string(cells.size()) +
                        " cells, expected " + std::to_string(t.header.size()));
      if (cells[0] != std::to_string(kCsvVersion))
        throw DataError("metrics csv: unsupported csv_version '" + cells[0] + "'");
      t.rows.push_back(std::move(cells));
    }
    return t;
  }

  static Table load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot read '" + path + "'");
    std::ostringstream s;
    s << f.rdbuf();
    return parse(s.str());
  }

  /// Value of `col` in the row with this method and kind; NaN when absent or empty.
  double value(const std::string& method, const std::string& kind, const std::string& col) const {
    const int c = column(col), m = column("method"), k = column("kind");
    if (c < 0) return std::numeric_limits<double>::quiet_NaN();
    for (const auto& r : rows)
      if (r[m] == method && r[k] == kind) return r[c].empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(r[c]);
    return std::numeric_limits<double>::quiet_NaN();
  }
};

/// Per-scenario metric vectors of one method run; nullopt marks a scenario the
/// method could not score.
struct Run {
  std::string method;
  std::string seed;  // empty for baselines
  bool baseline = false;
  std::vector<std::optional<std::vector<double>>> scenarios;
};

/// Means over the scenarios every run scored, grouped by method: one row per
/// baseline, one per seed and one `mean` row (SE over seeds) per model method.
/// Relative columns subtract the `reference` baseline's mean.
inline Table summarize(const std::string& table, Setting setting, const std::vector<std::string>& metrics,
                       const std::vector<std::string>& relative, const std::vector<Run>& runs,
                       const std::string& reference) {
  if (runs.empty()) throw ConfigError("summarize: no runs");
  for (const Run& r : runs)
    if (r.method.find_first_of(",\"\r\n") != std::string::npos)
      throw ConfigError("summarize: method name '" + r.method + "' contains a CSV delimiter");
  const std::size_t ns = runs.front().scenarios.size();
  for (const Run& r : runs)
    if (r.scenarios.size() != ns) throw DomainError("summarize: runs cover different scenario sets");
  std::vector<std::size_t> common;
  for (std::size_t i = 0; i < ns; ++i) {
    bool ok = true;
    for (const Run& r : runs) ok = ok && r.scenarios[i].has_value();
    if (ok) common.push_back(i);
  }

  const std::size_t nm = metrics.size();
  std::vector<std::vector<double>> means(runs.size(), std::vector<double>(nm, std::numeric_limits<double>::quiet_NaN()));
  for (std::size_t k = 0; k < runs.size(); ++k) {
    if (common.empty()) break;
    std::vector<double> sum(nm, 0.0);
    for (std::size_t i : common)
      for (std::size_t j = 0; j < nm; ++j) sum[j] += (*runs[k].scenarios[i])[j];
    for (std::size_t j = 0; j < nm; ++j) means[k][j] = sum[j] / static_cast<double>(common.size());
  }

  std::vector<int> rel_idx;
  for (const auto& m : relative) {
    int j = -1;
    for (std::size_t q = 0; q < nm; ++q)
      if (metrics[q] == m) j = static_cast<int>(q);
    if (j < 0) throw ConfigError("summarize: relative metric '" + m + "' is not a metric");
    rel_idx.push_back(j);
  }
  const std::vector<double>* ref = nullptr;
  for (std::size_t k = 0; k < runs.size(); ++k)
    if (runs[k].baseline && runs[k].method == reference) ref = &means[k];
  if (!ref) throw ConfigError("summarize: reference baseline '" + reference + "' missing");

  // full value vector per run: metrics then relative metrics
  auto values = [&](std::size_t k) {
    std::vector<double> v = means[k];
    for (int j : rel_idx) v.push_back(means[k][j] - (*ref)[j]);
    return v;
  };

  Table t;
  t.header = key_columns();
  std::vector<std::string> cols = metrics;
  for (const auto& m : relative) cols.push_back("rel_" + m);
  for (const auto& c : cols) t.header.push_back(c);
  for (const auto& c : cols) t.header.push_back(c + "_se");

  const std::string n = std::to_string(common.size());
  auto row = [&](const std::string& method, const std::string& kind, const std::string& seed,
                 const std::vector<double>& v, const std::vector<double>& se) {
    std::vector<std::string> r{std::to_string(kCsvVersion), table, to_string(setting), method, kind, seed, n};
    for (double x : v) r.push_back(num(x));
    for (double x : se) r.push_back(num(x));
    t.rows.push_back(std::move(r));
  };

  const std::size_t nc = cols.size();
  for (std::size_t k = 0; k < runs.size(); ++k)
    if (runs[k].baseline) row(runs[k].method, "baseline", "", values(k), std::vector<double>(nc, 0.0));

  std::vector<std::string> order;
  for (const Run& r : runs)
    if (!r.baseline && std::find(order.begin(), order.end(), r.method) == order.end()) order.push_back(r.method);
  for (const auto& method : order) {
    std::vector<std::vector<double>> per_seed;
    for (std::size_t k = 0; k < runs.size(); ++k) {
      if (runs[k].baseline || runs[k].method != method) continue;
      per_seed.push_back(values(k));
      row(method, "seed", runs[k].seed, per_seed.back(), std::vector<double>(nc, std::numeric_limits<double>::quiet_NaN()));
    }
    std::vector<double> m(nc), se(nc);
    for (std::size_t c = 0; c < nc; ++c) {
      std::vector<double> xs;
      for (const auto& v : per_seed) xs.push_back(v[c]);
      std::tie(m[c], se[c]) = training::mean_se(xs);
    }
    row(method, "mean", "", m, se);
  }
  return t;
}

// ---------------------------------------------------------------------------
// Experiments

/// The reference every relative column is measured against.
inline constexpr const char* kNoPrediction = "no_pred";
inline constexpr const char* kGroundTruth = "gt_pred";

inline const std::vector<std::string>& open_loop_metrics() {
  static const std::vector<std::string> m{"ade", "nll", "plan_loss", "control_loss"};
  return m;
}

/// All checkpoints must agree on the stack shape; baselines use it too.
inline StackConfig shared_stack(const std::vector<training::Checkpoint>& cks) {
  StackConfig s;
  if (cks.empty()) return s;
  s.use_planner = cks.front().train.stack.use_planner;
  s.use_controller = cks.front().train.stack.use_controller;
  for (const auto& c : cks)
    if (c.train.stack.use_planner != s.use_planner || c.train.stack.use_controller != s.use_controller)
      throw ConfigError("checkpoints were trained with different stack shapes");
  return s;
}

inline std::optional<std::vector<double>> as_values(const training::EvalRecord& e) {
  if (e.skipped) return std::nullopt;
  return std::vector<double>{e.ade, e.nll, e.plan_loss, e.control_loss};
}

/// Open-loop table: No-prediction and GT-prediction baselines plus every
/// checkpoint, grouped by label.
inline Table open_loop(const std::vector<Scenario>& set, const std::vector<training::Checkpoint>& cks, Setting setting) {
  const StackConfig base = shared_stack(cks);
  std::vector<Run> runs;
  auto add = [&](const std::string& name, const std::string& seed, bool baseline, const training::Method& m) {
    Run r{name, seed, baseline, {}};
    for (const auto& e : training::evaluate_open_loop(set, m, setting, base)) r.scenarios.push_back(as_values(e));
    runs.push_back(std::move(r));
  };
  add(kNoPrediction, "", true, {kNoPrediction, PredictionSource::kNone});
  add(kGroundTruth, "", true, {kGroundTruth, PredictionSource::kGroundTruth});
  for (const auto& c : cks) add(c.label, std::to_string(c.train.seed), false, {c.label, PredictionSource::kModel, &c.params});
  return summarize("open_loop", setting, open_loop_metrics(), {"plan_loss", "control_loss"}, runs, kNoPrediction);
}

inline const std::vector<std::string>& closed_loop_metrics() {
  static const std::vector<std::string> m{"trajectory_cost", "open_loop_cost", "collision_cost", "lane_cost",
                                          "control_effort",  "deviation",      "fallbacks"};
  return m;
}

inline std::optional<std::vector<double>> simulate_values(const Scenario& sc, const Policy& p, const SimConfig& cfg) {
  try {
    const SimResult r = sim::simulate(sc, p, cfg);
    const ClosedLoopMetrics& m = r.metrics;
    return std::vector<double>{m.trajectory_cost, m.open_loop_cost, m.collision_cost, m.lane_cost,
                               m.control_effort,  m.deviation,      static_cast<double>(r.fallbacks)};
  } catch (const DomainError&) {
    return std::nullopt;
  }
}

/// Closed-loop table: log replay, No-prediction and GT-prediction baselines
/// plus every checkpoint.
inline Table closed_loop(const std::vector<Scenario>& set, const std::vector<training::Checkpoint>& cks,
                         const SimConfig& cfg) {
  const StackConfig base = shared_stack(cks);
  const Setting setting = cks.empty() ? Setting::kRL : cks.front().loss.setting;
  std::vector<Run> runs;
  auto add = [&](const std::string& name, const std::string& seed, bool baseline, const Policy& p) {
    Run r{name, seed, baseline, {}};
    for (const Scenario& sc : set) r.scenarios.push_back(simulate_values(sc, p, cfg));
    runs.push_back(std::move(r));
  };
  const CostWeights hand = CostWeights::hand_tuned();
  add("log_replay", "", true, sim::replay_policy());
  add(kNoPrediction, "", true, sim::stack_policy(nullptr, hand, PredictionSource::kNone, base));
  add(kGroundTruth, "", true, sim::stack_policy(nullptr, hand, PredictionSource::kGroundTruth, base));
  for (const auto& c : cks)
    add(c.label, std::to_string(c.train.seed), false,
        sim::stack_policy(&c.params.predictor, c.params.weights, PredictionSource::kModel, base));
  return summarize("closed_loop", setting, closed_loop_metrics(),
                   {"trajectory_cost", "open_loop_cost", "collision_cost", "lane_cost", "control_effort"}, runs,
                   kNoPrediction);
}

}  // namespace diffstack::report
