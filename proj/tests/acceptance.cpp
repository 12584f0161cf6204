// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance <path-to-diffstack-cli> [--out DIR] [--only 1,2,...]
//
// Exit status is 0 only when every selected criterion passes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "diffstack/gradsuite.hpp"
#include "diffstack/report.hpp"
#include "lq_util.hpp"

namespace fs = std::filesystem;
using namespace diffstack;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double x) {
  char b[32];
  std::snprintf(b, sizeof b, "%.4g", x);
  return b;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Shared experiment state: the 1000-scenario interactive set and the
// checkpoints trained on it, built on first use.

constexpr std::uint64_t kDataSeed = 7;
constexpr int kScenarios = 1000;
const std::vector<std::uint64_t> kSeeds{1, 2, 3};

struct Experiment {
  fs::path out;
  std::vector<Scenario> train, val;
  std::map<std::string, training::Checkpoint> cache;

  void ensure_data() {
    if (!train.empty()) return;
    ScenarioConfig c;
    c.family = "interactive";
    c.count = kScenarios;
    c.seed = kDataSeed;
    const auto all = stack::generate_certified(c);
    std::tie(train, val) = scenario::split(all, 0.75, 0);
  }

  /// Predictor (or cost) training with the documented defaults.
  const training::Checkpoint& checkpoint(TrainMode mode, Setting setting, std::uint64_t seed, double bias = 0.0,
                                         const training::Checkpoint* init = nullptr,
                                         const std::function<void(const StackParams&)>& on_update = {}) {
    ensure_data();
    const std::string key = to_string(mode) + "/" + to_string(setting) + "/" + std::to_string(seed) + "/" +
                            fmt(bias) + "/" + (init ? init->label : "");
    auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    TrainConfig tc;
    tc.mode = mode;
    tc.seed = seed;
    tc.bias_offset = bias;
    StackParams p = init ? init->params : training::initial_params(predictor_config_for(train.front()), seed);
    if (mode == TrainMode::kCostTuning) p.weights = training::perturbed_weights(0.5, seed);
    training::Checkpoint ck;
    ck.loss = mode_loss_defaults(mode, setting);
    ck.params = training::train(train, val, p, tc, ck.loss, {}, on_update).params;
    ck.label = to_string(mode);
    ck.train = tc;
    std::ofstream(out / ("ck_" + to_string(mode) + "_" + to_string(setting) + "_b" + fmt(bias) + "_s" +
                         std::to_string(seed) + ".json"))
        << training::to_json(ck).dump(1) << "\n";
    return cache.emplace(key, std::move(ck)).first->second;
  }

  void save(const report::Table& t, const std::string& name) const { t.save((out / name).string()); }
};

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  std::string d;
  for (const auto& target : gradsuite::targets()) {
    const auto r = gradsuite::run(target, 100, 1);
    ok = ok && r.ok(100);
    d += target + " " + std::to_string(r.passed) + "/" + std::to_string(r.instances) + " max " +
         fmt(r.max_relative_error) + " (<" + fmt(r.tolerance) + "); ";
  }
  const double s = seconds_since(t0);
  return {ok && s < 300.0, d + "runtime " + fmt(s) + " s (< 300)"};
}

Outcome lqr_exactness() {
  using testing::LinearQuadratic;
  std::mt19937_64 rng(2);
  std::normal_distribution<double> N(0.0, 1.0);
  const int T = 6;
  int one_step = 0, converged = 0, adjoint_ok = 0;
  double max_dev = 0.0, max_adj = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const LinearQuadratic p = testing::random_lq(rng, T);  // bounds at +-1e6 never bind
    const Eigen::Vector3d x0(N(rng), N(rng), N(rng));
    const auto oracle = testing::dense_lq_optimum(p, x0, T);
    const std::vector<Eigen::Vector2d> zero(T, Eigen::Vector2d::Zero());
    ilqr::Config one;
    one.max_iters = 1;
    const auto first = ilqr::solve(p, x0, zero, one);
    const auto full = ilqr::solve(p, x0, zero, ilqr::Config{});
    double dev = 0.0;
    for (int t = 0; t < T; ++t) dev = std::max({dev, (first.us[t] - oracle[t]).norm(), (full.us[t] - oracle[t]).norm()});
    max_dev = std::max(max_dev, dev);
    one_step += dev < 1e-8;
    converged += full.converged;

    // backward: d/dq of a random linear functional of the solution
    std::vector<Eigen::Matrix<double, 5, 1>> d(T + 1);
    for (auto& v : d)
      for (int i = 0; i < 5; ++i) v[i] = N(rng);
    d[T].tail<2>().setZero();
    const auto dq = ilqr::adjoint(p, full, d);
    if (!dq) continue;
    Eigen::VectorXd g(5 * T), q(5 * T);
    for (int t = 0; t < T; ++t) {
      g.segment<5>(5 * t) = (*dq)[t];
      q.segment<5>(5 * t) = p.q[t];
    }
    auto fn = [&](const Eigen::VectorXd& v) {
      LinearQuadratic pp = p;
      for (int t = 0; t < T; ++t) pp.q[t] = v.segment<5>(5 * t);
      const auto s = ilqr::solve(pp, x0, zero, ilqr::Config{});
      double L = 0.0;
      for (int t = 0; t <= T; ++t) {
        L += d[t].head<3>().dot(s.xs[t]);
        if (t < T) L += d[t].tail<2>().dot(s.us[t]);
      }
      return L;
    };
    const auto rep = diffcheck::check(fn, g, q, 1e-5, 1e-4);
    adjoint_ok += rep.passed;
    max_adj = std::max(max_adj, rep.relative_error);
  }
  return {one_step == 50 && converged == 50 && adjoint_ok == 50,
          "first iterate = Riccati optimum " + std::to_string(one_step) + "/50 (max dev " + fmt(max_dev) +
              " < 1e-8), converged " + std::to_string(converged) + "/50, backward vs FD " +
              std::to_string(adjoint_ok) + "/50 (max rel " + fmt(max_adj) + " < 1e-4)"};
}

std::vector<Scenario> synthetic(int n, std::uint64_t seed) {
  ScenarioConfig c;
  c.family = "interactive";
  c.count = n;
  c.seed = seed;
  return scenario::generate(c);
}

Outcome planner_oracle() {
  int argmin_ok = 0, soft_ok = 0, count_ok = 0, used = 0;
  const PlannerConfig pc;
  const CostWeights w = CostWeights::hand_tuned();
  for (const Scenario& sc : synthetic(100, 3)) {
    const Situation s = stack::situation(sc);
    CandidateSet set = planner::generate_candidates(s.ego, s.goal, sc.lanes, pc);
    ++used;
    count_ok += set.size() <= lanegeo::candidate_lanes(sc.lanes, s.goal).size() * 8 * 3;
    if (set.size() == 0) {
      ++argmin_ok, ++soft_ok;
      continue;
    }
    CostContext ctx;
    ctx.agents = stack::logged_futures(sc, s.at);
    ctx.goal = s.goal;
    // exhaustive enumeration
    int arg = -1;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < set.size(); ++i) {
      const double c = cost::evaluate(set.candidates[i].traj, planner::candidate_context(ctx, set.candidates[i]), w);
      if (c < best) best = c, arg = static_cast<int>(i);
    }
    bool hard = true, soft = true;
    for (double beta : {0.1, 1.0, 10.0}) {
      planner::cost_and_select(set, ctx, w, beta);
      hard = hard && set.selected == arg;
      soft = soft && std::max_element(set.probs.begin(), set.probs.end()) - set.probs.begin() == arg;
    }
    argmin_ok += hard;
    soft_ok += soft;
  }
  return {used == 100 && argmin_ok == 100 && soft_ok == 100 && count_ok == 100,
          "argmin = enumeration " + std::to_string(argmin_ok) + "/100, softmax argmax = argmin for beta 0.1/1/10 " +
              std::to_string(soft_ok) + "/100, count <= |lanes|*8*3 " + std::to_string(count_ok) + "/100"};
}

Outcome monotone_ilqr() {
  int monotone = 0, solves = 0, violations = 0, scenarios = 0;
  const ControlLimits lim;
  const CostWeights w = CostWeights::hand_tuned();
  for (const Scenario& sc : synthetic(500, 4)) {
    ++scenarios;
    bool mono = true;
    for (PredictionSource src : {PredictionSource::kGroundTruth, PredictionSource::kNone}) {
      stack::StackRun r;
      try {
        r = stack::run(sc, stack::situation(sc), nullptr, w, src, StackConfig::for_scenario(sc));
      } catch (const TooFewCandidates&) {
        continue;
      }
      ++solves;
      const auto& tr = r.control.cost_trace;
      for (std::size_t i = 1; i < tr.size(); ++i) mono = mono && tr[i] <= tr[i - 1];
      for (const Control& u : r.control.trajectory.controls) violations += !lim.contains(u);
    }
    monotone += mono;
  }
  return {monotone == 500 && violations == 0 && solves > 0,
          "cost non-increasing on " + std::to_string(monotone) + "/500 scenarios (" + std::to_string(solves) +
              " solves), control-limit violations " + std::to_string(violations)};
}

std::vector<training::Checkpoint> checkpoints(Experiment& ex, const std::vector<TrainMode>& modes, Setting s,
                                              double bias) {
  std::vector<training::Checkpoint> out;
  for (TrainMode m : modes)
    for (auto seed : kSeeds) out.push_back(ex.checkpoint(m, s, seed, bias));
  return out;
}

Outcome training_effect(Experiment& ex) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto cks = checkpoints(ex, {TrainMode::kStandard, TrainMode::kDiffStack}, Setting::kRL, 0.0);
  const report::Table t = report::open_loop(ex.val, cks, Setting::kRL);
  ex.save(t, "criterion5_open_loop.csv");
  const double gt = t.value("gt_pred", "baseline", "rel_control_loss");
  const double std_ = t.value("standard", "mean", "rel_control_loss");
  const double ds = t.value("diffstack", "mean", "rel_control_loss");
  const double se = std::hypot(t.value("standard", "mean", "rel_control_loss_se"),
                               t.value("diffstack", "mean", "rel_control_loss_se"));
  const double s = seconds_since(t0);
  const bool order = gt <= ds && ds <= std_ && std_ <= 0.0;
  const bool margin = std_ - ds >= se;
  return {order && margin && s < 3600.0,
          "relative hindsight cost GT " + fmt(gt) + ", diffstack " + fmt(ds) + ", standard " + fmt(std_) +
              " (ordering " + (order ? "holds" : "violated") + "; standard - diffstack " + fmt(std_ - ds) +
              " vs combined SE " + fmt(se) + "); runtime " + fmt(s) + " s (< 3600)"};
}

Outcome bias_correction(Experiment& ex) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto cks = checkpoints(ex, {TrainMode::kStandard, TrainMode::kDiffStack}, Setting::kRL, 1.0);
  const report::Table t = report::open_loop(ex.val, cks, Setting::kRL);
  ex.save(t, "criterion6_bias_open_loop.csv");
  const double gt = t.value("gt_pred", "baseline", "rel_plan_loss");
  const double std_ = t.value("standard", "mean", "rel_plan_loss");
  const double ds = t.value("diffstack", "mean", "rel_plan_loss");
  const double closed = (std_ - ds) / (std_ - gt);
  const double s = seconds_since(t0);
  return {std_ > 0.0 && ds < 0.0 && closed >= 0.5 && s < 3600.0,
          "relative planning loss with 1 m offset: standard " + fmt(std_) + " (> 0), diffstack " + fmt(ds) +
              " (< 0), GT " + fmt(gt) + ", gap closed " + fmt(100.0 * closed) + "% (>= 50%); runtime " + fmt(s) +
              " s (< 3600)"};
}

Outcome cost_tuning(Experiment& ex) {
  ex.ensure_data();
  double worst_sum = 0.0;
  int improved = 0;
  std::string d;
  for (auto seed : kSeeds) {
    const training::Checkpoint& pre = ex.checkpoint(TrainMode::kStandard, Setting::kRL, seed);
    const training::Checkpoint& tuned =
        ex.checkpoint(TrainMode::kCostTuning, Setting::kIL, seed, 0.0, &pre, [&](const StackParams& p) {
          worst_sum = std::max(worst_sum, std::abs((p.weights.w() / p.weights.alpha).sum() - p.weights.c_norm));
        });
    StackParams start = pre.params;
    start.weights = training::perturbed_weights(0.5, seed);
    const auto a = training::evaluate_open_loop(ex.val, {"start", PredictionSource::kModel, &start}, Setting::kIL);
    const auto b = training::evaluate_open_loop(ex.val, {"tuned", PredictionSource::kModel, &tuned.params}, Setting::kIL);
    const auto m = training::common_means({&a, &b});
    improved += m[1].control_loss < m[0].control_loss;
    d += "seed " + std::to_string(seed) + " plan MSE " + fmt(m[0].control_loss) + " -> " + fmt(m[1].control_loss) + "; ";
  }
  return {improved == static_cast<int>(kSeeds.size()) && worst_sum <= 1e-10,
          d + "max |sum w/alpha - c| over all updates " + fmt(worst_sum) + " (<= 1e-10)"};
}

Outcome closed_loop(Experiment& ex) {
  const auto t0 = std::chrono::steady_clock::now();
  ScenarioConfig c;
  c.family = "interactive";
  c.count = 200;
  c.seed = 8;
  c.future_seconds = 13.0;
  const auto logs = stack::generate_certified(c);
  const SimConfig cfg;

  double max_dev = 0.0;
  int identity = 0;
  const CostWeights hand = CostWeights::hand_tuned();
  for (const Scenario& sc : logs) {
    max_dev = std::max(max_dev, sim::simulate(sc, sim::replay_policy(), cfg).metrics.deviation);
    const auto m = sim::simulate(sc, sim::stack_policy(nullptr, hand, PredictionSource::kNone), cfg).metrics;
    identity += m.trajectory_cost == m.collision_cost + m.lane_cost + m.control_effort;
  }

  const auto cks = checkpoints(ex, {TrainMode::kDiffStack}, Setting::kRL, 0.0);
  const report::Table t = report::closed_loop(logs, cks, cfg);
  ex.save(t, "criterion8_closed_loop.csv");
  const double gt = t.value("gt_pred", "baseline", "trajectory_cost");
  const double ds = t.value("diffstack", "mean", "trajectory_cost");
  const double np = t.value("no_pred", "baseline", "trajectory_cost");
  const double s = seconds_since(t0);
  const int n = static_cast<int>(logs.size());
  return {max_dev == 0.0 && identity == n && gt <= ds && ds <= np && s < 1800.0,
          "replay deviation max " + fmt(max_dev) + " (== 0), decomposition exact " + std::to_string(identity) + "/" +
              std::to_string(n) + ", trajectory cost GT " + fmt(gt) + " <= diffstack " + fmt(ds) + " <= no-pred " +
              fmt(np) + "; runtime " + fmt(s) + " s (< 1800)"};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

Outcome determinism(const std::string& cli, const fs::path& out) {
  const std::vector<std::string> cmds{
      "gen-data --count 24 --seed 5 --out data.jsonl",
      "gen-data --count 4 --seed 6 --future-seconds 13 --out long.jsonl",
      "train --data data.jsonl --mode standard --epochs 2 --batch-size 6 --seed 1 --out std.json",
      "train --data data.jsonl --mode diffstack --epochs 2 --batch-size 6 --seed 1 --out ds.json",
      "eval-open-loop --data data.jsonl --checkpoints std.json ds.json --out open_loop.csv",
      "eval-closed-loop --data long.jsonl --checkpoints ds.json --tsim 5 --out closed_loop.csv",
      "grad-check --target planner --instances 5 --out grad.json",
      "plot --metrics-csv open_loop.csv --out open_loop.svg"};
  std::vector<fs::path> dirs{out / "cli_run_a", out / "cli_run_b"};
  for (const auto& dir : dirs) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    for (const auto& c : cmds) {
      const std::string line = "cd '" + dir.string() + "' && '" + cli + "' " + c + " >/dev/null 2>&1";
      if (std::system(line.c_str()) != 0) return {false, "command failed: " + c};
    }
  }
  int files = 0, csvs = 0;
  std::vector<std::string> differ;
  for (const auto& e : fs::directory_iterator(dirs[0])) {
    const auto name = e.path().filename();
    ++files;
    csvs += name.extension() == ".csv";
    if (slurp(e.path()) != slurp(dirs[1] / name)) differ.push_back(name.string());
  }
  std::string d = std::to_string(files) + " output files (" + std::to_string(csvs) + " metrics CSVs) compared";
  for (const auto& f : differ) d += ", differs: " + f;
  return {differ.empty() && csvs == 2, d};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: acceptance <diffstack-cli> [--out DIR] [--only 1,2,...]\n";
    return 2;
  }
  const std::string cli = fs::absolute(argv[1]).string();
  fs::path out = "acceptance_out";
  std::set<int> only;
  for (int i = 2; i + 1 < argc; i += 2) {
    const std::string a = argv[i];
    if (a == "--out") out = argv[i + 1];
    if (a == "--only") {
      std::stringstream s(argv[i + 1]);
      std::string tok;
      while (std::getline(s, tok, ',')) only.insert(std::stoi(tok));
    }
  }
  fs::create_directories(out);
  out = fs::absolute(out);
  Experiment ex;
  ex.out = out;

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness suite", gradient_suite},
      {"LQR exactness", lqr_exactness},
      {"planner oracle equivalence", planner_oracle},
      {"monotone iLQR", monotone_ilqr},
      {"end-to-end training effect", [&] { return training_effect(ex); }},
      {"bias correction", [&] { return bias_correction(ex); }},
      {"cost tuning", [&] { return cost_tuning(ex); }},
      {"closed-loop consistency", [&] { return closed_loop(ex); }},
      {"determinism", [&] { return determinism(cli, out); }},
  };
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    all = all && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first << ", "
              << fmt(seconds_since(t0)) << " s): " << o.detail << std::endl;
  }
  return all ? 0 : 1;
}
