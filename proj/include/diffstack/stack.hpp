#pragma once

#include <optional>
#include <string>
#include <vector>

#include "diffstack/controller.hpp"
#include "diffstack/cost.hpp"
#include "diffstack/planner.hpp"
#include "diffstack/predictor.hpp"
#include "diffstack/scenario.hpp"

namespace diffstack {

/// Where the planner's picture of the predicted agent comes from.
enum class PredictionSource {
  kModel,        // the learned predictor
  kNone,         // predicted agent ignored
  kGroundTruth,  // logged future as a single certain mode
};

struct StackConfig {
  PlannerConfig planner;
  ILQRConfig controller;
  CostParams cost;
  bool use_planner = true;     // false: iLQR starts from a zero-control rollout
  bool use_controller = true;  // false: the selected plan is executed as is

  void validate() const {
    if (!use_planner && !use_controller) throw ConfigError("stack: the planner and the controller cannot both be disabled");
  }

  /// `base` with the planner horizon and step taken from the scenario.
  static StackConfig for_scenario(const Scenario& s, StackConfig base) {
    base.planner.horizon = s.horizon_steps;
    base.planner.dt = s.dt;
    return base;
  }
  static StackConfig for_scenario(const Scenario& s) { return for_scenario(s, StackConfig{}); }
};

inline PredictorConfig predictor_config_for(const Scenario& s) {
  PredictorConfig c;
  c.horizon = s.horizon_steps;
  c.history_steps = s.past_steps;
  c.dt = s.dt;
  return c;
}

/// One decision instant: log index `at` with the ego at `ego` and heading for `goal`.
struct Situation {
  int at = 0;
  State ego;
  State goal;
  std::string predicted_id;  // empty: the scenario's predicted agent
};

/// The planner could not produce the two candidates selection needs.
class TooFewCandidates : public DomainError {
 public:
  using DomainError::DomainError;
};

namespace stack {

inline Situation situation(const Scenario& sc) {
  return {sc.now_index(), sc.ego().states[sc.now_index()], sc.goal, sc.predicted_agent_id};
}

/// Logged futures of every non-ego agent except `skip` as certain single modes.
inline std::vector<MixtureFuture> logged_futures(const Scenario& sc, int at, const std::string& skip = "") {
  std::vector<MixtureFuture> out;
  for (const AgentTrack& a : sc.agents) {
    if (a.id == sc.ego_id || a.id == skip) continue;
    out.push_back(MixtureFuture::single(sc.future_positions(a, sc.horizon_steps, at)));
  }
  return out;
}

/// Reference lane used when scoring an executed trajectory: the candidate lane
/// closest to the goal.
inline const Lane* reference_lane(const Scenario& sc, const State& goal) {
  return lanegeo::nearest_candidate_lane(sc.lanes, goal);
}

/// Ground-truth context of every non-ego agent for scoring a trajectory in hindsight.
inline CostContext hindsight_context(const Scenario& sc, const Situation& s) {
  CostContext ctx;
  ctx.agents = logged_futures(sc, s.at);
  ctx.goal = s.goal;
  ctx.lane = reference_lane(sc, s.goal);
  return ctx;
}

/// Control cost of `traj` against logged futures under fixed weights.
inline double hindsight_cost(const Trajectory& traj, const CostContext& hindsight, const CostWeights& fixed,
                             const CostParams& prm = {}) {
  return cost::evaluate(traj, hindsight, fixed, prm);
}

/// Sum over t = 1..T of squared 2D distance to the logged ego positions.
inline double il_loss(const Trajectory& traj, const std::vector<Vec2>& gt_ego) {
  if (static_cast<int>(gt_ego.size()) != traj.horizon()) throw DomainError("il_loss: horizon mismatch");
  double s = 0.0;
  for (int t = 1; t <= traj.horizon(); ++t) s += (traj.states[t].position() - gt_ego[t - 1]).squaredNorm();
  return s;
}

/// dL/d(state, control) of il_loss for controller::backward.
inline std::vector<Vec6> il_loss_grad(const Trajectory& traj, const std::vector<Vec2>& gt_ego) {
  std::vector<Vec6> g(traj.states.size(), Vec6::Zero());
  for (int t = 1; t <= traj.horizon(); ++t) g[t].head<2>() = 2.0 * (traj.states[t].position() - gt_ego[t - 1]);
  return g;
}

/// dL/d(state, control) of the hindsight cost.
inline std::vector<Vec6> hindsight_cost_grad(const Trajectory& traj, const CostContext& hindsight,
                                             const CostWeights& fixed, const CostParams& prm = {}) {
  const auto tg = cost::term_gradients(traj, hindsight, prm);
  const Vec5 w = fixed.w();
  std::vector<Vec6> g(tg.size(), Vec6::Zero());
  for (std::size_t t = 0; t < tg.size(); ++t)
    for (int i = 0; i < kNumCostTerms; ++i) g[t] += w[i] * tg[t][i];
  return g;
}

struct StackRun {
  std::optional<TrajectoryPrediction> prediction;
  CostContext plan_ctx;
  int predicted_slot = -1;  // index of the predicted agent in plan_ctx.agents, -1 if absent
  CandidateSet candidates;   // empty without a planner
  CostContext control_ctx;  // plan_ctx on the selected candidate's lane
  ILQRSolution control;
  bool controlled = false;

  /// Executed ego trajectory: the controller's solution, or the selected plan
  /// when the controller is disabled.
  const Trajectory& output() const { return controlled ? control.trajectory : candidates.chosen().traj; }
};

/// predict -> generate candidates -> cost and select -> iLQR from the selected plan.
/// Without a planner the controller starts from zero controls on the reference lane.
/// Throws TooFewCandidates when fewer than two candidates survive.
inline StackRun run(const Scenario& sc, const Situation& s, const PredictorParams* params, const CostWeights& w,
                    PredictionSource source, const StackConfig& cfg) {
  StackRun r;
  const AgentTrack& target = s.predicted_id.empty() ? sc.predicted() : sc.agent(s.predicted_id);
  if (target.id == sc.ego_id) throw DomainError("stack::run: the ego cannot be the predicted agent");
  if (source == PredictionSource::kModel) {
    if (params == nullptr) throw DomainError("stack::run: model predictions requested without parameters");
    r.prediction = predictor::predict(*params, sc.history(target, s.at), s.ego);
    r.plan_ctx.agents.push_back(r.prediction->mixture(true));
    r.predicted_slot = 0;
  } else if (source == PredictionSource::kGroundTruth) {
    r.plan_ctx.agents.push_back(MixtureFuture::single(sc.future_positions(target, sc.horizon_steps, s.at)));
    r.predicted_slot = 0;
  }
  for (MixtureFuture& f : logged_futures(sc, s.at, target.id)) r.plan_ctx.agents.push_back(std::move(f));
  r.plan_ctx.goal = s.goal;
  r.plan_ctx.lane = reference_lane(sc, s.goal);

  cfg.validate();
  if (!cfg.use_planner) {
    r.control_ctx = r.plan_ctx;
    const std::vector<Control> zeros(static_cast<std::size_t>(cfg.planner.horizon), Control{0.0, 0.0});
    r.control = controller::solve(dynamics::rollout(s.ego, zeros, cfg.planner.dt), r.control_ctx, w, cfg.controller,
                                  cfg.cost);
    r.controlled = true;
    return r;
  }
  r.candidates = planner::generate_candidates(s.ego, s.goal, sc.lanes, cfg.planner, cfg.controller.limits);
  if (r.candidates.size() < 2)
    throw TooFewCandidates("scenario '" + sc.id + "': fewer than two planner candidates");
  planner::cost_and_select(r.candidates, r.plan_ctx, w, cfg.planner.beta, cfg.cost);
  r.control_ctx = planner::candidate_context(r.plan_ctx, r.candidates.chosen());
  if (cfg.use_controller) {
    r.control = controller::solve(r.candidates.chosen().traj, r.control_ctx, w, cfg.controller, cfg.cost);
    r.controlled = true;
  }
  return r;
}

/// Hindsight cost of the executed trajectory with hand-tuned weights.
inline double run_hindsight_cost(const Scenario& sc, const Situation& s, const StackRun& r, const StackConfig& cfg) {
  return hindsight_cost(r.output(), hindsight_context(sc, s), CostWeights::hand_tuned(), cfg.cost);
}

/// True when planning with the logged future of the predicted agent beats
/// ignoring it under the hindsight cost.
inline bool is_interactive(const Scenario& sc, const StackConfig& cfg) {
  const Situation s = situation(sc);
  const CostWeights w = CostWeights::hand_tuned();
  const double gt = run_hindsight_cost(sc, s, run(sc, s, nullptr, w, PredictionSource::kGroundTruth, cfg), cfg);
  const double none = run_hindsight_cost(sc, s, run(sc, s, nullptr, w, PredictionSource::kNone, cfg), cfg);
  return gt < none;
}

inline bool family_is_interactive(const std::string& f) {
  return f == "lead_brake" || f == "crossing" || f == "cut_in";
}

struct GenerationReport {
  int generated = 0;
  int regenerated = 0;       // interactive draws replaced because they were not interactive
  int uncertified = 0;       // kept after exhausting attempts
  int rejected = 0;          // draws with fewer than two candidates
};

/// Generates `cfg.count` scenarios. Interactive-family draws are regenerated
/// (new attempt seed) until planning with the logged future strictly beats
/// ignoring the predicted agent; unsuitable draws are regenerated as well.
inline std::vector<Scenario> generate_certified(const ScenarioConfig& cfg, GenerationReport* report = nullptr,
                                                int max_attempts = 25) {
  cfg.validate();
  GenerationReport rep;
  std::vector<Scenario> out;
  out.reserve(cfg.count);
  for (int i = 0; i < cfg.count; ++i) {
    std::optional<Scenario> keep;
    for (int attempt = 0; attempt < max_attempts; ++attempt) {
      Scenario sc = scenario::generate_at(cfg, i, attempt);
      const StackConfig sc_cfg = StackConfig::for_scenario(sc);
      bool ok;
      try {
        ok = !family_is_interactive(sc.family) || is_interactive(sc, sc_cfg);
      } catch (const DomainError&) {
        ++rep.rejected;
        continue;
      }
      if (ok) {
        keep = std::move(sc);
        break;
      }
      ++rep.regenerated;
      if (attempt + 1 == max_attempts) {
        ++rep.uncertified;
        keep = std::move(sc);
      }
    }
    if (!keep) throw DataError("generate: no usable scenario for index " + std::to_string(i));
    out.push_back(std::move(*keep));
    ++rep.generated;
  }
  if (report) *report = rep;
  return out;
}

struct RejectReport {
  int kept = 0;
  int incomplete = 0;
  int too_few_candidates = 0;
};

/// Drops scenarios with incomplete tracks or fewer than two planner candidates.
inline std::vector<Scenario> reject_unsuitable(const std::vector<Scenario>& scenarios, const PlannerConfig& pcfg,
                                               RejectReport* report = nullptr, const ControlLimits& limits = {}) {
  RejectReport rep;
  std::vector<Scenario> out;
  for (const Scenario& sc : scenarios) {
    try {
      validate(sc);
    } catch (const DataError&) {
      ++rep.incomplete;
      continue;
    }
    PlannerConfig p = pcfg;
    p.horizon = sc.horizon_steps;
    p.dt = sc.dt;
    const auto set = planner::generate_candidates(sc.ego().states[sc.now_index()], sc.goal, sc.lanes, p, limits);
    if (set.size() < 2) {
      ++rep.too_few_candidates;
      continue;
    }
    out.push_back(sc);
    ++rep.kept;
  }
  if (report) *report = rep;
  return out;
}

}  // namespace stack
}  // namespace diffstack
