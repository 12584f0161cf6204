#pragma once

#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffstack/stack.hpp"

namespace diffstack {

struct SimConfig {
  double t_sim = 10.0;
  double replan_interval = 0.5;

  int steps(double seconds, double dt) const {
    const double n = seconds / dt;
    if (std::abs(n - std::round(n)) > 1e-9 || n < 1.0 - 1e-9)
      throw ConfigError("sim: " + std::to_string(seconds) + " s is not a positive multiple of dt");
    return static_cast<int>(std::round(n));
  }
  void validate(double dt) const {
    const int n = steps(t_sim, dt);
    const int r = steps(replan_interval, dt);
    if (r > n) throw ConfigError("sim: replan interval longer than the simulation");
  }
};

/// A driving policy queried at each replan: returns the ego trajectory it would
/// execute from the situation (at least one replan interval long).
using Policy = std::function<Trajectory(const Scenario&, const Situation&)>;

struct ClosedLoopMetrics {
  double trajectory_cost = 0.0;  // collision + lane + control_effort
  double open_loop_cost = 0.0;
  double collision_cost = 0.0;
  double lane_cost = 0.0;
  double control_effort = 0.0;
  double deviation = 0.0;

  nlohmann::json to_json() const {
    return {{"trajectory_cost", trajectory_cost}, {"open_loop_cost", open_loop_cost},
            {"collision_cost", collision_cost},   {"lane_cost", lane_cost},
            {"control_effort", control_effort},   {"deviation", deviation}};
  }
};

struct SimResult {
  std::string scenario_id;
  Trajectory ego;                       // x_sim, u_sim over the simulation
  std::vector<int> replan_steps;        // simulation step of each replan
  std::vector<Trajectory> plans;        // executed-plan trajectory at each replan
  std::vector<State> goals;
  std::vector<std::string> lanes;       // reference lane id per replan
  std::vector<std::string> predicted;   // predicted agent per replan
  int fallbacks = 0;                    // replans where the policy could not plan and the ego braked
  ClosedLoopMetrics metrics;
};

namespace sim {

/// Closest non-ego agent to `ego` at log index `at`.
inline std::string closest_agent(const Scenario& sc, int at, const State& ego) {
  std::string best_id;
  double best = std::numeric_limits<double>::infinity();
  for (const AgentTrack& a : sc.agents) {
    if (a.id == sc.ego_id) continue;
    const double d = (a.states[at].position() - ego.position()).norm();
    if (d < best) best = d, best_id = a.id;
  }
  if (best_id.empty()) throw DomainError("scenario '" + sc.id + "': no agent to predict");
  return best_id;
}

/// Feeds the logged ego controls; reproduces the log exactly.
inline Policy replay_policy() {
  return [](const Scenario& sc, const Situation& s) { return sc.logged(sc.ego(), sc.horizon_steps, s.at); };
}

/// The stack's executed trajectory for `params` and `source`; `base` supplies
/// everything but the scenario-derived planner horizon and step.
inline Policy stack_policy(const PredictorParams* params, CostWeights w, PredictionSource source,
                           StackConfig base = {}) {
  return [params, w, source, base](const Scenario& sc, const Situation& s) {
    return stack::run(sc, s, params, w, source, StackConfig::for_scenario(sc, base)).output();
  };
}

/// Brakes to a standstill along the current heading: the fallback when the
/// planner has nothing to choose from (e.g. the ego has stopped past its goal).
inline Trajectory stop_trajectory(const State& x0, int n, double dt, const ControlLimits& lim = {}) {
  Trajectory tr;
  tr.dt = dt;
  tr.states.push_back(x0);
  for (int t = 0; t < n; ++t) {
    const State& x = tr.states.back();
    const Control u{0.0, std::clamp(-x.v / dt, lim.lower.accel, lim.upper.accel)};
    tr.controls.push_back(u);
    tr.states.push_back(dynamics::step(x, u, dt));
  }
  return tr;
}

/// Step costs of an executed segment: states after `from` up to `from + n` and
/// the controls between them, against the logged agents at those times.
inline Vec5 segment_terms(const Scenario& sc, const Trajectory& ego, int from, int n, int log0, const Lane* lane,
                          const CostParams& prm) {
  Trajectory seg;
  seg.dt = ego.dt;
  seg.states.assign(ego.states.begin() + from, ego.states.begin() + from + n + 1);
  seg.controls.assign(ego.controls.begin() + from, ego.controls.begin() + from + n);
  CostContext ctx;
  for (const AgentTrack& a : sc.agents)
    if (a.id != sc.ego_id) ctx.agents.push_back(MixtureFuture::single(sc.future_positions(a, n, log0 + from)));
  ctx.goal = seg.states.back();
  ctx.lane = lane;
  return cost::terms(seg, ctx, prm);
}

/// Log replay: the ego follows the policy's controls, replanning every
/// `replan_interval`; other agents replay their logs. At each replan the goal
/// is the logged ego state one horizon ahead and the closest agent is predicted.
/// A policy that cannot plan (TooFewCandidates) is replaced by braking for that
/// interval. Metrics use hand-tuned weights.
inline SimResult simulate(const Scenario& sc, const Policy& policy, const SimConfig& cfg, const CostParams& prm = {}) {
  cfg.validate(sc.dt);
  const int N = cfg.steps(cfg.t_sim, sc.dt);
  const int R = cfg.steps(cfg.replan_interval, sc.dt);
  const int T = sc.horizon_steps;
  const int log0 = sc.now_index();
  if (log0 + N + T >= sc.total_steps())
    throw DataError("scenario '" + sc.id + "': log too short for a " + std::to_string(cfg.t_sim) +
                    " s simulation (needs " + std::to_string(N + T) + " future steps, has " +
                    std::to_string(sc.future_steps) + ")");
  if (R > T) throw ConfigError("sim: replan interval exceeds the planning horizon");

  SimResult res;
  res.scenario_id = sc.id;
  res.ego.dt = sc.dt;
  res.ego.states.push_back(sc.ego().states[log0]);
  const CostWeights fixed = CostWeights::hand_tuned();
  Vec5 terms = Vec5::Zero();
  double open_loop = 0.0;

  for (int k = 0; k < N; k += R) {
    const int at = log0 + k;
    Situation s;
    s.at = at;
    s.ego = res.ego.states.back();
    s.goal = sc.ego().states[at + T];
    s.predicted_id = closest_agent(sc, at, s.ego);
    Trajectory plan;
    try {
      plan = policy(sc, s);
    } catch (const TooFewCandidates&) {
      plan = stop_trajectory(s.ego, T, sc.dt);
      ++res.fallbacks;
    }
    if (plan.horizon() < R) throw DomainError("sim: policy returned a trajectory shorter than the replan interval");
    open_loop += stack::hindsight_cost(plan, stack::hindsight_context(sc, s), fixed, prm);
    const Lane* lane = stack::reference_lane(sc, s.goal);
    const int n = std::min(R, N - k);
    for (int t = 0; t < n; ++t) {
      res.ego.controls.push_back(plan.controls[t]);
      res.ego.states.push_back(dynamics::step(res.ego.states.back(), plan.controls[t], sc.dt));
    }
    terms += segment_terms(sc, res.ego, k, n, log0, lane, prm);
    res.replan_steps.push_back(k);
    res.plans.push_back(plan);
    res.goals.push_back(s.goal);
    res.lanes.push_back(lane->id);
    res.predicted.push_back(s.predicted_id);
  }

  const Vec5 w = fixed.w();
  ClosedLoopMetrics& m = res.metrics;
  m.collision_cost = w[kCollision] * terms[kCollision] / cfg.t_sim;
  m.lane_cost = (w[kLaneLateral] * terms[kLaneLateral] + w[kLaneHeading] * terms[kLaneHeading]) / cfg.t_sim;
  m.control_effort = w[kControlEffort] * terms[kControlEffort] / cfg.t_sim;
  m.trajectory_cost = m.collision_cost + m.lane_cost + m.control_effort;
  m.open_loop_cost = open_loop / static_cast<double>(res.replan_steps.size());
  double dev = 0.0;
  for (int t = 1; t <= N; ++t) dev += (res.ego.states[t].position() - sc.ego().states[log0 + t].position()).norm();
  m.deviation = dev / N;
  return res;
}

inline nlohmann::json to_json(const SimResult& r) {
  auto traj = [](const Trajectory& t) {
    nlohmann::json s = nlohmann::json::array(), u = nlohmann::json::array();
    for (const State& x : t.states) s.push_back({x.x, x.y, x.heading, x.v});
    for (const Control& c : t.controls) u.push_back({c.heading_rate, c.accel});
    return nlohmann::json{{"states", s}, {"controls", u}};
  };
  nlohmann::json plans = nlohmann::json::array(), goals = nlohmann::json::array();
  for (const auto& p : r.plans) plans.push_back(traj(p));
  for (const auto& g : r.goals) goals.push_back({g.x, g.y, g.heading, g.v});
  return {{"scenario", r.scenario_id}, {"ego", traj(r.ego)},     {"replan_steps", r.replan_steps},
          {"plans", plans},            {"goals", goals},         {"lanes", r.lanes},
          {"predicted", r.predicted},  {"fallbacks", r.fallbacks},  {"metrics", r.metrics.to_json()}};
}

}  // namespace sim
}  // namespace diffstack
