#pragma once

#include <optional>
#include <vector>

#include "diffstack/cost.hpp"
#include "diffstack/dynamics.hpp"
#include "diffstack/lanegeo.hpp"

namespace diffstack {

struct PlannerConfig {
  std::vector<double> accel_set{-3.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0};
  std::vector<double> lateral_offsets{-0.5, 0.0, 0.5};
  double beta = 1.0;
  int horizon = 6;
  double dt = 0.5;

  void validate() const {
    if (!(beta > 0.0)) throw ConfigError("planner: beta must be positive");
    if (accel_set.empty() || lateral_offsets.empty()) throw ConfigError("planner: empty sample sets");
    if (horizon < 1 || !(dt > 0.0)) throw ConfigError("planner: horizon and dt must be positive");
  }
};

struct Candidate {
  Trajectory traj;
  const Lane* lane = nullptr;
  double accel = 0.0;
  double lateral_offset = 0.0;
};

struct CandidateSet {
  std::vector<Candidate> candidates;
  std::vector<double> costs;
  std::vector<double> probs;
  int selected = -1;
  double beta = 1.0;

  std::size_t size() const { return candidates.size(); }
  const Candidate& chosen() const { return candidates.at(static_cast<std::size_t>(selected)); }
};

namespace planner {

/// Ego trajectory whose positions follow a cubic Hermite curve to the terminal
/// pose. The first step is fixed by the start state; intermediate headings and
/// speeds are read off the chords between sampled positions so that the
/// recovered controls reproduce the samples under Euler integration, and the
/// last control reaches the terminal heading and speed. Returns nullopt when a
/// control leaves the limits or the terminal speed is negative.
inline std::optional<Trajectory> fit_spline(const State& start, const Vec2& terminal_pos, double terminal_heading,
                                            double terminal_speed, int T, double dt, const ControlLimits& limits) {
  if (T < 1 || !(dt > 0.0)) throw DomainError("fit_spline: invalid horizon");
  if (terminal_speed < 0.0 || start.v < 0.0) return std::nullopt;
  std::vector<Vec2> p(T + 1);
  p[0] = start.position();
  p[1] = p[0] + start.v * dt * Vec2(std::cos(start.heading), std::sin(start.heading));
  if (T >= 2) {
    const double D = (T - 1) * dt;
    const Vec2 m0 = start.v * Vec2(std::cos(start.heading), std::sin(start.heading));
    const Vec2 m1 = terminal_speed * Vec2(std::cos(terminal_heading), std::sin(terminal_heading));
    for (int t = 2; t <= T; ++t) {
      const double s = static_cast<double>(t - 1) / (T - 1);
      const double s2 = s * s, s3 = s2 * s;
      p[t] = (2 * s3 - 3 * s2 + 1) * p[1] + (s3 - 2 * s2 + s) * D * m0 + (-2 * s3 + 3 * s2) * terminal_pos +
             (s3 - s2) * D * m1;
    }
  }
  std::vector<double> heading(T + 1), speed(T + 1);
  heading[0] = start.heading;
  speed[0] = start.v;
  for (int t = 1; t < T; ++t) {
    const Vec2 c = p[t + 1] - p[t];
    const double len = c.norm();
    // sub-nanometre chords are a standstill
    speed[t] = len > 1e-9 ? len / dt : 0.0;
    heading[t] = len > 1e-9 ? std::atan2(c.y(), c.x()) : heading[t - 1];
  }
  heading[T] = wrap_angle(terminal_heading);
  speed[T] = terminal_speed;
  // Track the profile from the states actually reached so roundoff does not
  // accumulate, and never let the speed dip below zero.
  Trajectory tr;
  tr.dt = dt;
  tr.states.reserve(T + 1);
  tr.states.push_back(start);
  for (int t = 0; t < T; ++t) {
    const State& cur = tr.states.back();
    Control u{wrap_angle(heading[t + 1] - cur.heading) / dt, (speed[t + 1] - cur.v) / dt};
    for (int i = 0; i < 8 && cur.v + u.accel * dt < 0.0; ++i)
      u.accel = std::nextafter(u.accel, std::numeric_limits<double>::infinity());
    if (!limits.contains(u)) return std::nullopt;
    tr.controls.push_back(u);
    tr.states.push_back(dynamics::step(cur, u, dt));
    if (tr.states.back().v < 0.0) return std::nullopt;
  }
  return tr;
}

/// Lane-centric terminal states for every candidate lane, acceleration and
/// lateral offset; infeasible splines are dropped. Decelerations that would
/// stop the vehicle before the horizon end at the stopping point at rest.
inline CandidateSet generate_candidates(const State& ego, const State& goal, const LaneGraph& graph,
                                        const PlannerConfig& cfg, const ControlLimits& limits = {}) {
  cfg.validate();
  if (!ego.finite()) throw DomainError("generate_candidates: non-finite ego state");
  CandidateSet set;
  set.beta = cfg.beta;
  const double T = cfg.horizon * cfg.dt;
  for (const Lane* lane : lanegeo::candidate_lanes(graph, goal)) {
    const double s0 = lanegeo::project(*lane, ego.position()).arclength;
    for (double a : cfg.accel_set) {
      double sT, vT;
      if (ego.v + a * T >= 0.0) {
        sT = s0 + ego.v * T + 0.5 * a * T * T;
        vT = ego.v + a * T;
      } else {
        sT = s0 + ego.v * ego.v / (2.0 * std::abs(a));
        vT = 0.0;
      }
      sT = std::max(sT, s0);
      for (double d : cfg.lateral_offsets) {
        const lanegeo::LanePoint term = lanegeo::point_at(*lane, sT, d);
        auto tr = fit_spline(ego, term.position, term.heading, vT, cfg.horizon, cfg.dt, limits);
        if (tr) set.candidates.push_back({std::move(*tr), lane, a, d});
      }
    }
  }
  return set;
}

/// Context of candidate n: the shared agents and goal with the candidate's own lane.
inline CostContext candidate_context(const CostContext& base, const Candidate& c) {
  CostContext ctx = base;
  ctx.lane = c.lane;
  return ctx;
}

/// Softmax over -beta * costs, numerically stabilized.
inline std::vector<double> softmin(const std::vector<double>& costs, double beta) {
  if (costs.empty()) return {};
  const double m = *std::min_element(costs.begin(), costs.end());
  std::vector<double> p(costs.size());
  double z = 0.0;
  for (std::size_t n = 0; n < costs.size(); ++n) z += p[n] = std::exp(-beta * (costs[n] - m));
  for (double& x : p) x /= z;
  return p;
}

/// Index of the smallest cost; ties go to the lowest index.
inline int argmin(const std::vector<double>& costs) {
  int best = 0;
  for (std::size_t n = 1; n < costs.size(); ++n)
    if (costs[n] < costs[best]) best = static_cast<int>(n);
  return best;
}

inline void cost_and_select(CandidateSet& set, const CostContext& base, const CostWeights& w, double beta,
                            const CostParams& prm = {}) {
  if (set.candidates.empty()) throw DomainError("cost_and_select: empty candidate set");
  if (!(beta > 0.0)) throw DomainError("cost_and_select: beta must be positive");
  set.beta = beta;
  set.costs.resize(set.size());
  for (std::size_t n = 0; n < set.size(); ++n)
    set.costs[n] = cost::evaluate(set.candidates[n].traj, candidate_context(base, set.candidates[n]), w, prm);
  set.probs = softmin(set.costs, beta);
  set.selected = argmin(set.costs);
}

struct PlanningLoss {
  double value = 0.0;
  std::vector<double> d_costs;
};

/// Cross-entropy of the candidate distribution against `target`:
/// CE = -log p_target and dCE/dc_n = beta * (1{n = target} - p_n).
inline PlanningLoss planning_loss(const CandidateSet& set, int target) {
  if (target < 0 || target >= static_cast<int>(set.size())) throw DomainError("planning_loss: target out of range");
  if (set.probs.size() != set.size()) throw DomainError("planning_loss: candidate set not costed");
  PlanningLoss l;
  // log p_target computed from costs for accuracy when p_target underflows
  const double m = *std::min_element(set.costs.begin(), set.costs.end());
  double z = 0.0;
  for (double c : set.costs) z += std::exp(-set.beta * (c - m));
  l.value = set.beta * (set.costs[target] - m) + std::log(z);
  l.d_costs.resize(set.size());
  for (std::size_t n = 0; n < set.size(); ++n)
    l.d_costs[n] = set.beta * ((static_cast<int>(n) == target ? 1.0 : 0.0) - set.probs[n]);
  return l;
}

struct PlannerGrad {
  Vec5 d_w = Vec5::Zero();
  Vec5 d_psi = Vec5::Zero();
  double d_alpha = 0.0;
  std::vector<PredictionGrad> d_predictions;
};

/// Chains dL/dc_n through every candidate cost into weights and predictions.
inline PlannerGrad backward(const CandidateSet& set, const CostContext& base, const CostWeights& w,
                            const std::vector<double>& d_costs, const CostParams& prm = {}) {
  if (d_costs.size() != set.size()) throw DomainError("planner::backward: size mismatch");
  PlannerGrad g;
  for (const MixtureFuture& f : base.agents) g.d_predictions.push_back(PredictionGrad::zeros_like(f));
  for (std::size_t n = 0; n < set.size(); ++n) {
    if (d_costs[n] == 0.0) continue;
    const CostContext ctx = candidate_context(base, set.candidates[n]);
    g.d_w += d_costs[n] * cost::terms(set.candidates[n].traj, ctx, prm);
    const auto gp = cost::grad_predictions(set.candidates[n].traj, ctx, w, prm);
    for (std::size_t a = 0; a < gp.size(); ++a) {
      if (!base.agents[a].differentiable) continue;
      for (std::size_t k = 0; k < gp[a].d_means.size(); ++k) {
        for (std::size_t t = 0; t < gp[a].d_means[k].size(); ++t)
          g.d_predictions[a].d_means[k][t] += d_costs[n] * gp[a].d_means[k][t];
        g.d_predictions[a].d_probs[k] += d_costs[n] * gp[a].d_probs[k];
      }
    }
  }
  std::tie(g.d_psi, g.d_alpha) = w.chain(g.d_w);
  return g;
}

/// RL target: the candidate with the lowest cost under `hindsight` (ground-truth
/// futures) and fixed weights.
inline int select_target_rl(const CandidateSet& set, const CostContext& hindsight, const CostWeights& fixed,
                            const CostParams& prm = {}) {
  std::vector<double> c(set.size());
  for (std::size_t n = 0; n < set.size(); ++n)
    c[n] = cost::evaluate(set.candidates[n].traj, candidate_context(hindsight, set.candidates[n]), fixed, prm);
  return argmin(c);
}

/// Root-mean-squared position distance over t = 1..T.
inline double rms_distance(const Trajectory& a, const std::vector<Vec2>& gt_future) {
  if (static_cast<int>(gt_future.size()) != a.horizon()) throw DomainError("rms_distance: horizon mismatch");
  double s = 0.0;
  for (int t = 1; t <= a.horizon(); ++t) s += (a.states[t].position() - gt_future[t - 1]).squaredNorm();
  return std::sqrt(s / a.horizon());
}

/// IL target: the candidate nearest to the ground-truth ego future.
inline int select_target_il(const CandidateSet& set, const std::vector<Vec2>& gt_ego_future) {
  std::vector<double> d(set.size());
  for (std::size_t n = 0; n < set.size(); ++n) d[n] = rms_distance(set.candidates[n].traj, gt_ego_future);
  return argmin(d);
}

}  // namespace planner
}  // namespace diffstack
