#pragma once

#include <vector>

#include "diffstack/cost.hpp"
#include "diffstack/dynamics.hpp"
#include "diffstack/ilqr.hpp"

namespace diffstack {

struct ILQRConfig {
  int max_iters = 5;
  double conv_threshold = 0.05;
  int line_search_max_tries = 5;
  double line_search_shrink = 5.0;
  ControlLimits limits;

  double stationarity_tol = 0.0;

  // Backward pass: curvature of the differentiated LQR system and the smallest
  // per-step control curvature accepted before the instance is skipped.
  ilqr::Curvature backward_curvature = ilqr::Curvature::kExact;
  double backward_min_curvature = 0.0;

  ilqr::Config solver() const {
    return {max_iters, conv_threshold, line_search_max_tries, line_search_shrink, stationarity_tol};
  }

  /// Tight settings that drive the solve to a stationary point; used where the
  /// solution must be the optimizer of its cost (gradient verification).
  static ILQRConfig tight() {
    ILQRConfig c;
    c.max_iters = 500;
    c.conv_threshold = 0.0;
    c.line_search_max_tries = 30;
    c.stationarity_tol = 1e-11;
    return c;
  }
};

/// The ego optimal control problem: unicycle dynamics and the five-term cost.
struct DrivingProblem {
  static constexpr int kNx = 4;
  static constexpr int kNu = 2;
  using StateV = StateVec;
  using ControlV = ControlVec;

  const CostContext* ctx = nullptr;
  CostWeights weights;
  CostParams params;
  ControlLimits limits;
  double dt = 0.5;

  Trajectory to_trajectory(const std::vector<StateV>& xs, const std::vector<ControlV>& us) const {
    Trajectory tr;
    tr.dt = dt;
    tr.states.reserve(xs.size());
    for (const auto& x : xs) tr.states.push_back(State::from_vec(x));
    tr.controls.reserve(us.size());
    for (const auto& u : us) tr.controls.push_back(Control::from_vec(u));
    return tr;
  }

  StateV step(const StateV& x, const ControlV& u) const {
    return dynamics::step(State::from_vec(x), Control::from_vec(u), dt).vec();
  }
  ilqr::Linearization<4, 2> linearize(const StateV& x, const ControlV& u) const {
    const auto j = dynamics::jacobians(State::from_vec(x), Control::from_vec(u), dt);
    return {j.A, j.B};
  }
  double cost(const std::vector<StateV>& xs, const std::vector<ControlV>& us) const {
    return cost::evaluate(to_trajectory(xs, us), *ctx, weights, params);
  }
  std::vector<ilqr::Expansion<4, 2>> expand(const std::vector<StateV>& xs, const std::vector<ControlV>& us,
                                            ilqr::Curvature c) const {
    const auto slices = cost::quadratize(to_trajectory(xs, us), *ctx, weights, params,
                                         c == ilqr::Curvature::kExact ? HessianMode::kExact : HessianMode::kGaussNewton);
    std::vector<ilqr::Expansion<4, 2>> out(slices.size());
    for (std::size_t t = 0; t < slices.size(); ++t) {
      out[t].g = slices[t].gradient;
      out[t].H = slices[t].hessian;
    }
    return out;
  }
  Mat6 costate_hessian(const StateV& x, const ControlV&, const StateV& lambda) const {
    return dynamics::costate_hessian(State::from_vec(x), lambda, dt);
  }
  StateV state_difference(const StateV& a, const StateV& b) const {
    StateV d = a - b;
    d[2] = wrap_angle(d[2]);
    return d;
  }
  ControlV lower() const { return limits.lower_vec(); }
  ControlV upper() const { return limits.upper_vec(); }
};

struct ILQRSolution {
  Trajectory trajectory;
  bool converged = false;
  int iterations = 0;
  std::vector<double> cost_trace;
  std::vector<std::array<bool, 2>> active_set;
  bool active_set_changed = false;
  ilqr::Solution<4, 2> raw;
};

/// Gradients of a training loss w.r.t. cost parameters and prediction outputs,
/// obtained by implicit differentiation of the converged solve.
struct ControllerGrad {
  bool skipped = false;
  Vec5 d_w = Vec5::Zero();
  Vec5 d_psi = Vec5::Zero();
  double d_alpha = 0.0;
  std::vector<PredictionGrad> d_predictions;  // one per context agent
};

namespace controller {

inline DrivingProblem make_problem(const CostContext& ctx, const CostWeights& w, const ILQRConfig& cfg, double dt,
                                   const CostParams& prm = {}) {
  DrivingProblem p;
  p.ctx = &ctx;
  p.weights = w;
  p.params = prm;
  p.limits = cfg.limits;
  p.dt = dt;
  return p;
}

/// Box-constrained iLQR initialized with the planner's controls.
inline ILQRSolution solve(const Trajectory& init, const CostContext& ctx, const CostWeights& w, const ILQRConfig& cfg,
                          const CostParams& prm = {}) {
  if (init.controls.empty()) throw DomainError("controller::solve: empty initialization");
  const DrivingProblem p = make_problem(ctx, w, cfg, init.dt, prm);
  std::vector<ControlVec> us;
  us.reserve(init.controls.size());
  for (const Control& u : init.controls) us.push_back(u.vec());
  ILQRSolution out;
  out.raw = ilqr::solve(p, init.states.front().vec(), std::move(us), cfg.solver());
  out.trajectory = p.to_trajectory(out.raw.xs, out.raw.us);
  out.converged = out.raw.converged;
  out.iterations = out.raw.iterations;
  out.cost_trace = out.raw.cost_trace;
  out.active_set = out.raw.active;
  out.active_set_changed = out.raw.active_set_changed;
  return out;
}

/// Implicit-differentiation backward pass. `dl_dtau[t]` is dL/d(state_t, control_t)
/// of the solution trajectory (control block of the last entry ignored).
/// Non-converged solves, active-set changes in the final iteration, and
/// non-positive-definite reduced Hessians yield zero gradients with `skipped`.
inline ControllerGrad backward(const ILQRSolution& sol, const CostContext& ctx, const CostWeights& w,
                               const ILQRConfig& cfg, const std::vector<Vec6>& dl_dtau, const CostParams& prm = {}) {
  if (dl_dtau.size() != sol.trajectory.states.size())
    throw DomainError("controller::backward: gradient length does not match the solution horizon");
  ControllerGrad g;
  for (const MixtureFuture& f : ctx.agents) g.d_predictions.push_back(PredictionGrad::zeros_like(f));
  if (!sol.converged || sol.active_set_changed) {
    g.skipped = true;
    return g;
  }
  const DrivingProblem p = make_problem(ctx, w, cfg, sol.trajectory.dt, prm);
  const auto dtau = ilqr::adjoint(p, sol.raw, dl_dtau, cfg.backward_curvature, cfg.backward_min_curvature);
  if (!dtau) {
    g.skipped = true;
    return g;
  }
  const std::vector<Vec6> dir(dtau->begin(), dtau->end());
  g.d_w = cost::contract_weight_sensitivity(sol.trajectory, ctx, dir, prm);
  std::tie(g.d_psi, g.d_alpha) = w.chain(g.d_w);
  g.d_predictions = cost::contract_prediction_sensitivity(sol.trajectory, ctx, w, dir, prm);
  return g;
}

}  // namespace controller
}  // namespace diffstack
