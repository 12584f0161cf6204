#pragma once

#include <array>
#include <vector>

#include "diffstack/dynamics.hpp"
#include "diffstack/lanegeo.hpp"

namespace diffstack {

using Vec5 = Eigen::Matrix<double, 5, 1>;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

enum CostTerm : int { kCollision = 0, kGoal = 1, kLaneLateral = 2, kLaneHeading = 3, kControlEffort = 4 };
inline constexpr int kNumCostTerms = 5;

/// Cost weights under the fixed-sum reparameterization
///   w_i = alpha * c_norm * softmax(psi)_i.
/// psi[0] (collision) is never trained.
struct CostWeights {
  Vec5 psi = Vec5::Zero();
  double alpha = 1.0;
  double c_norm = 7.1;

  Vec5 softmax() const {
    const Vec5 e = (psi.array() - psi.maxCoeff()).exp();
    return e / e.sum();
  }
  Vec5 w() const { return alpha * c_norm * softmax(); }

  /// d w_i / d psi_j.
  Eigen::Matrix<double, 5, 5> dw_dpsi() const {
    const Vec5 s = softmax();
    Eigen::Matrix<double, 5, 5> j = -s * s.transpose();
    j.diagonal() += s;
    return alpha * c_norm * j;
  }
  Vec5 dw_dalpha() const { return c_norm * softmax(); }

  /// Chains a gradient w.r.t. w into (psi, alpha).
  std::pair<Vec5, double> chain(const Vec5& dl_dw) const {
    return {dw_dpsi().transpose() * dl_dw, dw_dalpha().dot(dl_dw)};
  }

  /// Hand-tuned defaults (5.0, 0.5, 0.3, 0.3, 1.0) recovered with alpha = 1.
  static CostWeights hand_tuned() { return from_weights(Vec5(5.0, 0.5, 0.3, 0.3, 1.0)); }

  static CostWeights from_weights(const Vec5& w, double alpha = 1.0) {
    require((w.array() > 0.0).all(), "CostWeights: weights must be positive");
    CostWeights cw;
    cw.c_norm = w.sum() / alpha;
    cw.alpha = alpha;
    cw.psi = (w / w.sum()).array().log();
    return cw;
  }
};

namespace cost {

inline CostWeights weights_from_params(const Vec5& psi, double alpha, double c_norm) {
  if (!(alpha > 0.0)) throw DomainError("weights_from_params: alpha must be positive");
  if (!(c_norm > 0.0)) throw DomainError("weights_from_params: c_norm must be positive");
  if (!psi.allFinite()) throw DomainError("weights_from_params: non-finite psi");
  CostWeights w;
  w.psi = psi;
  w.alpha = alpha;
  w.c_norm = c_norm;
  return w;
}

}  // namespace cost

/// Future positions of one agent as a K-mode mixture over t = 1..T. Ground-truth
/// futures are single-mode with probability 1.
struct MixtureFuture {
  std::vector<std::vector<Vec2>> means;
  std::vector<double> probs;
  bool differentiable = false;

  static MixtureFuture single(std::vector<Vec2> positions, bool differentiable = false) {
    MixtureFuture f;
    f.means.push_back(std::move(positions));
    f.probs.push_back(1.0);
    f.differentiable = differentiable;
    return f;
  }
  int modes() const { return static_cast<int>(means.size()); }
};

struct CostContext {
  std::vector<MixtureFuture> agents;
  State goal;
  const Lane* lane = nullptr;
};

struct CostParams {
  double rbf_sigma = 1.5;
  double levenberg = 1e-3;
};

/// Per-timestep expansion over (state, control). Slice T carries a zero control block.
struct QuadraticCostSlice {
  Vec6 gradient = Vec6::Zero();
  Mat6 hessian = Mat6::Zero();
};

enum class HessianMode { kGaussNewton, kExact };

/// Gradient of the (weighted) cost w.r.t. one agent's mixture parameters.
struct PredictionGrad {
  std::vector<std::vector<Vec2>> d_means;
  std::vector<double> d_probs;

  static PredictionGrad zeros_like(const MixtureFuture& f) {
    PredictionGrad g;
    for (const auto& m : f.means) g.d_means.emplace_back(m.size(), Vec2::Zero());
    g.d_probs.assign(f.probs.size(), 0.0);
    return g;
  }
};

namespace cost {

namespace detail {

inline void check_horizons(const Trajectory& traj, const CostContext& ctx) {
  if (ctx.lane == nullptr) throw DomainError("cost: context has no reference lane");
  if (traj.states.size() != traj.controls.size() + 1)
    throw DomainError("cost: trajectory states/controls length mismatch");
  const std::size_t T = traj.controls.size();
  for (const MixtureFuture& f : ctx.agents) {
    if (f.means.empty() || f.means.size() != f.probs.size())
      throw DomainError("cost: agent future has inconsistent mode count");
    for (const auto& m : f.means)
      if (m.size() != T) throw DomainError("cost: agent future horizon does not match trajectory horizon");
  }
}

struct CollisionEval {
  double z = 0.0;      // sum_k pi_k |p - m_k|^2
  Vec2 grad_z;         // dz/dp
  double prob_sum = 0.0;
};

inline CollisionEval collision_z(const MixtureFuture& f, std::size_t t_future, const Vec2& p) {
  CollisionEval e;
  e.grad_z.setZero();
  for (int k = 0; k < f.modes(); ++k) {
    const Vec2 r = p - f.means[k][t_future];
    e.z += f.probs[k] * r.squaredNorm();
    e.grad_z += 2.0 * f.probs[k] * r;
    e.prob_sum += f.probs[k];
  }
  return e;
}

}  // namespace detail

inline double rbf(double z, double sigma) { return std::exp(-z / (2.0 * sigma * sigma)); }

/// Unweighted term values (collision, goal, lane lateral, lane heading, control effort).
inline Vec5 terms(const Trajectory& traj, const CostContext& ctx, const CostParams& prm = {}) {
  detail::check_horizons(traj, ctx);
  const std::size_t T = traj.controls.size();
  Vec5 out = Vec5::Zero();
  for (std::size_t t = 1; t <= T; ++t) {
    const State& s = traj.states[t];
    const Vec2 p = s.position();
    for (const MixtureFuture& f : ctx.agents) out[kCollision] += rbf(detail::collision_z(f, t - 1, p).z, prm.rbf_sigma);
    const LaneProjection pr = lanegeo::project(*ctx.lane, p);
    out[kLaneLateral] += (p - pr.closest_point).squaredNorm();
    const double e = wrap_angle(s.heading - pr.lane_heading);
    out[kLaneHeading] += e * e;
  }
  out[kGoal] = (traj.states[T].position() - ctx.goal.position()).squaredNorm();
  for (const Control& u : traj.controls) out[kControlEffort] += u.heading_rate * u.heading_rate + u.accel * u.accel;
  return out;
}

inline double evaluate(const Trajectory& traj, const CostContext& ctx, const CostWeights& w,
                       const CostParams& prm = {}) {
  return w.w().dot(terms(traj, ctx, prm));
}

/// Per-timestep, per-term gradients (unweighted) over (state, control).
/// Result[t][i] is d term_i / d(state_t, control_t).
inline std::vector<std::array<Vec6, kNumCostTerms>> term_gradients(const Trajectory& traj, const CostContext& ctx,
                                                                   const CostParams& prm = {}) {
  detail::check_horizons(traj, ctx);
  const std::size_t T = traj.controls.size();
  std::vector<std::array<Vec6, kNumCostTerms>> g(T + 1);
  for (auto& a : g)
    for (auto& v : a) v.setZero();
  const double inv2s2 = 1.0 / (2.0 * prm.rbf_sigma * prm.rbf_sigma);
  for (std::size_t t = 1; t <= T; ++t) {
    const State& s = traj.states[t];
    const Vec2 p = s.position();
    for (const MixtureFuture& f : ctx.agents) {
      const auto ce = detail::collision_z(f, t - 1, p);
      const double d_rbf = -rbf(ce.z, prm.rbf_sigma) * inv2s2;
      g[t][kCollision].head<2>() += d_rbf * ce.grad_z;
    }
    const LaneProjection pr = lanegeo::project(*ctx.lane, p);
    g[t][kLaneLateral].head<2>() = 2.0 * (p - pr.closest_point);
    const double e = wrap_angle(s.heading - pr.lane_heading);
    g[t][kLaneHeading][2] = 2.0 * e;
    if (!pr.at_vertex) {
      const double slope = ctx.lane->heading_slope(pr.segment);
      g[t][kLaneHeading].head<2>() = -2.0 * e * slope * pr.segment_dir;
    }
  }
  g[T][kGoal].head<2>() = 2.0 * (traj.states[T].position() - ctx.goal.position());
  for (std::size_t t = 0; t < T; ++t) g[t][kControlEffort].tail<2>() = 2.0 * traj.controls[t].vec();
  return g;
}

/// Gradient and Hessian of the weighted cost at every timestep. Gauss-Newton
/// mode drops the indefinite curvature of the collision kernel and adds
/// Levenberg damping; exact mode returns the true Hessian.
inline std::vector<QuadraticCostSlice> quadratize(const Trajectory& traj, const CostContext& ctx, const CostWeights& w,
                                                  const CostParams& prm = {},
                                                  HessianMode mode = HessianMode::kGaussNewton) {
  const Vec5 wv = w.w();
  const auto tg = term_gradients(traj, ctx, prm);
  const std::size_t T = traj.controls.size();
  std::vector<QuadraticCostSlice> out(T + 1);
  const double inv2s2 = 1.0 / (2.0 * prm.rbf_sigma * prm.rbf_sigma);
  for (std::size_t t = 0; t <= T; ++t) {
    QuadraticCostSlice& q = out[t];
    for (int i = 0; i < kNumCostTerms; ++i) q.gradient += wv[i] * tg[t][i];
    if (t >= 1) {
      const State& s = traj.states[t];
      const Vec2 p = s.position();
      for (const MixtureFuture& f : ctx.agents) {
        const auto ce = detail::collision_z(f, t - 1, p);
        const double r = rbf(ce.z, prm.rbf_sigma);
        Eigen::Matrix2d h = r * inv2s2 * inv2s2 * ce.grad_z * ce.grad_z.transpose();
        if (mode == HessianMode::kExact) h -= r * inv2s2 * 2.0 * ce.prob_sum * Eigen::Matrix2d::Identity();
        q.hessian.topLeftCorner<2, 2>() += wv[kCollision] * h;
      }
      const LaneProjection pr = lanegeo::project(*ctx.lane, p);
      if (pr.at_vertex) {
        q.hessian.topLeftCorner<2, 2>() += 2.0 * wv[kLaneLateral] * Eigen::Matrix2d::Identity();
      } else {
        const Vec2 n(-pr.segment_dir.y(), pr.segment_dir.x());
        q.hessian.topLeftCorner<2, 2>() += 2.0 * wv[kLaneLateral] * n * n.transpose();
      }
      Eigen::Vector4d j = Eigen::Vector4d::Zero();
      j[2] = 1.0;
      if (!pr.at_vertex) j.head<2>() = -ctx.lane->heading_slope(pr.segment) * pr.segment_dir;
      q.hessian.topLeftCorner<4, 4>() += 2.0 * wv[kLaneHeading] * j * j.transpose();
    }
    if (t == T) q.hessian.topLeftCorner<2, 2>() += 2.0 * wv[kGoal] * Eigen::Matrix2d::Identity();
    if (t < T) q.hessian.bottomRightCorner<2, 2>() += 2.0 * wv[kControlEffort] * Eigen::Matrix2d::Identity();
    if (mode == HessianMode::kGaussNewton) q.hessian.diagonal().array() += prm.levenberg;
    q.hessian = (0.5 * (q.hessian + q.hessian.transpose())).eval();
  }
  return out;
}

struct WeightGrad {
  Vec5 d_w;
  Vec5 d_psi;
  double d_alpha = 0.0;
};

/// dc/dw equals the unweighted terms; psi and alpha follow the reparameterization.
inline WeightGrad grad_weights(const Trajectory& traj, const CostContext& ctx, const CostWeights& w,
                               const CostParams& prm = {}) {
  WeightGrad g;
  g.d_w = terms(traj, ctx, prm);
  std::tie(g.d_psi, g.d_alpha) = w.chain(g.d_w);
  return g;
}

/// d(weighted cost)/d(mode means, mode probabilities) for every agent flagged
/// differentiable; other agents receive zeros.
inline std::vector<PredictionGrad> grad_predictions(const Trajectory& traj, const CostContext& ctx,
                                                    const CostWeights& w, const CostParams& prm = {}) {
  detail::check_horizons(traj, ctx);
  const double w1 = w.w()[kCollision];
  const double inv2s2 = 1.0 / (2.0 * prm.rbf_sigma * prm.rbf_sigma);
  std::vector<PredictionGrad> out;
  for (const MixtureFuture& f : ctx.agents) {
    PredictionGrad g = PredictionGrad::zeros_like(f);
    if (f.differentiable) {
      for (std::size_t t = 1; t < traj.states.size(); ++t) {
        const Vec2 p = traj.states[t].position();
        const auto ce = detail::collision_z(f, t - 1, p);
        const double d_rbf = -w1 * rbf(ce.z, prm.rbf_sigma) * inv2s2;
        for (int k = 0; k < f.modes(); ++k) {
          const Vec2 r = p - f.means[k][t - 1];
          g.d_means[k][t - 1] += d_rbf * (-2.0 * f.probs[k]) * r;
          g.d_probs[k] += d_rbf * r.squaredNorm();
        }
      }
    }
    out.push_back(std::move(g));
  }
  return out;
}

/// Contracts a trajectory-space direction against the mixed derivative of the
/// cost gradient w.r.t. prediction parameters:
///   result = d/d(means, probs) [ sum_t grad_tau c_t . direction_t ].
/// `direction[t]` is a 6-vector over (state_t, control_t).
inline std::vector<PredictionGrad> contract_prediction_sensitivity(const Trajectory& traj, const CostContext& ctx,
                                                                   const CostWeights& w,
                                                                   const std::vector<Vec6>& direction,
                                                                   const CostParams& prm = {}) {
  detail::check_horizons(traj, ctx);
  if (direction.size() != traj.states.size()) throw DomainError("contract_prediction_sensitivity: size mismatch");
  const double w1 = w.w()[kCollision];
  const double inv2s2 = 1.0 / (2.0 * prm.rbf_sigma * prm.rbf_sigma);
  std::vector<PredictionGrad> out;
  for (const MixtureFuture& f : ctx.agents) {
    PredictionGrad g = PredictionGrad::zeros_like(f);
    if (f.differentiable) {
      for (std::size_t t = 1; t < traj.states.size(); ++t) {
        const Vec2 p = traj.states[t].position();
        const Vec2 dp = direction[t].head<2>();
        const auto ce = detail::collision_z(f, t - 1, p);
        const double r0 = rbf(ce.z, prm.rbf_sigma);
        const double d1 = -w1 * r0 * inv2s2;          // w1 * rbf'(z)
        const double d2 = w1 * r0 * inv2s2 * inv2s2;  // w1 * rbf''(z)
        const double gz_dp = ce.grad_z.dot(dp);
        for (int k = 0; k < f.modes(); ++k) {
          const Vec2 r = p - f.means[k][t - 1];
          // grad_p c = d1 * grad_z, grad_z = 2 sum_k pi_k (p - m_k)
          g.d_means[k][t - 1] += d2 * gz_dp * (-2.0 * f.probs[k]) * r + d1 * (-2.0 * f.probs[k]) * dp;
          g.d_probs[k] += d2 * gz_dp * r.squaredNorm() + d1 * 2.0 * r.dot(dp);
        }
      }
    }
    out.push_back(std::move(g));
  }
  return out;
}

/// Contracts a trajectory-space direction against d(grad_tau c)/dw, i.e.
/// result_i = sum_t grad_tau term_i(t) . direction_t.
inline Vec5 contract_weight_sensitivity(const Trajectory& traj, const CostContext& ctx,
                                        const std::vector<Vec6>& direction, const CostParams& prm = {}) {
  const auto tg = term_gradients(traj, ctx, prm);
  if (direction.size() != tg.size()) throw DomainError("contract_weight_sensitivity: size mismatch");
  Vec5 out = Vec5::Zero();
  for (std::size_t t = 0; t < tg.size(); ++t)
    for (int i = 0; i < kNumCostTerms; ++i) out[i] += tg[t][i].dot(direction[t]);
  return out;
}

}  // namespace cost
}  // namespace diffstack
