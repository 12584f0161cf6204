#pragma once

#include <array>
#include <concepts>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "diffstack/common.hpp"

namespace diffstack::ilqr {

enum class Curvature { kModel, kExact };

template <int NX, int NU>
struct Expansion {
  Eigen::Matrix<double, NX + NU, 1> g = Eigen::Matrix<double, NX + NU, 1>::Zero();
  Eigen::Matrix<double, NX + NU, NX + NU> H = Eigen::Matrix<double, NX + NU, NX + NU>::Zero();
};

template <int NX, int NU>
struct Linearization {
  Eigen::Matrix<double, NX, NX> A;
  Eigen::Matrix<double, NX, NU> B;
};

/// What the solver needs from a discrete-time optimal control problem.
///   expand(xs, us, kModel) -> PSD model Hessians used by the forward solve
///   expand(xs, us, kExact) -> exact cost Hessians used for differentiation
///   costate_hessian(x, u, lambda) -> sum_i lambda_i * d^2 f_i / d(x,u)^2
///   state_difference(a, b) -> a - b on the state manifold (angle wrapping)
template <class P>
concept Problem = requires(const P& p, const typename P::StateV& x, const typename P::ControlV& u,
                           const std::vector<typename P::StateV>& xs, const std::vector<typename P::ControlV>& us) {
  { P::kNx } -> std::convertible_to<int>;
  { P::kNu } -> std::convertible_to<int>;
  { p.step(x, u) } -> std::convertible_to<typename P::StateV>;
  { p.linearize(x, u) } -> std::convertible_to<Linearization<P::kNx, P::kNu>>;
  { p.cost(xs, us) } -> std::convertible_to<double>;
  { p.expand(xs, us, Curvature::kModel) } -> std::convertible_to<std::vector<Expansion<P::kNx, P::kNu>>>;
  { p.costate_hessian(x, u, x) } -> std::convertible_to<Eigen::Matrix<double, P::kNx + P::kNu, P::kNx + P::kNu>>;
  { p.state_difference(x, x) } -> std::convertible_to<typename P::StateV>;
  { p.lower() } -> std::convertible_to<typename P::ControlV>;
  { p.upper() } -> std::convertible_to<typename P::ControlV>;
};

struct Config {
  int max_iters = 5;
  double conv_threshold = 0.05;
  int line_search_max_tries = 5;
  double line_search_shrink = 5.0;
  // When positive, iterations also stop once the reduced gradient norm drops
  // below this value, and steps whose cost change is at roundoff level are
  // accepted if they reduce the reduced gradient norm.
  double stationarity_tol = 0.0;
};

template <int NU>
using ActiveSet = std::array<bool, NU>;

template <int NX, int NU>
struct Solution {
  std::vector<Eigen::Matrix<double, NX, 1>> xs;
  std::vector<Eigen::Matrix<double, NU, 1>> us;
  bool converged = false;
  int iterations = 0;
  std::vector<double> cost_trace;       // cost of the iterate after each iteration, [0] = initialization
  std::vector<ActiveSet<NU>> active;    // clamp flags of the sweep at the final iterate
  bool active_set_changed = false;      // final sweep differs from the preceding one
};

namespace detail {

template <int NX, int NU>
struct Gains {
  std::vector<Eigen::Matrix<double, NU, 1>> k;
  std::vector<Eigen::Matrix<double, NU, NX>> K;
  std::vector<ActiveSet<NU>> active;
  bool ok = true;
  double min_curvature = std::numeric_limits<double>::infinity();  // smallest eigenvalue of the free Q_uu blocks
};

/// Riccati sweep. In box mode, feedforward steps are clamped so that
/// u_bar + k lies in [lo, hi]; clamped dimensions get zero feedback rows and the
/// remaining dimensions are re-solved given the clamped values. In fixed mode the
/// given active set is frozen with zero steps.
template <int NX, int NU>
Gains<NX, NU> riccati(const std::vector<Expansion<NX, NU>>& ex, const std::vector<Linearization<NX, NU>>& lin,
                      const std::vector<Eigen::Matrix<double, NU, 1>>* u_bar, const Eigen::Matrix<double, NU, 1>* lo,
                      const Eigen::Matrix<double, NU, 1>* hi, const std::vector<ActiveSet<NU>>* fixed) {
  using VX = Eigen::Matrix<double, NX, 1>;
  using VU = Eigen::Matrix<double, NU, 1>;
  using MXX = Eigen::Matrix<double, NX, NX>;
  using MUU = Eigen::Matrix<double, NU, NU>;
  using MUX = Eigen::Matrix<double, NU, NX>;
  const std::size_t T = lin.size();
  Gains<NX, NU> out;
  out.k.resize(T);
  out.K.resize(T);
  out.active.resize(T);
  VX Vx = ex[T].g.template head<NX>();
  MXX Vxx = ex[T].H.template topLeftCorner<NX, NX>();
  for (std::size_t tt = T; tt-- > 0;) {
    const auto& A = lin[tt].A;
    const auto& B = lin[tt].B;
    const VX Qx = ex[tt].g.template head<NX>() + A.transpose() * Vx;
    const VU Qu = ex[tt].g.template tail<NU>() + B.transpose() * Vx;
    const MXX Qxx = ex[tt].H.template topLeftCorner<NX, NX>() + A.transpose() * Vxx * A;
    MUU Quu = ex[tt].H.template bottomRightCorner<NU, NU>() + B.transpose() * Vxx * B;
    Quu = 0.5 * (Quu + Quu.transpose()).eval();
    const MUX Qux = ex[tt].H.template bottomLeftCorner<NU, NX>() + B.transpose() * Vxx * A;

    ActiveSet<NU> clamped{};
    VU k = VU::Zero();
    MUX K = MUX::Zero();
    if (fixed) clamped = (*fixed)[tt];
    for (int pass = 0; pass <= NU; ++pass) {
      std::vector<int> free_idx;
      for (int i = 0; i < NU; ++i)
        if (!clamped[i]) free_idx.push_back(i);
      const int nf = static_cast<int>(free_idx.size());
      for (int i = 0; i < NU; ++i) {
        if (!clamped[i]) continue;
        K.row(i).setZero();
        if (fixed) {
          k[i] = 0.0;
        }
      }
      if (nf > 0) {
        Eigen::MatrixXd Qff(nf, nf);
        Eigen::VectorXd rhs(nf);
        Eigen::MatrixXd rhsK(nf, NX);
        for (int a = 0; a < nf; ++a) {
          rhs[a] = Qu[free_idx[a]];
          rhsK.row(a) = Qux.row(free_idx[a]);
          for (int b = 0; b < nf; ++b) Qff(a, b) = Quu(free_idx[a], free_idx[b]);
          for (int c = 0; c < NU; ++c)
            if (clamped[c]) rhs[a] += Quu(free_idx[a], c) * k[c];
        }
        if (fixed) {
          Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Qff, Eigen::EigenvaluesOnly);
          out.min_curvature = std::min(out.min_curvature, es.eigenvalues()[0]);
        }
        Eigen::LLT<Eigen::MatrixXd> llt(Qff);
        if (llt.info() != Eigen::Success) {
          out.ok = false;
          return out;
        }
        const Eigen::VectorXd kf = -llt.solve(rhs);
        const Eigen::MatrixXd Kf = -llt.solve(rhsK);
        for (int a = 0; a < nf; ++a) {
          k[free_idx[a]] = kf[a];
          K.row(free_idx[a]) = Kf.row(a);
        }
      }
      if (fixed || u_bar == nullptr) break;
      bool new_clamp = false;
      for (int i = 0; i < NU; ++i) {
        if (clamped[i]) continue;
        const double target = (*u_bar)[tt][i] + k[i];
        if (target > (*hi)[i] || target < (*lo)[i]) {
          clamped[i] = true;
          k[i] = std::clamp(target, (*lo)[i], (*hi)[i]) - (*u_bar)[tt][i];
          new_clamp = true;
        }
      }
      if (!new_clamp) break;
    }
    out.k[tt] = k;
    out.K[tt] = K;
    out.active[tt] = clamped;
    Vx = Qx + K.transpose() * Quu * k + K.transpose() * Qu + Qux.transpose() * k;
    Vxx = Qxx + K.transpose() * Quu * K + K.transpose() * Qux + Qux.transpose() * K;
    Vxx = 0.5 * (Vxx + Vxx.transpose()).eval();
  }
  return out;
}

}  // namespace detail

template <Problem P>
std::vector<typename P::StateV> rollout(const P& p, const typename P::StateV& x0,
                                        const std::vector<typename P::ControlV>& us) {
  std::vector<typename P::StateV> xs;
  xs.reserve(us.size() + 1);
  xs.push_back(x0);
  for (const auto& u : us) xs.push_back(p.step(xs.back(), u));
  return xs;
}

template <Problem P>
std::vector<Linearization<P::kNx, P::kNu>> linearize_all(const P& p, const std::vector<typename P::StateV>& xs,
                                                        const std::vector<typename P::ControlV>& us);

/// Norm of dJ/du (controls only) via the costate recursion, with components of
/// controls sitting on a bound and pushing outward removed.
template <Problem P>
double reduced_gradient_norm(const P& p, const std::vector<typename P::StateV>& xs,
                             const std::vector<typename P::ControlV>& us) {
  constexpr int NX = P::kNx;
  constexpr int NU = P::kNu;
  const auto ex = p.expand(xs, us, Curvature::kModel);
  const auto lin = linearize_all(p, xs, us);
  const auto lo = p.lower();
  const auto hi = p.upper();
  Eigen::Matrix<double, NX, 1> lambda = ex[us.size()].g.template head<NX>();
  double n2 = 0.0;
  for (std::size_t t = us.size(); t-- > 0;) {
    Eigen::Matrix<double, NU, 1> gu = ex[t].g.template tail<NU>() + lin[t].B.transpose() * lambda;
    for (int i = 0; i < NU; ++i) {
      if ((us[t][i] >= hi[i] && gu[i] < 0.0) || (us[t][i] <= lo[i] && gu[i] > 0.0)) gu[i] = 0.0;
    }
    n2 += gu.squaredNorm();
    lambda = ex[t].g.template head<NX>() + lin[t].A.transpose() * lambda;
  }
  return std::sqrt(n2);
}

template <Problem P>
std::vector<Linearization<P::kNx, P::kNu>> linearize_all(const P& p, const std::vector<typename P::StateV>& xs,
                                                        const std::vector<typename P::ControlV>& us) {
  std::vector<Linearization<P::kNx, P::kNu>> lin;
  lin.reserve(us.size());
  for (std::size_t t = 0; t < us.size(); ++t) lin.push_back(p.linearize(xs[t], us[t]));
  return lin;
}

/// Box-constrained iLQR. Each iteration solves the LQR model around the current
/// iterate and line-searches along the resulting control change: scale 1, then
/// divided by `line_search_shrink` for up to `line_search_max_tries` tries,
/// accepting the first strict cost decrease. Converged when the stacked
/// control change of an iteration is below `conv_threshold`.
template <Problem P>
Solution<P::kNx, P::kNu> solve(const P& p, const typename P::StateV& x0, std::vector<typename P::ControlV> us,
                               const Config& cfg) {
  constexpr int NX = P::kNx;
  constexpr int NU = P::kNu;
  using VU = typename P::ControlV;
  const VU lo = p.lower();
  const VU hi = p.upper();
  for (auto& u : us) u = u.cwiseMax(lo).cwiseMin(hi);

  Solution<NX, NU> sol;
  sol.us = std::move(us);
  sol.xs = rollout(p, x0, sol.us);
  double J = p.cost(sol.xs, sol.us);
  sol.cost_trace.push_back(J);

  const bool use_stationarity = cfg.stationarity_tol > 0.0;
  double grad_norm = use_stationarity ? reduced_gradient_norm(p, sol.xs, sol.us) : 0.0;
  std::vector<ActiveSet<NU>> prev_active;
  for (int iter = 1; iter <= cfg.max_iters; ++iter) {
    if (use_stationarity && grad_norm < cfg.stationarity_tol) {
      sol.converged = true;
      break;
    }
    const auto ex = p.expand(sol.xs, sol.us, Curvature::kModel);
    const auto lin = linearize_all(p, sol.xs, sol.us);
    const auto gains = detail::riccati<NX, NU>(ex, lin, &sol.us, &lo, &hi, nullptr);
    sol.iterations = iter;
    if (!gains.ok) break;
    prev_active = gains.active;

    double scale = 1.0;
    bool accepted = false;
    std::vector<typename P::StateV> xs_new;
    std::vector<VU> us_new(sol.us.size());
    double J_new = J;
    for (int attempt = 0; attempt < cfg.line_search_max_tries; ++attempt) {
      xs_new.assign(1, x0);
      for (std::size_t t = 0; t < sol.us.size(); ++t) {
        VU u = sol.us[t] + scale * gains.k[t] + gains.K[t] * p.state_difference(xs_new[t], sol.xs[t]);
        us_new[t] = u.cwiseMax(lo).cwiseMin(hi);
        xs_new.push_back(p.step(xs_new[t], us_new[t]));
      }
      J_new = p.cost(xs_new, us_new);
      if (std::isfinite(J_new) && J_new < J) {
        accepted = true;
        break;
      }
      if (use_stationarity && std::isfinite(J_new) && J_new - J <= 1e-12 * std::max(1.0, std::abs(J))) {
        const double gn = reduced_gradient_norm(p, xs_new, us_new);
        if (gn < grad_norm) {
          accepted = true;
          break;
        }
      }
      scale /= cfg.line_search_shrink;
    }
    double change = 0.0;
    if (accepted) {
      for (std::size_t t = 0; t < sol.us.size(); ++t) change += (us_new[t] - sol.us[t]).squaredNorm();
      change = std::sqrt(change);
      sol.us = std::move(us_new);
      sol.xs = std::move(xs_new);
      J = J_new;
      if (use_stationarity) grad_norm = reduced_gradient_norm(p, sol.xs, sol.us);
    }
    sol.cost_trace.push_back(J);
    if (change < cfg.conv_threshold) {
      sol.converged = true;
      break;
    }
  }

  // Active set at the returned iterate.
  const auto ex = p.expand(sol.xs, sol.us, Curvature::kModel);
  const auto gains = detail::riccati<NX, NU>(ex, linearize_all(p, sol.xs, sol.us), &sol.us, &lo, &hi, nullptr);
  sol.active = gains.active;
  if (!gains.ok) sol.converged = false;
  sol.active_set_changed = !prev_active.empty() && prev_active != sol.active;
  return sol;
}

/// Trajectory-space sensitivity of a converged solution to a loss gradient.
/// Solves the LQR defined by the exact Hessian of the Lagrangian at the
/// solution (cost curvature plus costate-weighted dynamics curvature), with
/// `dl_dtau[t]` as linear terms and clamped controls frozen. The returned
/// direction dtau satisfies dL/dtheta = sum_t dtau_t . d(grad_tau cost_t)/dtheta.
/// Empty when the reduced Hessian is not positive definite or its smallest
/// per-step control curvature is below `min_curvature`. With
/// Curvature::kModel the final Gauss-Newton quadratization is used instead.
template <Problem P>
std::optional<std::vector<Eigen::Matrix<double, P::kNx + P::kNu, 1>>> adjoint(
    const P& p, const Solution<P::kNx, P::kNu>& sol,
    const std::vector<Eigen::Matrix<double, P::kNx + P::kNu, 1>>& dl_dtau, Curvature curvature = Curvature::kExact,
    double min_curvature = 0.0) {
  constexpr int NX = P::kNx;
  constexpr int NU = P::kNu;
  using VX = Eigen::Matrix<double, NX, 1>;
  using V = Eigen::Matrix<double, NX + NU, 1>;
  const std::size_t T = sol.us.size();
  if (dl_dtau.size() != T + 1) throw DomainError("ilqr::adjoint: gradient length must be horizon + 1");

  auto ex = p.expand(sol.xs, sol.us, curvature);
  const auto lin = linearize_all(p, sol.xs, sol.us);
  if (curvature == Curvature::kExact) {
    // Costates: lambda_T = l_x(T), lambda_t = l_x(t) + A_t^T lambda_{t+1}.
    std::vector<VX> lambda(T + 1);
    lambda[T] = ex[T].g.template head<NX>();
    for (std::size_t t = T; t-- > 0;) lambda[t] = ex[t].g.template head<NX>() + lin[t].A.transpose() * lambda[t + 1];
    for (std::size_t t = 0; t < T; ++t) ex[t].H += p.costate_hessian(sol.xs[t], sol.us[t], lambda[t + 1]);
  }
  for (std::size_t t = 0; t <= T; ++t) ex[t].g = dl_dtau[t];
  ex[T].H.template bottomRightCorner<NU, NU>().setIdentity();
  ex[T].g.template tail<NU>().setZero();

  const auto gains = detail::riccati<NX, NU>(ex, lin, nullptr, nullptr, nullptr, &sol.active);
  if (!gains.ok || gains.min_curvature < min_curvature) return std::nullopt;
  std::vector<V> dtau(T + 1, V::Zero());
  VX dx = VX::Zero();
  for (std::size_t t = 0; t < T; ++t) {
    const Eigen::Matrix<double, NU, 1> du = gains.k[t] + gains.K[t] * dx;
    dtau[t].template head<NX>() = dx;
    dtau[t].template tail<NU>() = du;
    dx = lin[t].A * dx + lin[t].B * du;
  }
  dtau[T].template head<NX>() = dx;
  return dtau;
}

}  // namespace diffstack::ilqr
