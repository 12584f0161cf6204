#pragma once

#include <span>
#include <vector>

#include "diffstack/common.hpp"

namespace diffstack {

using StateVec = Eigen::Vector4d;
using ControlVec = Eigen::Vector2d;
using StateJacobian = Eigen::Matrix4d;
using ControlJacobian = Eigen::Matrix<double, 4, 2>;

/// Kinematic state of a vehicle: position, heading in (-pi, pi], speed.
struct State {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;
  double v = 0.0;

  Vec2 position() const { return {x, y}; }
  StateVec vec() const { return {x, y, heading, v}; }
  static State from_vec(const StateVec& s) { return {s[0], s[1], s[2], s[3]}; }
  bool finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(heading) && std::isfinite(v);
  }
  friend bool operator==(const State&, const State&) = default;
};

struct Control {
  double heading_rate = 0.0;
  double accel = 0.0;

  ControlVec vec() const { return {heading_rate, accel}; }
  static Control from_vec(const ControlVec& u) { return {u[0], u[1]}; }
  bool finite() const { return std::isfinite(heading_rate) && std::isfinite(accel); }
  friend bool operator==(const Control&, const Control&) = default;
};

struct ControlLimits {
  Control lower{-1.0, -4.0};
  Control upper{1.0, 3.0};

  bool contains(const Control& u, double tol = 0.0) const {
    return u.heading_rate >= lower.heading_rate - tol && u.heading_rate <= upper.heading_rate + tol &&
           u.accel >= lower.accel - tol && u.accel <= upper.accel + tol;
  }
  ControlVec lower_vec() const { return lower.vec(); }
  ControlVec upper_vec() const { return upper.vec(); }
  Control clamp(const Control& u) const {
    return {std::clamp(u.heading_rate, lower.heading_rate, upper.heading_rate),
            std::clamp(u.accel, lower.accel, upper.accel)};
  }
};

/// States has one more entry than controls; states[t + 1] == step(states[t], controls[t], dt).
struct Trajectory {
  std::vector<State> states;
  std::vector<Control> controls;
  double dt = 0.5;

  int horizon() const { return static_cast<int>(controls.size()); }
  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

namespace dynamics {

/// Forward-Euler dynamically-extended unicycle. Position advances with the
/// pre-update heading and speed.
inline State step(const State& s, const Control& u, double dt) {
  if (!(dt > 0.0) || !std::isfinite(dt)) throw DomainError("dynamics::step: dt must be positive and finite");
  if (!s.finite() || !u.finite()) throw DomainError("dynamics::step: non-finite state or control");
  const double c = std::cos(s.heading);
  const double sn = std::sin(s.heading);
  return {s.x + s.v * c * dt, s.y + s.v * sn * dt, wrap_angle(s.heading + u.heading_rate * dt),
          s.v + u.accel * dt};
}

struct Jacobians {
  StateJacobian A;
  ControlJacobian B;
};

inline Jacobians jacobians(const State& s, const Control& u, double dt) {
  if (!(dt > 0.0) || !s.finite() || !u.finite()) throw DomainError("dynamics::jacobians: invalid input");
  const double c = std::cos(s.heading);
  const double sn = std::sin(s.heading);
  Jacobians j;
  j.A.setIdentity();
  j.A(0, 2) = -s.v * sn * dt;
  j.A(0, 3) = c * dt;
  j.A(1, 2) = s.v * c * dt;
  j.A(1, 3) = sn * dt;
  j.B.setZero();
  j.B(2, 0) = dt;
  j.B(3, 1) = dt;
  return j;
}

/// Contraction of the dynamics second derivatives with a costate:
/// sum_i lambda_i * d^2 step_i / d(s,u)^2, ordered (x, y, heading, v, heading_rate, accel).
inline Eigen::Matrix<double, 6, 6> costate_hessian(const State& s, const StateVec& lambda, double dt) {
  const double c = std::cos(s.heading);
  const double sn = std::sin(s.heading);
  Eigen::Matrix<double, 6, 6> h = Eigen::Matrix<double, 6, 6>::Zero();
  h(2, 2) = lambda[0] * (-s.v * c * dt) + lambda[1] * (-s.v * sn * dt);
  h(2, 3) = lambda[0] * (-sn * dt) + lambda[1] * (c * dt);
  h(3, 2) = h(2, 3);
  return h;
}

inline Trajectory rollout(const State& s0, std::span<const Control> controls, double dt) {
  if (controls.empty()) throw DomainError("dynamics::rollout: empty control sequence");
  Trajectory traj;
  traj.dt = dt;
  traj.controls.assign(controls.begin(), controls.end());
  traj.states.reserve(controls.size() + 1);
  traj.states.push_back(s0);
  for (const Control& u : controls) traj.states.push_back(step(traj.states.back(), u, dt));
  return traj;
}

inline bool dynamically_consistent(const Trajectory& traj) {
  if (traj.states.size() != traj.controls.size() + 1) return false;
  for (std::size_t t = 0; t < traj.controls.size(); ++t) {
    if (!(step(traj.states[t], traj.controls[t], traj.dt) == traj.states[t + 1])) return false;
  }
  return true;
}

}  // namespace dynamics
}  // namespace diffstack
