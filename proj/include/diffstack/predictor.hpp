#pragma once

#include <random>
#include <vector>

#include "diffstack/cost.hpp"
#include "diffstack/dynamics.hpp"

namespace diffstack {

/// Past states of one agent, oldest first; the last entry is the current state.
struct AgentHistory {
  std::vector<State> states;
  bool is_ego = false;
};

struct PredictorConfig {
  int modes = 4;
  int horizon = 6;        // future steps T
  int history_steps = 9;  // H / dt + 1
  int hidden = 64;
  double dt = 0.5;
  // Mean controls are scale * tanh(raw) per (heading_rate, accel).
  double heading_rate_scale = 1.0;
  double accel_scale = 4.0;
  // Log-variances are bounded as b * tanh(raw / b).
  double log_var_bound = 4.0;

  int input_dim() const { return 4 * history_steps + 1 + 5; }
  int output_dim() const { return modes + 2 * modes * horizon + modes * horizon; }
  friend bool operator==(const PredictorConfig&, const PredictorConfig&) = default;
};

/// Two tanh hidden layers followed by a linear head, stored as one flat vector
/// so optimizers and checkpoints treat all weights uniformly.
struct PredictorParams {
  PredictorConfig cfg;
  Eigen::VectorXd theta;

  static std::size_t size_for(const PredictorConfig& c) {
    const std::size_t d = c.input_dim(), h = c.hidden, o = c.output_dim();
    return h * d + h + h * h + h + o * h + o;
  }

  /// Scaled-uniform initialization; the output layer starts small so the
  /// initial prediction is close to constant velocity with unit variance.
  static PredictorParams init(const PredictorConfig& c, std::uint64_t seed) {
    PredictorParams p;
    p.cfg = c;
    p.theta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(size_for(c)));
    std::mt19937_64 rng(seed);
    auto fill = [&](Eigen::Ref<Eigen::VectorXd> v, double s) {
      std::uniform_real_distribution<double> U(-s, s);
      for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = U(rng);
    };
    auto v = p.views();
    fill(v.W1.reshaped(), std::sqrt(3.0 / c.input_dim()));
    fill(v.W2.reshaped(), std::sqrt(3.0 / c.hidden));
    fill(v.Wo.reshaped(), 0.01);
    return p;
  }

  struct Views {
    Eigen::Map<Eigen::MatrixXd> W1;
    Eigen::Map<Eigen::VectorXd> b1;
    Eigen::Map<Eigen::MatrixXd> W2;
    Eigen::Map<Eigen::VectorXd> b2;
    Eigen::Map<Eigen::MatrixXd> Wo;
    Eigen::Map<Eigen::VectorXd> bo;
  };
  static Views views_of(Eigen::VectorXd& flat, const PredictorConfig& c) {
    const int d = c.input_dim(), h = c.hidden, o = c.output_dim();
    double* q = flat.data();
    Views v{{q, h, d}, {q + h * d, h}, {q + h * d + h, h, h}, {q + h * d + h + h * h, h},
            {q + h * d + 2 * h + h * h, o, h}, {q + h * d + 2 * h + h * h + o * h, o}};
    return v;
  }
  Views views() { return views_of(theta, cfg); }
  Views views() const { return views_of(const_cast<Eigen::VectorXd&>(theta), cfg); }
};

/// K-mode prediction of one agent over t = 1..T, with the forward activations
/// kept for the backward pass.
struct TrajectoryPrediction {
  std::vector<Trajectory> modes;  // rollouts from the agent's current state
  std::vector<double> probs;
  std::vector<std::vector<double>> pos_var;  // [k][t-1]

  // tape
  Eigen::VectorXd input, h1, h2, raw;

  int num_modes() const { return static_cast<int>(modes.size()); }
  int horizon() const { return modes.empty() ? 0 : modes.front().horizon(); }

  /// Mode positions for the cost's collision term.
  MixtureFuture mixture(bool differentiable = true) const {
    MixtureFuture f;
    f.differentiable = differentiable;
    for (const Trajectory& m : modes) {
      std::vector<Vec2> pts;
      for (std::size_t t = 1; t < m.states.size(); ++t) pts.push_back(m.states[t].position());
      f.means.push_back(std::move(pts));
    }
    f.probs = probs;
    return f;
  }
};

/// Upstream gradients w.r.t. the prediction outputs. Any block may be left
/// empty (treated as zero).
struct PredictionUpstream {
  std::vector<std::vector<Vec2>> d_positions;  // [k][t-1]
  std::vector<double> d_probs;
  std::vector<double> d_logits;
  std::vector<std::vector<double>> d_log_var;  // [k][t-1]

  static PredictionUpstream from(const PredictionGrad& g) {
    PredictionUpstream u;
    u.d_positions = g.d_means;
    u.d_probs = g.d_probs;
    return u;
  }
  PredictionUpstream& add(const PredictionUpstream& o, double scale = 1.0);
};

namespace predictor {

namespace detail {

inline void accumulate(std::vector<double>& a, const std::vector<double>& b, double s) {
  if (b.empty()) return;
  if (a.empty()) a.assign(b.size(), 0.0);
  if (a.size() != b.size()) throw DomainError("predictor: upstream shape mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += s * b[i];
}

template <class T>
void accumulate(std::vector<std::vector<T>>& a, const std::vector<std::vector<T>>& b, double s) {
  if (b.empty()) return;
  if (a.empty()) {
    a = b;
    for (auto& r : a)
      for (auto& x : r) x = T(s * x);
    return;
  }
  if (a.size() != b.size()) throw DomainError("predictor: upstream shape mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size()) throw DomainError("predictor: upstream shape mismatch");
    for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += s * b[i][j];
  }
}

inline int logit_index(const PredictorConfig&, int k) { return k; }
inline int control_index(const PredictorConfig& c, int k, int t, int j) { return c.modes + 2 * (k * c.horizon + t) + j; }
inline int log_var_index(const PredictorConfig& c, int k, int t) {
  return c.modes + 2 * c.modes * c.horizon + k * c.horizon + t;
}

}  // namespace detail

/// Relative features of the target agent's history, expressed in its current frame.
inline Eigen::VectorXd features(const PredictorConfig& cfg, const AgentHistory& target, const State& ego_now) {
  if (static_cast<int>(target.states.size()) != cfg.history_steps)
    throw DomainError("predictor: history has " + std::to_string(target.states.size()) + " states, expected " +
                      std::to_string(cfg.history_steps));
  const State& now = target.states.back();
  const double c = std::cos(now.heading), s = std::sin(now.heading);
  auto to_local = [&](const Vec2& p) {
    const Vec2 d = p - now.position();
    return Vec2(c * d.x() + s * d.y(), -s * d.x() + c * d.y());
  };
  Eigen::VectorXd x(cfg.input_dim());
  int i = 0;
  for (const State& st : target.states) {
    if (!st.finite()) throw DomainError("predictor: non-finite history state");
    const Vec2 l = to_local(st.position());
    x[i++] = l.x() / 10.0;
    x[i++] = l.y() / 10.0;
    x[i++] = wrap_angle(st.heading - now.heading);
    x[i++] = st.v / 10.0;
  }
  x[i++] = target.is_ego ? 1.0 : 0.0;
  const Vec2 e = to_local(ego_now.position());
  const double dh = wrap_angle(ego_now.heading - now.heading);
  x[i++] = e.x() / 20.0;
  x[i++] = e.y() / 20.0;
  x[i++] = std::cos(dh);
  x[i++] = std::sin(dh);
  x[i++] = ego_now.v / 10.0;
  return x;
}

inline TrajectoryPrediction predict(const PredictorParams& params, const AgentHistory& target, const State& ego_now) {
  const PredictorConfig& cfg = params.cfg;
  const auto v = params.views();
  TrajectoryPrediction out;
  out.input = features(cfg, target, ego_now);
  out.h1 = (v.W1 * out.input + v.b1).array().tanh();
  out.h2 = (v.W2 * out.h1 + v.b2).array().tanh();
  out.raw = v.Wo * out.h2 + v.bo;

  const int K = cfg.modes, T = cfg.horizon;
  const double m = out.raw.head(K).maxCoeff();
  double z = 0.0;
  out.probs.resize(K);
  for (int k = 0; k < K; ++k) z += out.probs[k] = std::exp(out.raw[k] - m);
  for (double& p : out.probs) p /= z;

  const State& s0 = target.states.back();
  for (int k = 0; k < K; ++k) {
    std::vector<Control> us(T);
    std::vector<double> var(T);
    for (int t = 0; t < T; ++t) {
      us[t].heading_rate = cfg.heading_rate_scale * std::tanh(out.raw[detail::control_index(cfg, k, t, 0)]);
      us[t].accel = cfg.accel_scale * std::tanh(out.raw[detail::control_index(cfg, k, t, 1)]);
      const double b = cfg.log_var_bound;
      var[t] = std::exp(b * std::tanh(out.raw[detail::log_var_index(cfg, k, t)] / b));
    }
    out.modes.push_back(dynamics::rollout(s0, us, cfg.dt));
    out.pos_var.push_back(std::move(var));
  }
  return out;
}

/// Gradient of `loss(prediction)` w.r.t. the flat parameter vector, added into `grad`.
inline void accumulate_grads(const PredictorParams& params, const TrajectoryPrediction& pred,
                             const PredictionUpstream& up, Eigen::VectorXd& grad) {
  const PredictorConfig& cfg = params.cfg;
  const int K = cfg.modes, T = cfg.horizon;
  if (grad.size() != params.theta.size()) throw DomainError("predictor: gradient accumulator has wrong size");
  if (pred.num_modes() != K || pred.horizon() != T) throw DomainError("predictor: prediction shape mismatch");
  auto check = [&](bool ok, const char* what) {
    if (!ok) throw DomainError(std::string("predictor: upstream ") + what + " has wrong shape");
  };
  check(up.d_positions.empty() || up.d_positions.size() == static_cast<std::size_t>(K), "positions");
  for (const auto& r : up.d_positions) check(r.size() == static_cast<std::size_t>(T), "positions");
  check(up.d_probs.empty() || up.d_probs.size() == static_cast<std::size_t>(K), "probs");
  check(up.d_logits.empty() || up.d_logits.size() == static_cast<std::size_t>(K), "logits");
  check(up.d_log_var.empty() || up.d_log_var.size() == static_cast<std::size_t>(K), "log-variances");
  for (const auto& r : up.d_log_var) check(r.size() == static_cast<std::size_t>(T), "log-variances");

  Eigen::VectorXd d_raw = Eigen::VectorXd::Zero(cfg.output_dim());
  // mode logits through the softmax
  if (!up.d_probs.empty()) {
    double dot = 0.0;
    for (int k = 0; k < K; ++k) dot += pred.probs[k] * up.d_probs[k];
    for (int k = 0; k < K; ++k) d_raw[k] += pred.probs[k] * (up.d_probs[k] - dot);
  }
  if (!up.d_logits.empty())
    for (int k = 0; k < K; ++k) d_raw[k] += up.d_logits[k];
  // positions back through the rollout, then through scale * tanh
  if (!up.d_positions.empty()) {
    for (int k = 0; k < K; ++k) {
      const Trajectory& tr = pred.modes[k];
      StateVec lambda = StateVec::Zero();
      for (int t = T; t >= 1; --t) {
        lambda.head<2>() += up.d_positions[k][t - 1];
        const auto j = dynamics::jacobians(tr.states[t - 1], tr.controls[t - 1], tr.dt);
        const ControlVec du = j.B.transpose() * lambda;
        const double th = std::tanh(pred.raw[detail::control_index(cfg, k, t - 1, 0)]);
        const double ta = std::tanh(pred.raw[detail::control_index(cfg, k, t - 1, 1)]);
        d_raw[detail::control_index(cfg, k, t - 1, 0)] += du[0] * cfg.heading_rate_scale * (1.0 - th * th);
        d_raw[detail::control_index(cfg, k, t - 1, 1)] += du[1] * cfg.accel_scale * (1.0 - ta * ta);
        lambda = j.A.transpose() * lambda;
      }
    }
  }
  if (!up.d_log_var.empty()) {
    for (int k = 0; k < K; ++k)
      for (int t = 0; t < T; ++t) {
        const int i = detail::log_var_index(cfg, k, t);
        const double th = std::tanh(pred.raw[i] / cfg.log_var_bound);
        d_raw[i] += up.d_log_var[k][t] * (1.0 - th * th);
      }
  }

  const auto v = params.views();
  Eigen::VectorXd g = grad;  // work on a copy so views can map into it
  auto gv = PredictorParams::views_of(g, cfg);
  gv.Wo.noalias() += d_raw * pred.h2.transpose();
  gv.bo += d_raw;
  const Eigen::VectorXd d_a2 = (v.Wo.transpose() * d_raw).array() * (1.0 - pred.h2.array().square());
  gv.W2.noalias() += d_a2 * pred.h1.transpose();
  gv.b2 += d_a2;
  const Eigen::VectorXd d_a1 = (v.W2.transpose() * d_a2).array() * (1.0 - pred.h1.array().square());
  gv.W1.noalias() += d_a1 * pred.input.transpose();
  gv.b1 += d_a1;
  grad = std::move(g);
}

struct NllResult {
  double value = 0.0;
  PredictionUpstream grad;  // d_positions, d_logits, d_log_var
};

/// Mean over timesteps of -log sum_k pi_k N(gt(t); mode_k(t), var_k(t) I).
inline NllResult nll(const TrajectoryPrediction& pred, const std::vector<Vec2>& gt_future) {
  const int K = pred.num_modes(), T = pred.horizon();
  if (static_cast<int>(gt_future.size()) != T) throw DomainError("nll: horizon mismatch");
  NllResult r;
  r.grad.d_positions.assign(K, std::vector<Vec2>(T, Vec2::Zero()));
  r.grad.d_logits.assign(K, 0.0);
  r.grad.d_log_var.assign(K, std::vector<double>(T, 0.0));
  std::vector<double> l(K);
  for (int t = 0; t < T; ++t) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) {
      const double var = pred.pos_var[k][t];
      const Vec2 d = gt_future[t] - pred.modes[k].states[t + 1].position();
      l[k] = std::log(pred.probs[k]) - std::log(2.0 * kPi * var) - d.squaredNorm() / (2.0 * var);
      mx = std::max(mx, l[k]);
    }
    double z = 0.0;
    for (int k = 0; k < K; ++k) z += std::exp(l[k] - mx);
    const double lse = mx + std::log(z);
    r.value -= lse / T;
    for (int k = 0; k < K; ++k) {
      const double resp = std::exp(l[k] - lse);
      const double var = pred.pos_var[k][t];
      const Vec2 d = gt_future[t] - pred.modes[k].states[t + 1].position();
      r.grad.d_positions[k][t] = -resp * d / var / T;
      r.grad.d_log_var[k][t] = -resp * (-1.0 + d.squaredNorm() / (2.0 * var)) / T;
      r.grad.d_logits[k] += (pred.probs[k] - resp) / T;
    }
  }
  return r;
}

/// Index of the most likely mode; ties go to the lowest index.
inline int most_likely_mode(const TrajectoryPrediction& pred) {
  int best = 0;
  for (int k = 1; k < pred.num_modes(); ++k)
    if (pred.probs[k] > pred.probs[best]) best = k;
  return best;
}

/// Mean displacement of the most likely mode from the ground truth.
inline double ade(const TrajectoryPrediction& pred, const std::vector<Vec2>& gt_future) {
  const int T = pred.horizon();
  if (static_cast<int>(gt_future.size()) != T) throw DomainError("ade: horizon mismatch");
  const Trajectory& m = pred.modes[most_likely_mode(pred)];
  double s = 0.0;
  for (int t = 0; t < T; ++t) s += (gt_future[t] - m.states[t + 1].position()).norm();
  return s / T;
}

}  // namespace predictor

inline PredictionUpstream& PredictionUpstream::add(const PredictionUpstream& o, double scale) {
  predictor::detail::accumulate(d_positions, o.d_positions, scale);
  predictor::detail::accumulate(d_probs, o.d_probs, scale);
  predictor::detail::accumulate(d_logits, o.d_logits, scale);
  predictor::detail::accumulate(d_log_var, o.d_log_var, scale);
  return *this;
}

}  // namespace diffstack
