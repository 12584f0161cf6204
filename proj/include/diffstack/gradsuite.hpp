#pragma once

#include <algorithm>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffstack/diffcheck.hpp"
#include "diffstack/training.hpp"

namespace diffstack::gradsuite {

/// Aggregate of one gradient target over randomized instances.
struct SuiteReport {
  std::string target;
  double tolerance = 0.0;
  int instances = 0;  // checked instances
  int passed = 0;
  int skipped = 0;    // non-converged or non-smooth (selection changed under the step)
  double max_relative_error = 0.0;
  double mean_relative_error = 0.0;
  std::vector<double> errors;

  bool ok(int min_instances) const { return instances >= min_instances && passed == instances; }

  void add(double err) {
    errors.push_back(err);
    ++instances;
    passed += err < tolerance;
    max_relative_error = std::max(max_relative_error, err);
    mean_relative_error += (err - mean_relative_error) / instances;
  }

  nlohmann::json to_json() const {
    return {{"target", target},
            {"tolerance", tolerance},
            {"instances", instances},
            {"passed", passed},
            {"skipped", skipped},
            {"max_relative_error", max_relative_error},
            {"mean_relative_error", mean_relative_error},
            {"relative_errors", errors}};
  }
};

inline const std::vector<std::string>& targets() {
  static const std::vector<std::string> t{"dynamics", "cost", "planner", "predictor", "controller", "end-to-end"};
  return t;
}

namespace detail {

inline Eigen::VectorXd flatten(const Trajectory& tr) {
  const int T = tr.horizon();
  Eigen::VectorXd z = Eigen::VectorXd::Zero(6 * (T + 1));
  for (int t = 0; t <= T; ++t) {
    z.segment<4>(6 * t) = tr.states[t].vec();
    if (t < T) z.segment<2>(6 * t + 4) = tr.controls[t].vec();
  }
  return z;
}

inline Trajectory unflatten(const Eigen::VectorXd& z, const Trajectory& like) {
  Trajectory tr = like;
  for (int t = 0; t <= like.horizon(); ++t) {
    tr.states[t] = State::from_vec(z.segment<4>(6 * t));
    if (t < like.horizon()) tr.controls[t] = Control::from_vec(z.segment<2>(6 * t + 4));
  }
  return tr;
}

/// Means then probabilities of one mixture, flattened.
inline Eigen::VectorXd pack_mixture(const MixtureFuture& f) {
  const int K = f.modes(), T = static_cast<int>(f.means[0].size());
  Eigen::VectorXd x(2 * K * T + K);
  for (int k = 0; k < K; ++k) {
    for (int t = 0; t < T; ++t) x.segment<2>(2 * (k * T + t)) = f.means[k][t];
    x[2 * K * T + k] = f.probs[k];
  }
  return x;
}

inline void unpack_mixture(MixtureFuture& f, const Eigen::VectorXd& x) {
  const int K = f.modes(), T = static_cast<int>(f.means[0].size());
  for (int k = 0; k < K; ++k) {
    for (int t = 0; t < T; ++t) f.means[k][t] = x.segment<2>(2 * (k * T + t));
    f.probs[k] = x[2 * K * T + k];
  }
}

inline Eigen::VectorXd pack_prediction_grad(const PredictionGrad& g) {
  const int K = static_cast<int>(g.d_means.size()), T = static_cast<int>(g.d_means[0].size());
  Eigen::VectorXd x(2 * K * T + K);
  for (int k = 0; k < K; ++k) {
    for (int t = 0; t < T; ++t) x.segment<2>(2 * (k * T + t)) = g.d_means[k][t];
    x[2 * K * T + k] = g.d_probs[k];
  }
  return x;
}

/// Mixture of K modes scattered around `path` (positions 1..T).
inline MixtureFuture mixture_near(std::mt19937_64& rng, const Trajectory& path, int K) {
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  MixtureFuture f;
  f.differentiable = true;
  double z = 0.0;
  for (int k = 0; k < K; ++k) {
    const Vec2 off(3.0 * U(rng), 1.5 * U(rng));
    std::vector<Vec2> m;
    for (int t = 1; t <= path.horizon(); ++t) m.push_back(path.states[t].position() + off + 0.3 * Vec2(U(rng), U(rng)));
    f.means.push_back(std::move(m));
    f.probs.push_back(std::exp(U(rng)));
    z += f.probs.back();
  }
  for (double& p : f.probs) p /= z;
  return f;
}

/// Cost weights with trainable components moved off the hand-tuned point.
inline CostWeights jittered_weights(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  CostWeights w = CostWeights::hand_tuned();
  for (int i = 1; i < kNumCostTerms; ++i) w.psi[i] += 0.4 * U(rng);
  w.alpha = 1.0 + 0.3 * U(rng);
  return w;
}

inline std::vector<Scenario> pool(int n, std::uint64_t seed) {
  ScenarioConfig c;
  c.family = "interactive";
  c.count = n;
  c.seed = seed;
  return stack::generate_certified(c);
}

inline PredictorParams jittered_predictor(const Scenario& sc, std::uint64_t seed, double scale) {
  PredictorParams p = PredictorParams::init(predictor_config_for(sc), seed);
  std::mt19937_64 rng(scenario::mix(seed));
  std::uniform_real_distribution<double> U(-scale, scale);
  for (Eigen::Index i = 0; i < p.theta.size(); ++i) p.theta[i] += U(rng);
  return p;
}

}  // namespace detail

/// Jacobians of one Euler step against central differences.
inline SuiteReport dynamics_suite(int n, std::uint64_t seed) {
  SuiteReport r{"dynamics", 1e-5};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  for (int i = 0; i < n; ++i) {
    const State s{10 * U(rng), 10 * U(rng), 3 * U(rng), 5 + 5 * U(rng)};
    const Control u{U(rng), 3 * U(rng)};
    const double dt = i % 2 ? 0.5 : 0.1;
    const auto j = dynamics::jacobians(s, u, dt);
    double err = 0.0;
    for (int row = 0; row < 4; ++row) {
      Eigen::VectorXd x0(6), g(6);
      x0 << s.vec(), u.vec();
      g << j.A.row(row).transpose(), j.B.row(row).transpose();
      const auto rep = diffcheck::check(
          [&](const Eigen::VectorXd& x) {
            return dynamics::step(State::from_vec(x.head<4>()), Control::from_vec(x.tail<2>()), dt).vec()[row];
          },
          g, x0, 1e-6, r.tolerance);
      err = std::max(err, rep.relative_error);
    }
    r.add(err);
  }
  return r;
}

/// Cost gradients w.r.t. state/control, (psi, alpha) and prediction outputs.
inline SuiteReport cost_suite(int n, std::uint64_t seed) {
  SuiteReport r{"cost", 1e-5};
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  const auto scs = detail::pool(n, seed);
  for (const Scenario& sc : scs) {
    Trajectory tr = sc.logged(sc.ego());
    for (Control& u : tr.controls) u = {std::clamp(u.heading_rate + 0.2 * U(rng), -1.0, 1.0), u.accel + U(rng)};
    tr = dynamics::rollout(tr.states[0], tr.controls, tr.dt);
    CostContext ctx = stack::hindsight_context(sc, stack::situation(sc));
    ctx.agents.insert(ctx.agents.begin(), detail::mixture_near(rng, tr, 1 + static_cast<int>(rng() % 4)));
    const CostWeights w = detail::jittered_weights(rng);

    const auto q = cost::quadratize(tr, ctx, w);
    Eigen::VectorXd gz(6 * (tr.horizon() + 1));
    for (int t = 0; t <= tr.horizon(); ++t) gz.segment<6>(6 * t) = q[t].gradient;
    const auto rz = diffcheck::check([&](const Eigen::VectorXd& z) { return cost::evaluate(detail::unflatten(z, tr), ctx, w); },
                                     gz, detail::flatten(tr), 1e-6, r.tolerance);

    const auto gw = cost::grad_weights(tr, ctx, w);
    Eigen::VectorXd x0(5), an(5);
    x0 << w.psi.tail<4>(), w.alpha;
    an << gw.d_psi.tail<4>(), gw.d_alpha;
    const auto rw = diffcheck::check(
        [&](const Eigen::VectorXd& x) {
          CostWeights v = w;
          v.psi.tail<4>() = x.head<4>();
          v.alpha = x[4];
          return cost::evaluate(tr, ctx, v);
        },
        an, x0, 1e-6, r.tolerance);

    const auto gp = cost::grad_predictions(tr, ctx, w)[0];
    const auto rp = diffcheck::check(
        [&](const Eigen::VectorXd& x) {
          CostContext c = ctx;
          detail::unpack_mixture(c.agents[0], x);
          return cost::evaluate(tr, c, w);
        },
        detail::pack_prediction_grad(gp), detail::pack_mixture(ctx.agents[0]), 1e-6, r.tolerance);
    r.add(std::max({rz.relative_error, rw.relative_error, rp.relative_error}));
  }
  return r;
}

/// Cross-entropy gradients w.r.t. candidate costs, and chained into (psi,
/// alpha) and the predicted mixture.
inline SuiteReport planner_suite(int n, std::uint64_t seed) {
  SuiteReport r{"planner", 1e-5};
  std::mt19937_64 rng(seed);
  const auto scs = detail::pool(n, seed);
  for (std::size_t i = 0; i < scs.size(); ++i) {
    const Scenario& sc = scs[i];
    const PredictorParams p = detail::jittered_predictor(sc, seed + i, 0.05);
    StackConfig cfg = StackConfig::for_scenario(sc);
    cfg.use_controller = false;
    const CostWeights w = detail::jittered_weights(rng);
    const Situation s = stack::situation(sc);
    const auto run = stack::run(sc, s, &p, w, PredictionSource::kModel, cfg);
    const int target = static_cast<int>(rng() % run.candidates.size());
    const auto l = planner::planning_loss(run.candidates, target);

    const int N = static_cast<int>(run.candidates.size());
    const Eigen::VectorXd c0 = Eigen::Map<const Eigen::VectorXd>(run.candidates.costs.data(), N);
    const auto rc = diffcheck::check(
        [&](const Eigen::VectorXd& c) {
          CandidateSet set = run.candidates;
          set.costs.assign(c.data(), c.data() + N);
          set.probs = planner::softmin(set.costs, set.beta);
          return planner::planning_loss(set, target).value;
        },
        Eigen::Map<const Eigen::VectorXd>(l.d_costs.data(), N), c0, 1e-6, r.tolerance);

    const auto g = planner::backward(run.candidates, run.plan_ctx, w, l.d_costs, cfg.cost);
    const Eigen::VectorXd m0 = detail::pack_mixture(run.plan_ctx.agents[0]);
    Eigen::VectorXd x0(5 + m0.size()), an(5 + m0.size());
    x0 << w.psi.tail<4>(), w.alpha, m0;
    an << g.d_psi.tail<4>(), g.d_alpha, detail::pack_prediction_grad(g.d_predictions[0]);
    const auto rx = diffcheck::check(
        [&](const Eigen::VectorXd& x) {
          CostWeights v = w;
          v.psi.tail<4>() = x.head<4>();
          v.alpha = x[4];
          CostContext ctx = run.plan_ctx;
          detail::unpack_mixture(ctx.agents[0], x.tail(m0.size()));
          CandidateSet set = run.candidates;
          planner::cost_and_select(set, ctx, v, cfg.planner.beta, cfg.cost);
          return planner::planning_loss(set, target).value;
        },
        an, x0, 1e-6, r.tolerance);
    r.add(std::max(rc.relative_error, rx.relative_error));
  }
  return r;
}

/// Predictor parameter gradients of the NLL plus a random linear functional of
/// the outputs, on sampled coordinates.
inline SuiteReport predictor_suite(int n, std::uint64_t seed) {
  SuiteReport r{"predictor", 1e-5};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> N(0.0, 1.0);
  const auto scs = detail::pool(n, seed);
  for (std::size_t i = 0; i < scs.size(); ++i) {
    const Scenario& sc = scs[i];
    const PredictorParams p0 = detail::jittered_predictor(sc, seed + i, 0.1);
    const PredictorConfig& cfg = p0.cfg;
    const AgentHistory h = sc.history(sc.predicted());
    const State ego = sc.ego().states[sc.now_index()];
    const auto gt = sc.future_positions(sc.predicted());
    PredictionUpstream up;
    up.d_positions.assign(cfg.modes, std::vector<Vec2>(cfg.horizon));
    up.d_probs.resize(cfg.modes);
    for (auto& row : up.d_positions)
      for (auto& x : row) x = Vec2(N(rng), N(rng));
    for (auto& x : up.d_probs) x = N(rng);
    auto fn = [&](const Eigen::VectorXd& th) {
      PredictorParams p = p0;
      p.theta = th;
      const auto pr = predictor::predict(p, h, ego);
      double s = predictor::nll(pr, gt).value;
      for (int k = 0; k < cfg.modes; ++k) {
        s += up.d_probs[k] * pr.probs[k];
        for (int t = 0; t < cfg.horizon; ++t) s += up.d_positions[k][t].dot(pr.modes[k].states[t + 1].position());
      }
      return s;
    };
    const auto pred = predictor::predict(p0, h, ego);
    PredictionUpstream total = up;
    total.add(predictor::nll(pred, gt).grad);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(p0.theta.size());
    predictor::accumulate_grads(p0, pred, total, g);
    const auto rep =
        diffcheck::check(fn, g, p0.theta, 1e-6, r.tolerance, diffcheck::sample_coordinates(static_cast<int>(g.size()), 64));
    r.add(rep.relative_error);
  }
  return r;
}

/// Implicit controller gradients w.r.t. (psi, alpha) and the mixture, against
/// central differences of the tightly converged solve.
inline SuiteReport controller_suite(int n, std::uint64_t seed) {
  SuiteReport r{"controller", 1e-3};
  std::mt19937_64 rng(seed);
  const ILQRConfig cfg = ILQRConfig::tight();
  const auto scs = detail::pool(2 * n, seed);
  for (std::size_t i = 0; i < scs.size() && r.instances < n; ++i) {
    const Scenario& sc = scs[i];
    const Situation s = stack::situation(sc);
    StackConfig scfg = StackConfig::for_scenario(sc);
    scfg.use_controller = false;
    const auto run = stack::run(sc, s, nullptr, CostWeights::hand_tuned(), PredictionSource::kGroundTruth, scfg);
    const Trajectory& init = run.output();
    CostContext ctx = run.control_ctx;
    ctx.agents[0] = detail::mixture_near(rng, init, 1 + static_cast<int>(rng() % 4));
    const CostWeights w = detail::jittered_weights(rng);
    const auto gt = sc.future_positions(sc.ego());
    auto loss = [&](const Trajectory& tr) { return stack::il_loss(tr, gt); };
    const auto sol = controller::solve(init, ctx, w, cfg);
    const auto g = controller::backward(sol, ctx, w, cfg, stack::il_loss_grad(sol.trajectory, gt));
    if (g.skipped) {
      ++r.skipped;
      continue;
    }
    const Eigen::VectorXd m0 = detail::pack_mixture(ctx.agents[0]);
    Eigen::VectorXd x0(5 + m0.size()), an(5 + m0.size());
    x0 << w.psi.tail<4>(), w.alpha, m0;
    an << g.d_psi.tail<4>(), g.d_alpha, detail::pack_prediction_grad(g.d_predictions[0]);
    bool smooth = true;
    const auto rep = diffcheck::check(
        [&](const Eigen::VectorXd& x) {
          CostWeights v = w;
          v.psi.tail<4>() = x.head<4>();
          v.alpha = x[4];
          CostContext c = ctx;
          detail::unpack_mixture(c.agents[0], x.tail(m0.size()));
          const auto sl = controller::solve(init, c, v, cfg);
          smooth = smooth && sl.converged && sl.active_set == sol.active_set;
          return loss(sl.trajectory);
        },
        an, x0, 1e-5, r.tolerance);
    if (!smooth) {
      ++r.skipped;
      continue;
    }
    r.add(rep.relative_error);
  }
  return r;
}

/// dL_ctr/dtheta through predict -> plan -> tightly converged iLQR, on sampled
/// predictor coordinates.
/// Smallest |dL/dθ| / max(1, |L|) the end-to-end check treats as measurable.
inline constexpr double kResolvable = 1e-6;

inline SuiteReport end_to_end_suite(int n, std::uint64_t seed, int coords = 32) {
  SuiteReport r{"end-to-end", 1e-3};
  StackConfig base;
  base.controller = ILQRConfig::tight();
  const LossConfig loss{0.0, 0.0, 1.0, Setting::kRL};
  const auto scs = detail::pool(2 * n, seed);
  for (std::size_t i = 0; i < scs.size() && r.instances < n; ++i) {
    const Scenario& sc = scs[i];
    StackParams p;
    p.predictor = detail::jittered_predictor(sc, seed + i, 0.05);
    const StackConfig cfg = StackConfig::for_scenario(sc, base);
    ScenarioLoss l;
    try {
      l = training::total_loss_and_grads(sc, p, loss, cfg);
    } catch (const DomainError&) {
      ++r.skipped;
      continue;
    }
    if (l.controller_skipped || !l.run.control.converged) {
      ++r.skipped;
      continue;
    }
    // a gradient this small next to the loss is below what differences of two
    // converged solves resolve; such instances say nothing either way
    if (l.grad.d_theta.norm() < kResolvable * std::max(1.0, std::abs(l.parts.ctr))) {
      ++r.skipped;
      continue;
    }
    bool smooth = true;
    auto fn = [&](const Eigen::VectorXd& th) {
      StackParams q = p;
      q.predictor.theta = th;
      const auto o = training::total_loss_and_grads(sc, q, loss, cfg, {0.0, 1.0, false});
      smooth = smooth && o.run.candidates.selected == l.run.candidates.selected && o.run.control.converged &&
               o.run.control.active_set == l.run.control.active_set;
      return o.parts.ctr;
    };
    // evenly spread coordinates plus the largest analytic entries
    const int dim = static_cast<int>(p.predictor.theta.size());
    std::vector<int> idx = diffcheck::sample_coordinates(dim, coords);
    std::vector<int> order(dim);
    std::iota(order.begin(), order.end(), 0);
    const int top = std::min(coords, dim);
    std::partial_sort(order.begin(), order.begin() + top, order.end(),
                      [&](int a, int b) { return std::abs(l.grad.d_theta[a]) > std::abs(l.grad.d_theta[b]); });
    idx.insert(idx.end(), order.begin(), order.begin() + top);
    std::sort(idx.begin(), idx.end());
    idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
    const auto rep = diffcheck::check(fn, l.grad.d_theta, p.predictor.theta, 1e-4, r.tolerance, idx);
    if (!smooth) {
      ++r.skipped;
      continue;
    }
    r.add(rep.relative_error);
  }
  return r;
}

inline SuiteReport run(const std::string& target, int n, std::uint64_t seed) {
  if (target == "dynamics") return dynamics_suite(n, seed);
  if (target == "cost") return cost_suite(n, seed);
  if (target == "planner") return planner_suite(n, seed);
  if (target == "predictor") return predictor_suite(n, seed);
  if (target == "controller") return controller_suite(n, seed);
  if (target == "end-to-end") return end_to_end_suite(n, seed);
  throw ConfigError("grad-check: unknown target '" + target + "'");
}

}  // namespace diffstack::gradsuite
