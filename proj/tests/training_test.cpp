#include <gtest/gtest.h>

#include "diffstack/diffcheck.hpp"
#include "diffstack/training.hpp"

namespace diffstack {
namespace {

using training::LossOptions;

std::vector<Scenario> interactive(int count, std::uint64_t seed, const std::string& family = "interactive") {
  ScenarioConfig c;
  c.family = family;
  c.count = count;
  c.seed = seed;
  return stack::generate_certified(c);
}

StackParams params_for(const Scenario& sc, std::uint64_t seed = 1) {
  return training::initial_params(predictor_config_for(sc), seed);
}

TEST(Loss, TotalIsTheWeightedSumOfParts) {
  for (const Scenario& sc : interactive(4, 2)) {
    const StackParams p = params_for(sc);
    const StackConfig cfg = StackConfig::for_scenario(sc);
    for (const Setting st : {Setting::kRL, Setting::kIL}) {
      const LossConfig l{0.7, 13.0, 250.0, st};
      const auto r = training::total_loss_and_grads(sc, p, l, cfg, {0.0, 1.3, false});
      // parts recomputed independently
      const Situation s = stack::situation(sc);
      const auto run = stack::run(sc, s, &p.predictor, p.weights, PredictionSource::kModel, cfg);
      const CostContext hind = stack::hindsight_context(sc, s);
      const double nll = predictor::nll(*run.prediction, sc.future_positions(sc.predicted())).value;
      const int target = training::plan_target(sc, run.candidates, hind, st, cfg.cost);
      const double ce = planner::planning_loss(run.candidates, target).value;
      const double ctr = training::control_loss(sc, run.output(), hind, st, cfg.cost);
      EXPECT_EQ(r.parts.pred, nll);
      EXPECT_EQ(r.parts.plan, ce);
      EXPECT_EQ(r.parts.ctr, ctr);
      const double sum = 0.7 * 1.3 * nll + 13.0 * ce + 250.0 * ctr;
      EXPECT_NEAR(r.parts.total, sum, 1e-12 * std::max(1.0, std::abs(sum)));
    }
  }
}

TEST(Loss, PredictionOnlyAlphasGiveTheNllGradient) {
  for (const Scenario& sc : interactive(3, 4)) {
    const StackParams p = params_for(sc);
    const auto r = training::total_loss_and_grads(sc, p, {1.0, 0.0, 0.0, Setting::kRL}, StackConfig::for_scenario(sc));
    const auto pred = predictor::predict(p.predictor, sc.history(sc.predicted()), sc.ego().states[sc.now_index()]);
    const auto nll = predictor::nll(pred, sc.future_positions(sc.predicted()));
    Eigen::VectorXd g = Eigen::VectorXd::Zero(p.predictor.theta.size());
    PredictionUpstream up;
    up.add(nll.grad, 1.0);
    predictor::accumulate_grads(p.predictor, pred, up, g);
    EXPECT_EQ((r.grad.d_theta - g).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(r.grad.d_psi.norm(), 0.0);
    EXPECT_EQ(r.grad.d_alpha, 0.0);
  }
}

TEST(Loss, PlanningGradientSignMatchesFiniteDifferences) {
  // frozen predictor; the CE loss as a function of one psi component
  int checked = 0;
  for (const Scenario& sc : interactive(6, 7)) {
    StackParams p = params_for(sc);
    const StackConfig cfg = StackConfig::for_scenario(sc);
    const LossConfig l{0.0, 1.0, 0.0, Setting::kRL};
    const auto r = training::total_loss_and_grads(sc, p, l, cfg);
    for (int i = 1; i < kNumCostTerms; ++i) {
      auto f = [&](double d) {
        StackParams q = p;
        q.weights.psi[i] += d;
        return training::total_loss_and_grads(sc, q, l, cfg, {0.0, 1.0, false}).parts.plan;
      };
      const double fd = (f(1e-6) - f(-1e-6)) / 2e-6;
      if (std::abs(fd) < 1e-9) continue;
      EXPECT_EQ(fd > 0, r.grad.d_psi[i] > 0) << sc.id << " psi" << i;
      EXPECT_NEAR(r.grad.d_psi[i], fd, 1e-5 * std::max(1.0, std::abs(fd)));
      ++checked;
    }
  }
  EXPECT_GE(checked, 6);
}

TEST(Loss, ControlLossReachesThePredictor) {
  // alphas (0, 0, 1): on near-collision scenes the predictor still gets a gradient
  int nonzero = 0, used = 0;
  for (const Scenario& sc : interactive(8, 3, "lead_brake")) {
    const StackParams p = params_for(sc);
    const auto r = training::total_loss_and_grads(sc, p, {0.0, 0.0, 1.0, Setting::kRL}, StackConfig::for_scenario(sc));
    if (r.controller_skipped) continue;
    ++used;
    nonzero += r.grad.d_theta.norm() > 0.0;
  }
  EXPECT_GE(used, 4);
  EXPECT_EQ(nonzero, used);
}

TEST(Loss, EndToEndControlGradientMatchesFiniteDifferences) {
  StackConfig base;
  base.controller = ILQRConfig::tight();
  int checked = 0;
  for (const Scenario& sc : interactive(6, 11)) {
    const StackParams p = params_for(sc, 3);
    const StackConfig cfg = StackConfig::for_scenario(sc, base);
    const LossConfig l{0.0, 0.0, 1.0, Setting::kRL};
    const auto r = training::total_loss_and_grads(sc, p, l, cfg);
    if (r.controller_skipped || !r.run.control.converged) continue;
    auto f = [&](const Eigen::VectorXd& th) {
      StackParams q = p;
      q.predictor.theta = th;
      return training::total_loss_and_grads(sc, q, l, cfg, {0.0, 1.0, false}).parts.ctr;
    };
    const auto coords = diffcheck::sample_coordinates(static_cast<int>(p.predictor.theta.size()), 40);
    const auto rep = diffcheck::check(f, r.grad.d_theta, p.predictor.theta, 1e-5, 1e-3, coords);
    EXPECT_TRUE(rep.passed) << sc.id << " rel err " << rep.relative_error;
    auto fpsi = [&](const Eigen::VectorXd& psi) {
      StackParams q = p;
      q.weights.psi = psi;
      return training::total_loss_and_grads(sc, q, l, cfg, {0.0, 1.0, false}).parts.ctr;
    };
    const auto rp = diffcheck::check(fpsi, r.grad.d_psi, p.weights.psi, 1e-5, 1e-3, {1, 2, 3, 4});
    EXPECT_TRUE(rp.passed) << sc.id << " psi rel err " << rp.relative_error;
    ++checked;
  }
  EXPECT_GE(checked, 3);
}

TEST(Loss, StackAblations) {
  const Scenario sc = interactive(1, 19, "lead_brake")[0];
  const StackParams p = params_for(sc);
  const LossConfig l = mode_loss_defaults(TrainMode::kDiffStack, Setting::kRL);
  StackConfig ctrl_only;
  ctrl_only.use_planner = false;
  auto r = training::total_loss_and_grads(sc, p, l, StackConfig::for_scenario(sc, ctrl_only));
  EXPECT_EQ(r.run.candidates.size(), 0u);
  EXPECT_TRUE(r.run.controlled);
  EXPECT_EQ(r.parts.plan, 0.0);
  EXPECT_EQ(r.target, -1);
  EXPECT_TRUE(dynamics::dynamically_consistent(r.run.output()));

  StackConfig plan_only;
  plan_only.use_controller = false;
  r = training::total_loss_and_grads(sc, p, l, StackConfig::for_scenario(sc, plan_only));
  EXPECT_FALSE(r.run.controlled);
  EXPECT_TRUE(r.controller_skipped);
  EXPECT_TRUE(r.run.output() == r.run.candidates.chosen().traj);

  StackConfig neither;
  neither.use_planner = neither.use_controller = false;
  EXPECT_THROW(training::total_loss_and_grads(sc, p, l, StackConfig::for_scenario(sc, neither)), ConfigError);
}

TEST(Loss, IlLossExamples) {
  const Scenario sc = interactive(1, 5)[0];
  const Trajectory gt = sc.logged(sc.ego());
  const auto fut = sc.future_positions(sc.ego());
  EXPECT_EQ(stack::il_loss(gt, fut), 0.0);
  Trajectory shifted = gt;
  for (State& s : shifted.states) s.y += 1.0;
  EXPECT_NEAR(stack::il_loss(shifted, fut), 6.0, 1e-12);
}

TEST(Loss, BiasOffsetMovesTargetsAlongEgoHeading) {
  const Scenario sc = interactive(1, 5)[0];
  const auto a = training::prediction_target(sc, 0.0);
  const auto b = training::prediction_target(sc, 1.0);
  const double h = sc.ego().states[sc.now_index()].heading;
  for (std::size_t t = 0; t < a.size(); ++t) {
    EXPECT_NEAR((b[t] - a[t]).x(), std::cos(h), 1e-12);
    EXPECT_NEAR((b[t] - a[t]).y(), std::sin(h), 1e-12);
  }
}

TEST(Reweight, DistanceAndGradCostWeights) {
  Scenario sc = interactive(1, 5, "lead_brake")[0];
  // far agent: weight vanishes
  Scenario far = sc;
  for (AgentTrack& a : far.agents)
    if (a.id == far.predicted_agent_id)
      for (State& s : a.states) s.y += 1e6;
  EXPECT_LT(training::distance_weight(far, 1e-3), 1e-5);
  EXPECT_LT(training::gradcost_weight(far), 1e-12);
  // coincident agent: 1 / eps
  Scenario same = sc;
  for (AgentTrack& a : same.agents)
    if (a.id == same.predicted_agent_id) a.states = same.ego().states;
  EXPECT_DOUBLE_EQ(training::distance_weight(same, 1e-3), 1e3);

  // gradcost weight is the norm of the hindsight-cost gradient w.r.t. the agent's future
  const CostContext ctx = training::gradcost_context(sc);
  const Trajectory ego = sc.logged(sc.ego());
  const CostWeights w = CostWeights::hand_tuned();
  const int T = sc.horizon_steps;
  const int slot = 0;  // the predicted agent leads the context
  ASSERT_TRUE(ctx.agents[slot].differentiable);
  Eigen::VectorXd m(2 * T);
  for (int t = 0; t < T; ++t) m.segment<2>(2 * t) = ctx.agents[slot].means[0][t];
  auto f = [&](const Eigen::VectorXd& v) {
    CostContext c = ctx;
    for (int t = 0; t < T; ++t) c.agents[slot].means[0][t] = v.segment<2>(2 * t);
    return cost::evaluate(ego, c, w);
  };
  Eigen::VectorXd fd(2 * T);
  for (int i = 0; i < 2 * T; ++i) {
    Eigen::VectorXd a = m, b = m;
    a[i] += 1e-6;
    b[i] -= 1e-6;
    fd[i] = (f(a) - f(b)) / 2e-6;
  }
  EXPECT_NEAR(training::gradcost_weight(sc), fd.norm(), 1e-6 * std::max(1.0, fd.norm()));

  const auto n = training::normalize_mean_one({1.0, 3.0});
  EXPECT_DOUBLE_EQ(n[0], 0.5);
  EXPECT_DOUBLE_EQ(n[1], 1.5);
  const auto z = training::normalize_mean_one({0.0, 0.0});
  EXPECT_EQ(z[0], 1.0);
}

TEST(Train, ZeroLearningRateLeavesParametersUnchanged) {
  const auto set = interactive(6, 13);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.learning_rate = 0.0;
  tc.mode = TrainMode::kDiffStack;
  const StackParams init = params_for(set[0]);
  const auto res = training::train(set, {}, init, tc, mode_loss_defaults(tc.mode, Setting::kRL));
  EXPECT_EQ(res.params.predictor.theta, init.predictor.theta);
  EXPECT_EQ(res.params.weights.psi, init.weights.psi);
  ASSERT_EQ(res.log.size(), 2u);
}

TEST(Train, SeedDeterminism) {
  const auto set = interactive(8, 14);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 3;
  tc.mode = TrainMode::kDiffStack;
  tc.seed = 9;
  const LossConfig l = mode_loss_defaults(tc.mode, Setting::kRL);
  const auto a = training::train(set, set, params_for(set[0], 9), tc, l);
  const auto b = training::train(set, set, params_for(set[0], 9), tc, l);
  EXPECT_EQ(a.params.predictor.theta, b.params.predictor.theta);
  EXPECT_EQ(a.log.back().to_json().dump(), b.log.back().to_json().dump());
  tc.seed = 10;
  const auto c = training::train(set, set, params_for(set[0], 9), tc, l);
  EXPECT_NE(a.params.predictor.theta, c.params.predictor.theta);
}

TEST(Train, ImitationOverfitsASmallSet) {
  const auto set = interactive(8, 15);
  TrainConfig tc;
  tc.epochs = 5;
  tc.batch_size = 8;
  tc.learning_rate = 0.01;
  tc.mode = TrainMode::kDiffStack;
  const LossConfig l = mode_loss_defaults(tc.mode, Setting::kIL);
  const auto first = training::evaluate_losses(set, params_for(set[0]), l, 0.0, {});
  const auto res = training::train(set, set, params_for(set[0]), tc, l);
  EXPECT_LT(res.log.back().val_total, first.val_total);
  EXPECT_LT(res.log.back().val_pred, first.val_pred);
}

TEST(Train, CostTuningKeepsFixedSumAndImprovesPerturbedWeights) {
  ScenarioConfig c;
  c.family = "interactive";
  c.count = 24;
  c.seed = 16;
  const auto all = stack::generate_certified(c);
  const auto [tr, va] = scenario::split(all, 0.75, 16);
  TrainConfig tc;
  tc.epochs = 4;
  tc.batch_size = 6;
  tc.learning_rate = 0.02;
  tc.mode = TrainMode::kCostTuning;
  StackParams init = params_for(tr[0]);
  init.weights = training::perturbed_weights(0.5, 16);
  const Vec5 psi0 = init.weights.psi;
  const LossConfig l = mode_loss_defaults(tc.mode, Setting::kIL);
  const auto res = training::train(tr, va, init, tc, l);
  const CostWeights& w = res.params.weights;
  EXPECT_EQ(w.psi[0], psi0[0]);
  EXPECT_NEAR((w.w() / w.alpha).sum(), w.c_norm, 1e-10);
  EXPECT_EQ(res.params.predictor.theta, init.predictor.theta);
  const auto before = training::evaluate_losses(va, init, l, 0.0, {});
  EXPECT_LT(res.log.back().val_ctr, before.val_ctr);
}

TEST(Train, PerturbedWeightsMoveEveryTrainableTermByHalf) {
  const CostWeights h = CostWeights::hand_tuned();
  const CostWeights p = training::perturbed_weights(0.5, 3);
  EXPECT_EQ(p.psi[0], h.psi[0]);
  for (int i = 1; i < kNumCostTerms; ++i) {
    const double r = std::exp(p.psi[i] - h.psi[i]);
    EXPECT_TRUE(std::abs(r - 1.5) < 1e-12 || std::abs(r - 0.5) < 1e-12) << r;
  }
  EXPECT_NEAR((p.w() / p.alpha).sum(), p.c_norm, 1e-12);
}

TEST(Checkpoint, RoundTripIsExact) {
  const Scenario sc = interactive(1, 5)[0];
  training::Checkpoint c;
  c.params = params_for(sc, 4);
  c.params.weights = training::perturbed_weights(0.5, 4);
  c.params.weights.alpha = 1.37;
  c.label = "diffstack";
  c.train.mode = TrainMode::kDiffStack;
  c.train.seed = 4;
  c.loss = mode_loss_defaults(TrainMode::kDiffStack, Setting::kIL);
  const auto j = training::to_json(c);
  const auto back = training::checkpoint_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(back.params.predictor.theta, c.params.predictor.theta);
  EXPECT_EQ(back.params.weights.psi, c.params.weights.psi);
  EXPECT_EQ(back.params.weights.alpha, 1.37);
  EXPECT_EQ(back.label, "diffstack");
  EXPECT_EQ(back.loss.alpha2, 10.0);
  EXPECT_EQ(training::to_json(back).dump(), j.dump());

  auto bad = j;
  bad["config"]["loss"]["alpha3"] = 1.0;
  EXPECT_THROW(training::checkpoint_from_json(bad), DataError);
  bad = j;
  bad.erase("theta");
  EXPECT_THROW(training::checkpoint_from_json(bad), DataError);
}

TEST(ModeDefaults, MatchTheDocumentedAlphas) {
  const LossConfig rl = mode_loss_defaults(TrainMode::kDiffStack, Setting::kRL);
  EXPECT_EQ(rl.alpha1, 1.0);
  EXPECT_EQ(rl.alpha2, 100.0);
  EXPECT_EQ(rl.alpha3, 1000.0);
  const LossConfig il = mode_loss_defaults(TrainMode::kDiffStack, Setting::kIL);
  EXPECT_EQ(il.alpha2, 10.0);
  const LossConfig st = mode_loss_defaults(TrainMode::kStandard, Setting::kRL);
  EXPECT_EQ(st.alpha2, 0.0);
  EXPECT_EQ(st.alpha3, 0.0);
  EXPECT_EQ(mode_loss_defaults(TrainMode::kDiffStackNoPred, Setting::kRL).alpha1, 0.0);
  EXPECT_THROW(parse_train_mode("fancy"), ConfigError);
}

TEST(Eval, NoPredictionRelativeMetricsAreZero) {
  const auto set = interactive(6, 17);
  const training::Method none{"no_pred", PredictionSource::kNone};
  const auto a = training::evaluate_open_loop(set, none, Setting::kRL);
  const auto b = training::evaluate_open_loop(set, none, Setting::kRL);
  const auto m = training::common_means({&a, &b});
  EXPECT_EQ(m[1].control_loss - m[0].control_loss, 0.0);
  EXPECT_EQ(m[1].plan_loss - m[0].plan_loss, 0.0);
  const auto [mean, se] = training::mean_se({2.0});
  EXPECT_EQ(mean, 2.0);
  EXPECT_EQ(se, 0.0);
  const auto gt = training::evaluate_open_loop(set, {"gt", PredictionSource::kGroundTruth}, Setting::kRL);
  const auto g = training::common_means({&a, &gt});
  EXPECT_LT(g[1].control_loss, g[0].control_loss);
}

TEST(Eval, HindsightCostMatchesDirectEvaluation) {
  for (const Scenario& sc : interactive(3, 18)) {
    const Situation s = stack::situation(sc);
    const StackConfig cfg = StackConfig::for_scenario(sc);
    const auto run = stack::run(sc, s, nullptr, CostWeights::hand_tuned(), PredictionSource::kGroundTruth, cfg);
    CostContext ctx;
    for (const AgentTrack& a : sc.agents)
      if (a.id != sc.ego_id) ctx.agents.push_back(MixtureFuture::single(sc.future_positions(a)));
    ctx.goal = sc.goal;
    ctx.lane = lanegeo::nearest_candidate_lane(sc.lanes, sc.goal);
    EXPECT_EQ(stack::run_hindsight_cost(sc, s, run, cfg), cost::evaluate(run.output(), ctx, CostWeights::hand_tuned()));
  }
}

}  // namespace
}  // namespace diffstack
