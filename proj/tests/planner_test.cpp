#include <random>

#include <gtest/gtest.h>

#include "diffstack/diffcheck.hpp"
#include "diffstack/planner.hpp"
#include "test_util.hpp"

namespace diffstack {
namespace {

struct PlanScene {
  LaneGraph graph;
  State ego;
  State goal;
  CostContext ctx;
  CandidateSet set;
};

// Two parallel lanes (optionally gently curved) with an agent mixture near the ego path.
PlanScene random_plan_scene(std::mt19937_64& rng, bool with_agent = true) {
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  PlanScene s;
  const double kappa = 0.01 * U(rng);
  s.graph.lanes.push_back(testing::arc_lane("a", kappa, 120.0));
  Lane b = testing::arc_lane("b", kappa, 120.0);
  for (auto& p : b.points) p.y() += 3.5;
  b = Lane::from_points("b", b.points, b.headings);
  s.graph.lanes.push_back(b);
  s.ego = State{10 + 2 * U(rng), 0.5 * U(rng), 0.05 * U(rng), 6 + 3 * U(rng)};
  const auto gp = lanegeo::point_at(s.graph.lanes[U(rng) > 0 ? 0 : 1], 10 + s.ego.v * 3 + 3 * U(rng), 0.0);
  s.goal = State{gp.position.x(), gp.position.y(), gp.heading, s.ego.v};
  s.ctx.goal = s.goal;
  s.set = planner::generate_candidates(s.ego, s.goal, s.graph, PlannerConfig{});
  if (with_agent && !s.set.candidates.empty()) {
    s.ctx.agents.push_back(testing::random_mixture(rng, s.set.candidates[0].traj, 3, true));
    s.ctx.agents.push_back(MixtureFuture::single(std::vector<Vec2>(6, Vec2(200, 200))));
  }
  return s;
}

TEST(PlannerTest, CandidateCountAndFeasibility) {
  std::mt19937_64 rng(1);
  for (int n = 0; n < 100; ++n) {
    PlanScene s = random_plan_scene(rng);
    const auto lanes = lanegeo::candidate_lanes(s.graph, s.goal);
    EXPECT_LE(s.set.size(), lanes.size() * 8 * 3);
    EXPECT_GE(s.set.size(), 2u);
    const ControlLimits lim;
    for (const Candidate& c : s.set.candidates) {
      EXPECT_TRUE(dynamics::dynamically_consistent(c.traj));
      EXPECT_EQ(c.traj.states.front(), s.ego);
      for (const Control& u : c.traj.controls) EXPECT_TRUE(lim.contains(u));
      for (const State& st : c.traj.states) EXPECT_GE(st.v, 0.0);
    }
  }
}

TEST(PlannerTest, SingleStraightLaneBound) {
  LaneGraph g;
  g.lanes.push_back(Lane::straight("a", {0, 0}, 0.0, 100.0));
  const State ego{10, 0, 0, 8};
  const CandidateSet set = planner::generate_candidates(ego, State{34, 0, 0, 8}, g, PlannerConfig{});
  EXPECT_LE(set.size(), 24u);
  EXPECT_GT(set.size(), 10u);
}

TEST(PlannerTest, EgoAtRestHardBrake) {
  LaneGraph g;
  g.lanes.push_back(Lane::straight("a", {0, 0}, 0.0, 100.0));
  PlannerConfig cfg;
  cfg.accel_set = {-3.0};
  cfg.lateral_offsets = {0.0};
  const State ego{10, 0, 0, 0};
  const CandidateSet set = planner::generate_candidates(ego, State{10, 0, 0, 0}, g, cfg);
  ASSERT_EQ(set.size(), 1u);
  for (const State& s : set.candidates[0].traj.states) {
    EXPECT_EQ(s.v, 0.0);
    EXPECT_NEAR((s.position() - ego.position()).norm(), 0.0, 1e-12);
  }
  for (const Control& u : set.candidates[0].traj.controls) EXPECT_EQ(u.vec().norm(), 0.0);
}

TEST(PlannerTest, SplineReproducesLinearMotion) {
  const State start{0, 0, 0.4, 5};
  const Vec2 end = start.position() + 5 * 3.0 * Vec2(std::cos(0.4), std::sin(0.4));
  const auto tr = planner::fit_spline(start, end, 0.4, 5.0, 6, 0.5, ControlLimits{});
  ASSERT_TRUE(tr);
  for (const Control& u : tr->controls) {
    EXPECT_NEAR(u.heading_rate, 0.0, 1e-9);
    EXPECT_NEAR(u.accel, 0.0, 1e-9);
  }
  EXPECT_NEAR((tr->states.back().position() - end).norm(), 0.0, 1e-9);
}

TEST(PlannerTest, SplineRolloutMatchesSamples) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  int feasible = 0;
  for (int n = 0; n < 200; ++n) {
    const State start{U(rng), U(rng), 0.3 * U(rng), 6 + 2 * U(rng)};
    const double h = 0.2 * U(rng);
    const Vec2 end = start.position() + (18 + 4 * U(rng)) * Vec2(std::cos(h), std::sin(h)) + Vec2(0, 0.5 * U(rng));
    const auto tr = planner::fit_spline(start, end, h, 6 + U(rng), 6, 0.5, ControlLimits{});
    if (!tr) continue;
    ++feasible;
    EXPECT_NEAR((tr->states.back().position() - end).norm(), 0.0, 1e-2);
    EXPECT_TRUE(dynamics::dynamically_consistent(*tr));
  }
  EXPECT_GT(feasible, 100);
}

TEST(PlannerTest, InfeasibleSplinesAreMarked) {
  // a U-turn within 3 s violates the heading-rate limit
  EXPECT_FALSE(planner::fit_spline({0, 0, 0, 5}, {0, 5}, kPi, 5.0, 6, 0.5, ControlLimits{}));
  EXPECT_FALSE(planner::fit_spline({0, 0, 0, 5}, {15, 0}, 0.0, -1.0, 6, 0.5, ControlLimits{}));
}

TEST(PlannerTest, CostAndSelectTies) {
  CandidateSet set;
  Lane lane = Lane::straight("a", {0, 0}, 0.0, 50.0);
  const std::vector<Control> us(6);
  const Trajectory tr = dynamics::rollout({0, 0, 0, 5}, us, 0.5);
  set.candidates = {{tr, &lane}, {tr, &lane}};
  CostContext ctx;
  ctx.goal = tr.states.back();
  planner::cost_and_select(set, ctx, CostWeights::hand_tuned(), 1.0);
  EXPECT_EQ(set.probs[0], 0.5);
  EXPECT_EQ(set.probs[1], 0.5);
  EXPECT_EQ(set.selected, 0);
}

TEST(PlannerTest, SelectionMatchesEnumerationForAllTemperatures) {
  std::mt19937_64 rng(3);
  for (int n = 0; n < 100; ++n) {
    PlanScene s = random_plan_scene(rng);
    for (double beta : {0.1, 1.0, 10.0}) {
      planner::cost_and_select(s.set, s.ctx, CostWeights::hand_tuned(), beta);
      double best = std::numeric_limits<double>::infinity();
      int arg = -1;
      for (std::size_t i = 0; i < s.set.size(); ++i) {
        const double c = cost::evaluate(s.set.candidates[i].traj, planner::candidate_context(s.ctx, s.set.candidates[i]),
                                        CostWeights::hand_tuned());
        if (c < best) best = c, arg = static_cast<int>(i);
      }
      EXPECT_EQ(s.set.selected, arg);
      const auto pmax = std::max_element(s.set.probs.begin(), s.set.probs.end()) - s.set.probs.begin();
      EXPECT_EQ(pmax, arg);
      double sum = 0;
      for (double p : s.set.probs) sum += p;
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(PlannerTest, TemperatureLimitsAndScaling) {
  const std::vector<double> c{3.0, 1.0, 2.0, 7.5};
  const auto p0 = planner::softmin(c, 1e-12);
  for (double p : p0) EXPECT_NEAR(p, 0.25, 1e-10);
  std::vector<double> c2;
  for (double x : c) c2.push_back(4.0 * x);
  const auto a = planner::softmin(c, 2.0);
  const auto b = planner::softmin(c2, 0.5);
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
  EXPECT_EQ(planner::argmin(c), 1);
}

TEST(PlannerTest, PlanningLossExamples) {
  CandidateSet set;
  set.candidates.resize(4);
  set.costs = {1.0, 1.0, 1.0, 1.0};
  set.beta = 1.0;
  set.probs = planner::softmin(set.costs, 1.0);
  EXPECT_NEAR(planner::planning_loss(set, 2).value, std::log(4.0), 1e-12);
  set.costs = {0.0, 1e4, 1e4, 1e4};
  set.probs = planner::softmin(set.costs, 1.0);
  EXPECT_EQ(planner::planning_loss(set, 0).value, 0.0);
  EXPECT_THROW(planner::planning_loss(set, 4), DomainError);
}

TEST(PlannerTest, PlanningLossGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> U(0.0, 5.0);
  for (int n = 0; n < 100; ++n) {
    CandidateSet set;
    const int N = 2 + n % 20;
    set.candidates.resize(N);
    set.beta = 0.1 + U(rng);
    Eigen::VectorXd c0(N);
    for (int i = 0; i < N; ++i) c0[i] = U(rng);
    const int target = n % N;
    auto fn = [&](const Eigen::VectorXd& c) {
      CandidateSet s = set;
      s.costs.assign(c.data(), c.data() + N);
      s.probs = planner::softmin(s.costs, s.beta);
      return planner::planning_loss(s, target).value;
    };
    set.costs.assign(c0.data(), c0.data() + N);
    set.probs = planner::softmin(set.costs, set.beta);
    const auto l = planner::planning_loss(set, target);
    const auto rep = diffcheck::check(fn, Eigen::Map<const Eigen::VectorXd>(l.d_costs.data(), N), c0, 1e-5, 1e-6);
    EXPECT_TRUE(rep.passed) << rep.relative_error;
  }
}

TEST(PlannerTest, ChainedGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  for (int n = 0; n < 100; ++n) {
    PlanScene s = random_plan_scene(rng);
    CostWeights w0 = CostWeights::hand_tuned();
    w0.psi.tail<4>() += 0.3 * Eigen::Vector4d(U(rng), U(rng), U(rng), U(rng));
    const double beta = 0.2;
    planner::cost_and_select(s.set, s.ctx, w0, beta);
    const int target = static_cast<int>((n * 7) % s.set.size());
    const auto l = planner::planning_loss(s.set, target);
    const auto g = planner::backward(s.set, s.ctx, w0, l.d_costs);

    MixtureFuture& f = s.ctx.agents[0];
    const MixtureFuture f0 = f;
    const int K = f.modes(), T = 6;
    Eigen::VectorXd x0(5 + 2 * K * T + K), an(5 + 2 * K * T + K);
    x0 << w0.psi.tail<4>(), w0.alpha, Eigen::VectorXd::Zero(2 * K * T + K);
    an << g.d_psi.tail<4>(), g.d_alpha, Eigen::VectorXd::Zero(2 * K * T + K);
    for (int k = 0; k < K; ++k) {
      for (int t = 0; t < T; ++t) {
        x0.segment<2>(5 + 2 * (k * T + t)) = f.means[k][t];
        an.segment<2>(5 + 2 * (k * T + t)) = g.d_predictions[0].d_means[k][t];
      }
      x0[5 + 2 * K * T + k] = f.probs[k];
      an[5 + 2 * K * T + k] = g.d_predictions[0].d_probs[k];
    }
    auto fn = [&](const Eigen::VectorXd& x) {
      CostWeights w = w0;
      w.psi.tail<4>() = x.head<4>();
      w.alpha = x[4];
      for (int k = 0; k < K; ++k) {
        for (int t = 0; t < T; ++t) f.means[k][t] = x.segment<2>(5 + 2 * (k * T + t));
        f.probs[k] = x[5 + 2 * K * T + k];
      }
      CandidateSet set = s.set;
      planner::cost_and_select(set, s.ctx, w, beta);
      f = f0;
      return planner::planning_loss(set, target).value;
    };
    const auto rep = diffcheck::check(fn, an, x0, 1e-6, 1e-5);
    EXPECT_TRUE(rep.passed) << n << " " << rep.relative_error;
  }
}

TEST(PlannerTest, Targets) {
  std::mt19937_64 rng(6);
  for (int n = 0; n < 100; ++n) {
    PlanScene s = random_plan_scene(rng);
    // RL with GT == predictions: target equals selection
    const CostWeights w = CostWeights::hand_tuned();
    planner::cost_and_select(s.set, s.ctx, w, 1.0);
    EXPECT_EQ(planner::select_target_rl(s.set, s.ctx, w), s.set.selected);
    // IL with a candidate identical to GT
    const int pick = static_cast<int>((n * 5) % s.set.size());
    std::vector<Vec2> gt;
    for (int t = 1; t <= 6; ++t) gt.push_back(s.set.candidates[pick].traj.states[t].position());
    const int il = planner::select_target_il(s.set, gt);
    EXPECT_EQ(planner::rms_distance(s.set.candidates[il].traj, gt), 0.0);
    EXPECT_LE(il, pick);
    // RL enumeration under a different hindsight context
    CostContext hs = s.ctx;
    hs.agents = {MixtureFuture::single(s.ctx.agents[0].means[0])};
    std::vector<double> c;
    for (const Candidate& cand : s.set.candidates)
      c.push_back(cost::evaluate(cand.traj, planner::candidate_context(hs, cand), w));
    EXPECT_EQ(planner::select_target_rl(s.set, hs, w), std::min_element(c.begin(), c.end()) - c.begin());
  }
}

}  // namespace
}  // namespace diffstack
