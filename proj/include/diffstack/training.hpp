#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffstack/stack.hpp"

namespace diffstack {

/// A loss or gradient became non-finite during training.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Setting { kRL, kIL };

inline std::string to_string(Setting s) { return s == Setting::kRL ? "rl" : "il"; }
inline Setting parse_setting(const std::string& s) {
  if (s == "rl") return Setting::kRL;
  if (s == "il") return Setting::kIL;
  throw ConfigError("unknown setting '" + s + "' (expected rl or il)");
}

/// Weights of L = a1 L_pred + a2 L_plan + a3 L_ctr.
struct LossConfig {
  double alpha1 = 1.0;
  double alpha2 = 100.0;
  double alpha3 = 1000.0;
  Setting setting = Setting::kRL;

  static LossConfig defaults(Setting s) {
    return s == Setting::kRL ? LossConfig{1.0, 100.0, 1000.0, s} : LossConfig{1.0, 10.0, 1000.0, s};
  }
  void validate() const {
    if (!(alpha1 >= 0.0 && alpha2 >= 0.0 && alpha3 >= 0.0)) throw ConfigError("loss: alphas must be non-negative");
    if (alpha1 + alpha2 + alpha3 <= 0.0) throw ConfigError("loss: at least one alpha must be positive");
  }
};

enum class TrainMode { kStandard, kDistanceWeighted, kGradCostWeighted, kDiffStack, kDiffStackNoPred, kCostTuning };

inline const std::vector<std::pair<TrainMode, std::string>>& train_mode_names() {
  static const std::vector<std::pair<TrainMode, std::string>> n{
      {TrainMode::kStandard, "standard"},   {TrainMode::kDistanceWeighted, "distance_weighted"},
      {TrainMode::kGradCostWeighted, "gradcost_weighted"}, {TrainMode::kDiffStack, "diffstack"},
      {TrainMode::kDiffStackNoPred, "diffstack_no_pred"}, {TrainMode::kCostTuning, "cost_tuning"}};
  return n;
}
inline std::string to_string(TrainMode m) {
  for (const auto& [k, v] : train_mode_names())
    if (k == m) return v;
  return "?";
}
inline TrainMode parse_train_mode(const std::string& s) {
  for (const auto& [k, v] : train_mode_names())
    if (v == s) return k;
  throw ConfigError("unknown train mode '" + s + "'");
}

/// Loss weights a mode trains with unless overridden: the reweighted baselines
/// and standard training use prediction loss only; diffstack_no_pred and cost
/// tuning drop it.
inline LossConfig mode_loss_defaults(TrainMode m, Setting s) {
  LossConfig l = LossConfig::defaults(s);
  switch (m) {
    case TrainMode::kStandard:
    case TrainMode::kDistanceWeighted:
    case TrainMode::kGradCostWeighted:
      l.alpha2 = l.alpha3 = 0.0;
      break;
    case TrainMode::kDiffStackNoPred:
    case TrainMode::kCostTuning:
      l.alpha1 = 0.0;
      break;
    case TrainMode::kDiffStack:
      break;
  }
  return l;
}

struct TrainConfig {
  int epochs = 20;
  int batch_size = 32;  // 256 at full scale
  double learning_rate = 0.003;
  double clip_norm = 10.0;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::kStandard;
  double bias_offset = 0.0;  // metres added along the ego heading to prediction targets
  double distance_eps = 1e-3;
  double train_fraction = 0.75;
  StackConfig stack;  // horizon and dt are taken from each scenario

  void validate() const {
    if (epochs < 0) throw ConfigError("train: epochs must be non-negative");
    if (batch_size < 1) throw ConfigError("train: batch size must be positive");
    if (!(learning_rate >= 0.0)) throw ConfigError("train: learning rate must be non-negative");
    if (!(clip_norm > 0.0)) throw ConfigError("train: clip norm must be positive");
    if (!(distance_eps > 0.0)) throw ConfigError("train: distance epsilon must be positive");
    if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw ConfigError("train: train fraction must be in (0, 1]");
  }
};

/// Everything the stack learns: predictor weights and the cost parameterization.
struct StackParams {
  PredictorParams predictor;
  CostWeights weights = CostWeights::hand_tuned();
};

struct LossParts {
  double pred = 0.0;
  double plan = 0.0;
  double ctr = 0.0;
  double total = 0.0;
};

struct GradBundle {
  Eigen::VectorXd d_theta;
  Vec5 d_psi = Vec5::Zero();
  double d_alpha = 0.0;

  static GradBundle zeros(const StackParams& p) {
    GradBundle g;
    g.d_theta = Eigen::VectorXd::Zero(p.predictor.theta.size());
    return g;
  }
  void add(const GradBundle& o, double s = 1.0) {
    d_theta += s * o.d_theta;
    d_psi += s * o.d_psi;
    d_alpha += s * o.d_alpha;
  }
};

struct ScenarioLoss {
  LossParts parts;
  GradBundle grad;
  bool controller_skipped = false;  // controller path contributed no gradient
  int target = -1;
  stack::StackRun run;
};

namespace training {

/// Prediction target with the ego-frame bias applied: `offset` metres along
/// the ego heading at the current time.
inline std::vector<Vec2> prediction_target(const Scenario& sc, double offset) {
  std::vector<Vec2> f = sc.future_positions(sc.predicted());
  if (offset != 0.0) {
    const State& e = sc.ego().states[sc.now_index()];
    const Vec2 b = offset * Vec2(std::cos(e.heading), std::sin(e.heading));
    for (Vec2& p : f) p += b;
  }
  return f;
}

inline double control_loss(const Scenario& sc, const Trajectory& traj, const CostContext& hindsight, Setting s,
                           const CostParams& prm) {
  return s == Setting::kRL ? stack::hindsight_cost(traj, hindsight, CostWeights::hand_tuned(), prm)
                           : stack::il_loss(traj, sc.future_positions(sc.ego()));
}

inline int plan_target(const Scenario& sc, const CandidateSet& set, const CostContext& hindsight, Setting s,
                       const CostParams& prm) {
  return s == Setting::kRL ? planner::select_target_rl(set, hindsight, CostWeights::hand_tuned(), prm)
                           : planner::select_target_il(set, sc.future_positions(sc.ego()));
}

struct LossOptions {
  double bias_offset = 0.0;
  double pred_weight = 1.0;  // relevance reweighting of L_pred
  bool gradients = true;
};

/// L = a1 w_pred NLL + a2 CE + a3 L_ctr for one scenario, with gradients w.r.t.
/// predictor parameters and (psi, alpha). L_ctr is the hindsight cost (RL) or
/// squared distance to the logged ego (IL) of the controller output; when the
/// controller backward pass is skipped only L_pred and L_plan contribute gradients.
/// Without a planner L_plan is 0.
inline ScenarioLoss total_loss_and_grads(const Scenario& sc, const StackParams& params, const LossConfig& loss,
                                         const StackConfig& cfg, const LossOptions& opt = {}) {
  ScenarioLoss r;
  const Situation s = stack::situation(sc);
  r.run = stack::run(sc, s, &params.predictor, params.weights, PredictionSource::kModel, cfg);
  const CostContext hind = stack::hindsight_context(sc, s);

  const auto nll = predictor::nll(*r.run.prediction, prediction_target(sc, opt.bias_offset));
  const bool planned = cfg.use_planner;
  r.target = planned ? plan_target(sc, r.run.candidates, hind, loss.setting, cfg.cost) : -1;
  const auto pl = planned ? planner::planning_loss(r.run.candidates, r.target) : planner::PlanningLoss{};
  const Trajectory& out = r.run.output();
  r.parts.pred = nll.value;
  r.parts.plan = pl.value;
  r.parts.ctr = control_loss(sc, out, hind, loss.setting, cfg.cost);
  r.parts.total = loss.alpha1 * opt.pred_weight * r.parts.pred + loss.alpha2 * r.parts.plan + loss.alpha3 * r.parts.ctr;
  r.controller_skipped = !r.run.controlled;
  if (!opt.gradients) return r;

  r.grad = GradBundle::zeros(params);
  const int slot = r.run.predicted_slot;
  PredictionUpstream up;
  if (loss.alpha1 > 0.0) up.add(nll.grad, loss.alpha1 * opt.pred_weight);
  if (loss.alpha2 > 0.0 && planned) {
    std::vector<double> dc = pl.d_costs;
    for (double& x : dc) x *= loss.alpha2;
    const auto pg = planner::backward(r.run.candidates, r.run.plan_ctx, params.weights, dc, cfg.cost);
    up.add(PredictionUpstream::from(pg.d_predictions[slot]));
    r.grad.d_psi += pg.d_psi;
    r.grad.d_alpha += pg.d_alpha;
  }
  if (loss.alpha3 > 0.0 && r.run.controlled) {
    std::vector<Vec6> dl = loss.setting == Setting::kRL
                               ? stack::hindsight_cost_grad(out, hind, CostWeights::hand_tuned(), cfg.cost)
                               : stack::il_loss_grad(out, sc.future_positions(sc.ego()));
    for (Vec6& g : dl) g *= loss.alpha3;
    const auto cg = controller::backward(r.run.control, r.run.control_ctx, params.weights, cfg.controller, dl, cfg.cost);
    r.controller_skipped = cg.skipped;
    if (!cg.skipped) {
      up.add(PredictionUpstream::from(cg.d_predictions[slot]));
      r.grad.d_psi += cg.d_psi;
      r.grad.d_alpha += cg.d_alpha;
    }
  }
  predictor::accumulate_grads(params.predictor, *r.run.prediction, up, r.grad.d_theta);
  return r;
}

/// Inverse of the closest approach between the logged ego and predicted-agent
/// futures, floored at `eps`.
inline double distance_weight(const Scenario& sc, double eps) {
  const auto e = sc.future_positions(sc.ego());
  const auto a = sc.future_positions(sc.predicted());
  double d = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < e.size(); ++t) d = std::min(d, (e[t] - a[t]).norm());
  return 1.0 / std::max(eps, d);
}

/// Context for scoring the logged ego future with the predicted agent's logged
/// future marked differentiable (slot 0).
inline CostContext gradcost_context(const Scenario& sc) {
  CostContext ctx;
  ctx.agents.push_back(MixtureFuture::single(sc.future_positions(sc.predicted()), true));
  for (MixtureFuture& f : stack::logged_futures(sc, sc.now_index(), sc.predicted_agent_id))
    ctx.agents.push_back(std::move(f));
  ctx.goal = sc.goal;
  ctx.lane = stack::reference_lane(sc, sc.goal);
  return ctx;
}

/// Norm of the gradient of the control cost of the logged ego future w.r.t.
/// the predicted agent's logged future positions.
inline double gradcost_weight(const Scenario& sc, const CostParams& prm = {}) {
  const CostContext ctx = gradcost_context(sc);
  const auto g = cost::grad_predictions(sc.logged(sc.ego()), ctx, CostWeights::hand_tuned(), prm);
  double s = 0.0;
  for (const Vec2& v : g[0].d_means[0]) s += v.squaredNorm();
  return std::sqrt(s);
}

/// Relevance weight of a scenario's prediction loss for the reweighted modes; 1 otherwise.
inline double relevance_weight(const Scenario& sc, TrainMode m, double eps, const CostParams& prm = {}) {
  if (m == TrainMode::kDistanceWeighted) return distance_weight(sc, eps);
  if (m == TrainMode::kGradCostWeighted) return gradcost_weight(sc, prm);
  return 1.0;
}

/// Weights rescaled to mean 1; an all-zero batch falls back to uniform weights.
inline std::vector<double> normalize_mean_one(std::vector<double> w) {
  if (w.empty()) return w;
  double m = 0.0;
  for (double x : w) m += x;
  m /= static_cast<double>(w.size());
  for (double& x : w) x = m > 0.0 ? x / m : 1.0;
  return w;
}

/// Per-batch reweighted prediction loss: mean of normalized weight times NLL.
inline double reweighted_pred_loss(const std::vector<const Scenario*>& batch, const PredictorParams& params,
                                   TrainMode m, double eps = 1e-3, const CostParams& prm = {}) {
  std::vector<double> w;
  for (const Scenario* sc : batch) w.push_back(relevance_weight(*sc, m, eps, prm));
  w = normalize_mean_one(std::move(w));
  double l = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Scenario& sc = *batch[i];
    const auto pred = predictor::predict(params, sc.history(sc.predicted()), sc.ego().states[sc.now_index()]);
    l += w[i] * predictor::nll(pred, sc.future_positions(sc.predicted())).value;
  }
  return batch.empty() ? 0.0 : l / static_cast<double>(batch.size());
}

/// Adam with global-norm gradient clipping over a flat parameter vector.
struct Adam {
  double lr = 0.003, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, clip = 10.0;
  Eigen::VectorXd m, v;
  long step_count = 0;

  void step(Eigen::VectorXd& x, Eigen::VectorXd g) {
    if (m.size() != x.size()) {
      m = Eigen::VectorXd::Zero(x.size());
      v = Eigen::VectorXd::Zero(x.size());
    }
    const double n = g.norm();
    if (n > clip) g *= clip / n;
    ++step_count;
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g.cwiseProduct(g);
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
    x.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

/// Which parameters a mode updates: predictor weights, or (psi_2..psi_5, alpha).
inline bool trains_predictor(TrainMode m) { return m != TrainMode::kCostTuning; }
inline bool trains_cost(TrainMode m) { return m == TrainMode::kCostTuning; }

/// Trainable parameters as one flat vector.
inline Eigen::VectorXd pack(const StackParams& p, TrainMode m) {
  if (trains_predictor(m)) return p.predictor.theta;
  Eigen::VectorXd x(5);
  x.head<4>() = p.weights.psi.tail<4>();
  x[4] = p.weights.alpha;
  return x;
}
inline void unpack(StackParams& p, TrainMode m, const Eigen::VectorXd& x) {
  if (trains_predictor(m)) {
    p.predictor.theta = x;
    return;
  }
  p.weights.psi.tail<4>() = x.head<4>();
  // alpha stays positive
  p.weights.alpha = std::max(x[4], 1e-6);
}
inline Eigen::VectorXd pack_grad(const GradBundle& g, TrainMode m) {
  if (trains_predictor(m)) return g.d_theta;
  Eigen::VectorXd x(5);
  x.head<4>() = g.d_psi.tail<4>();
  x[4] = g.d_alpha;
  return x;
}

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double val_pred = 0.0, val_plan = 0.0, val_ctr = 0.0, val_total = 0.0;
  int train_used = 0, train_skipped = 0, controller_skipped = 0;
  int val_used = 0, val_skipped = 0;

  nlohmann::json to_json() const {
    return {{"epoch", epoch},       {"train_loss", train_loss}, {"val_pred", val_pred},
            {"val_plan", val_plan}, {"val_ctr", val_ctr},       {"val_total", val_total},
            {"train_used", train_used}, {"train_skipped", train_skipped},
            {"controller_skipped", controller_skipped}, {"val_used", val_used}, {"val_skipped", val_skipped}};
  }
};

struct TrainResult {
  StackParams params;
  std::vector<EpochStats> log;
};

/// Mean losses over a set without gradients; scenarios the stack rejects are counted, not scored.
inline EpochStats evaluate_losses(const std::vector<Scenario>& set, const StackParams& p, const LossConfig& loss,
                                  double bias_offset, const StackConfig& base = {}) {
  EpochStats s;
  for (const Scenario& sc : set) {
    try {
      const auto r = total_loss_and_grads(sc, p, loss, StackConfig::for_scenario(sc, base), {bias_offset, 1.0, false});
      s.val_pred += r.parts.pred;
      s.val_plan += r.parts.plan;
      s.val_ctr += r.parts.ctr;
      s.val_total += r.parts.total;
      ++s.val_used;
    } catch (const DomainError&) {
      ++s.val_skipped;
    }
  }
  if (s.val_used > 0) {
    s.val_pred /= s.val_used;
    s.val_plan /= s.val_used;
    s.val_ctr /= s.val_used;
    s.val_total /= s.val_used;
  }
  return s;
}

/// Mini-batch Adam over `train_set`, validating on `val_set` after every epoch.
/// Deterministic given the seed; `on_epoch` sees each epoch's statistics and
/// `on_update` the parameters after every optimizer step.
inline TrainResult train(const std::vector<Scenario>& train_set, const std::vector<Scenario>& val_set,
                         StackParams init, const TrainConfig& tc, const LossConfig& loss,
                         const std::function<void(const EpochStats&)>& on_epoch = {},
                         const std::function<void(const StackParams&)>& on_update = {}) {
  tc.validate();
  loss.validate();
  TrainResult res;
  res.params = std::move(init);
  Adam opt;
  opt.lr = tc.learning_rate;
  opt.clip = tc.clip_norm;
  Eigen::VectorXd x = pack(res.params, tc.mode);
  std::mt19937_64 rng(scenario::mix(tc.seed ^ 0x7261696eULL));
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochStats st;
    st.epoch = epoch;
    double loss_sum = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += tc.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + tc.batch_size);
      std::vector<double> rw;
      for (std::size_t i = b0; i < b1; ++i)
        rw.push_back(relevance_weight(train_set[order[i]], tc.mode, tc.distance_eps));
      rw = normalize_mean_one(std::move(rw));
      GradBundle g = GradBundle::zeros(res.params);
      int used = 0;
      for (std::size_t i = b0; i < b1; ++i) {
        const Scenario& sc = train_set[order[i]];
        ScenarioLoss r;
        try {
          r = total_loss_and_grads(sc, res.params, loss, StackConfig::for_scenario(sc, tc.stack),
                                   {tc.bias_offset, rw[i - b0], true});
        } catch (const DomainError&) {
          ++st.train_skipped;
          continue;
        }
        if (!std::isfinite(r.parts.total) || !r.grad.d_theta.allFinite() || !r.grad.d_psi.allFinite() ||
            !std::isfinite(r.grad.d_alpha))
          throw NumericalError("training diverged on scenario '" + sc.id + "' in epoch " + std::to_string(epoch));
        st.controller_skipped += r.controller_skipped;
        g.add(r.grad);
        loss_sum += r.parts.total;
        ++used;
      }
      st.train_used += used;
      if (used == 0) continue;
      const Eigen::VectorXd gx = pack_grad(g, tc.mode) / static_cast<double>(used);
      if (tc.learning_rate > 0.0) {
        opt.step(x, gx);
        unpack(res.params, tc.mode, x);
        if (on_update) on_update(res.params);
      }
    }
    st.train_loss = st.train_used > 0 ? loss_sum / st.train_used : 0.0;
    const EpochStats v = evaluate_losses(val_set, res.params, loss, tc.bias_offset, tc.stack);
    st.val_pred = v.val_pred;
    st.val_plan = v.val_plan;
    st.val_ctr = v.val_ctr;
    st.val_total = v.val_total;
    st.val_used = v.val_used;
    st.val_skipped = v.val_skipped;
    res.log.push_back(st);
    if (on_epoch) on_epoch(st);
  }
  return res;
}

/// Initial parameters for a run: predictor seeded from the run seed, cost
/// weights hand-tuned.
inline StackParams initial_params(const PredictorConfig& pc, std::uint64_t seed) {
  StackParams p;
  p.predictor = PredictorParams::init(pc, scenario::mix(seed ^ 0x70726564ULL));
  return p;
}

/// Hand-tuned weights with psi_2..psi_5 moved by log(1 +- fraction), signs drawn from `seed`.
inline CostWeights perturbed_weights(double fraction, std::uint64_t seed) {
  CostWeights w = CostWeights::hand_tuned();
  std::mt19937_64 rng(scenario::mix(seed ^ 0x70657274ULL));
  for (int i = 1; i < kNumCostTerms; ++i) w.psi[i] += std::log(1.0 + (rng() & 1 ? fraction : -fraction));
  return w;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr const char* kCheckpointFormat = "diffstack.checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  StackParams params;
  std::string label;  // method name used in reports
  TrainConfig train;
  LossConfig loss;

  nlohmann::json config_json() const {
    const PredictorConfig& pc = params.predictor.cfg;
    return {{"train",
             {{"epochs", train.epochs},
              {"batch_size", train.batch_size},
              {"learning_rate", train.learning_rate},
              {"clip_norm", train.clip_norm},
              {"seed", train.seed},
              {"mode", to_string(train.mode)},
              {"bias_offset", train.bias_offset},
              {"distance_eps", train.distance_eps},
              {"train_fraction", train.train_fraction}}},
            {"stack", {{"use_planner", train.stack.use_planner}, {"use_controller", train.stack.use_controller}}},
            {"loss",
             {{"alpha1", loss.alpha1}, {"alpha2", loss.alpha2}, {"alpha3", loss.alpha3},
              {"setting", to_string(loss.setting)}}},
            {"predictor",
             {{"modes", pc.modes},
              {"horizon", pc.horizon},
              {"history_steps", pc.history_steps},
              {"hidden", pc.hidden},
              {"dt", pc.dt},
              {"heading_rate_scale", pc.heading_rate_scale},
              {"accel_scale", pc.accel_scale},
              {"log_var_bound", pc.log_var_bound}}}};
  }
};

inline std::uint64_t config_hash(const nlohmann::json& j) { return scenario::hash_id(j.dump(), 0); }

inline nlohmann::json to_json(const Checkpoint& c) {
  const nlohmann::json cfg = c.config_json();
  std::vector<double> theta(c.params.predictor.theta.data(),
                            c.params.predictor.theta.data() + c.params.predictor.theta.size());
  std::vector<double> psi(c.params.weights.psi.data(), c.params.weights.psi.data() + 5);
  return {{"format", kCheckpointFormat},
          {"version", kCheckpointVersion},
          {"label", c.label},
          {"seed", c.train.seed},
          {"config", cfg},
          {"config_hash", config_hash(cfg)},
          {"theta", theta},
          {"psi", psi},
          {"alpha", c.params.weights.alpha},
          {"c_norm", c.params.weights.c_norm}};
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != kCheckpointFormat) throw DataError("checkpoint: unknown format");
    if (j.at("version").get<int>() != kCheckpointVersion) throw DataError("checkpoint: unsupported version");
    Checkpoint c;
    c.label = j.at("label").get<std::string>();
    const auto& cfg = j.at("config");
    const auto& t = cfg.at("train");
    c.train.epochs = t.at("epochs");
    c.train.batch_size = t.at("batch_size");
    c.train.learning_rate = t.at("learning_rate");
    c.train.clip_norm = t.at("clip_norm");
    c.train.seed = t.at("seed");
    c.train.mode = parse_train_mode(t.at("mode"));
    c.train.bias_offset = t.at("bias_offset");
    c.train.distance_eps = t.at("distance_eps");
    c.train.train_fraction = t.at("train_fraction");
    c.train.stack.use_planner = cfg.at("stack").at("use_planner");
    c.train.stack.use_controller = cfg.at("stack").at("use_controller");
    const auto& l = cfg.at("loss");
    c.loss = {l.at("alpha1"), l.at("alpha2"), l.at("alpha3"), parse_setting(l.at("setting"))};
    const auto& p = cfg.at("predictor");
    PredictorConfig pc;
    pc.modes = p.at("modes");
    pc.horizon = p.at("horizon");
    pc.history_steps = p.at("history_steps");
    pc.hidden = p.at("hidden");
    pc.dt = p.at("dt");
    pc.heading_rate_scale = p.at("heading_rate_scale");
    pc.accel_scale = p.at("accel_scale");
    pc.log_var_bound = p.at("log_var_bound");
    const auto theta = j.at("theta").get<std::vector<double>>();
    if (theta.size() != PredictorParams::size_for(pc)) throw DataError("checkpoint: theta has the wrong length");
    c.params.predictor.cfg = pc;
    c.params.predictor.theta = Eigen::Map<const Eigen::VectorXd>(theta.data(), static_cast<Eigen::Index>(theta.size()));
    const auto psi = j.at("psi").get<std::vector<double>>();
    if (psi.size() != 5) throw DataError("checkpoint: psi must have 5 entries");
    c.params.weights.psi = Vec5(psi[0], psi[1], psi[2], psi[3], psi[4]);
    c.params.weights.alpha = j.at("alpha");
    c.params.weights.c_norm = j.at("c_norm");
    if (j.at("config_hash").get<std::uint64_t>() != config_hash(cfg)) throw DataError("checkpoint: config hash mismatch");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Open-loop evaluation

/// How a method obtains its picture of the predicted agent.
struct Method {
  std::string name;
  PredictionSource source = PredictionSource::kModel;
  const StackParams* params = nullptr;  // model methods only
  std::uint64_t seed = 0;
};

struct EvalRecord {
  std::string scenario_id;
  double ade = std::numeric_limits<double>::quiet_NaN();  // model methods only
  double nll = std::numeric_limits<double>::quiet_NaN();
  double plan_loss = 0.0;
  double control_loss = 0.0;  // hindsight cost (RL) or squared distance to the logged ego (IL)
  bool skipped = false;
};

/// Per-scenario open-loop metrics of one method. Baselines plan with hand-tuned
/// weights; model methods use their own weights.
inline std::vector<EvalRecord> evaluate_open_loop(const std::vector<Scenario>& set, const Method& m, Setting setting,
                                                  const StackConfig& base = {}) {
  std::vector<EvalRecord> out;
  for (const Scenario& sc : set) {
    EvalRecord rec;
    rec.scenario_id = sc.id;
    try {
      const StackConfig cfg = StackConfig::for_scenario(sc, base);
      const Situation s = stack::situation(sc);
      const CostWeights w = m.params ? m.params->weights : CostWeights::hand_tuned();
      const auto run = stack::run(sc, s, m.params ? &m.params->predictor : nullptr, w, m.source, cfg);
      const CostContext hind = stack::hindsight_context(sc, s);
      if (run.prediction) {
        const auto gt = sc.future_positions(sc.predicted());
        rec.ade = predictor::ade(*run.prediction, gt);
        rec.nll = predictor::nll(*run.prediction, gt).value;
      }
      if (cfg.use_planner)
        rec.plan_loss =
            planner::planning_loss(run.candidates, plan_target(sc, run.candidates, hind, setting, cfg.cost)).value;
      rec.control_loss = control_loss(sc, run.output(), hind, setting, cfg.cost);
    } catch (const DomainError&) {
      rec.skipped = true;
    }
    out.push_back(rec);
  }
  return out;
}

struct MetricMeans {
  int n = 0;
  double ade = 0.0, nll = 0.0, plan_loss = 0.0, control_loss = 0.0;
};

/// Means over scenarios scored by every run in `runs` (so baselines and models
/// are compared on the same set).
inline std::vector<MetricMeans> common_means(const std::vector<const std::vector<EvalRecord>*>& runs) {
  std::vector<MetricMeans> out(runs.size());
  if (runs.empty()) return out;
  const std::size_t n = runs.front()->size();
  for (const auto* r : runs)
    if (r->size() != n) throw DomainError("common_means: runs cover different scenario sets");
  for (std::size_t i = 0; i < n; ++i) {
    bool ok = true;
    for (const auto* r : runs) ok = ok && !(*r)[i].skipped;
    if (!ok) continue;
    for (std::size_t k = 0; k < runs.size(); ++k) {
      const EvalRecord& e = (*runs[k])[i];
      ++out[k].n;
      out[k].ade += e.ade;
      out[k].nll += e.nll;
      out[k].plan_loss += e.plan_loss;
      out[k].control_loss += e.control_loss;
    }
  }
  for (MetricMeans& m : out) {
    if (m.n == 0) continue;
    m.ade /= m.n;
    m.nll /= m.n;
    m.plan_loss /= m.n;
    m.control_loss /= m.n;
  }
  return out;
}

/// Mean and standard error (sample std / sqrt(n)); SE is 0 for a single value.
inline std::pair<double, double> mean_se(const std::vector<double>& xs) {
  if (xs.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  if (xs.size() < 2) return {m, 0.0};
  double v = 0.0;
  for (double x : xs) v += (x - m) * (x - m);
  v /= static_cast<double>(xs.size() - 1);
  return {m, std::sqrt(v / static_cast<double>(xs.size()))};
}

}  // namespace training
}  // namespace diffstack
