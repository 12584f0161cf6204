#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffstack/dynamics.hpp"
#include "diffstack/lanegeo.hpp"
#include "diffstack/predictor.hpp"

namespace diffstack {

/// Logged states of one vehicle over the whole scenario, with the controls that
/// produced them (controls.size() == states.size() - 1).
struct AgentTrack {
  std::string id;
  std::vector<State> states;
  std::vector<Control> controls;
  friend bool operator==(const AgentTrack&, const AgentTrack&) = default;
};

struct Scenario {
  std::string id;
  std::string family;
  double dt = 0.5;
  int past_steps = 9;     // H / dt + 1, ending at the current time
  int horizon_steps = 6;  // planning horizon T / dt
  int future_steps = 6;   // logged steps after the current time (>= horizon)
  std::vector<AgentTrack> agents;
  std::string ego_id;
  std::string predicted_agent_id;
  LaneGraph lanes;
  State goal;

  int now_index() const { return past_steps - 1; }
  int total_steps() const { return past_steps + future_steps; }

  const AgentTrack& agent(const std::string& aid) const {
    for (const AgentTrack& a : agents)
      if (a.id == aid) return a;
    throw DataError("scenario '" + id + "': no agent '" + aid + "'");
  }
  const AgentTrack& ego() const { return agent(ego_id); }
  const AgentTrack& predicted() const { return agent(predicted_agent_id); }

  /// History window ending at log index `at` (defaults to the current time).
  AgentHistory history(const AgentTrack& a, int at = -1) const {
    if (at < 0) at = now_index();
    if (at - past_steps + 1 < 0 || at >= static_cast<int>(a.states.size()))
      throw DomainError("scenario '" + id + "': history window out of range for agent '" + a.id + "'");
    AgentHistory h;
    h.states.assign(a.states.begin() + (at - past_steps + 1), a.states.begin() + at + 1);
    h.is_ego = a.id == ego_id;
    return h;
  }
  /// Logged positions at steps at+1 .. at+n.
  std::vector<Vec2> future_positions(const AgentTrack& a, int n = -1, int at = -1) const {
    if (at < 0) at = now_index();
    if (n < 0) n = horizon_steps;
    if (at + n >= static_cast<int>(a.states.size()))
      throw DomainError("scenario '" + id + "': future window out of range for agent '" + a.id + "'");
    std::vector<Vec2> out;
    for (int t = 1; t <= n; ++t) out.push_back(a.states[at + t].position());
    return out;
  }
  /// Logged trajectory segment of `n` steps starting at log index `at`.
  Trajectory logged(const AgentTrack& a, int n = -1, int at = -1) const {
    if (at < 0) at = now_index();
    if (n < 0) n = horizon_steps;
    if (at + n >= static_cast<int>(a.states.size()))
      throw DomainError("scenario '" + id + "': log segment out of range for agent '" + a.id + "'");
    Trajectory tr;
    tr.dt = dt;
    tr.states.assign(a.states.begin() + at, a.states.begin() + at + n + 1);
    tr.controls.assign(a.controls.begin() + at, a.controls.begin() + at + n);
    return tr;
  }

  friend bool operator==(const Scenario& a, const Scenario& b) {
    if (a.lanes.lanes.size() != b.lanes.lanes.size()) return false;
    for (std::size_t i = 0; i < a.lanes.lanes.size(); ++i) {
      const Lane& x = a.lanes.lanes[i];
      const Lane& y = b.lanes.lanes[i];
      if (x.id != y.id || x.points != y.points || x.headings != y.headings) return false;
    }
    return a.id == b.id && a.family == b.family && a.dt == b.dt && a.past_steps == b.past_steps &&
           a.horizon_steps == b.horizon_steps && a.future_steps == b.future_steps && a.agents == b.agents &&
           a.ego_id == b.ego_id && a.predicted_agent_id == b.predicted_agent_id && a.goal == b.goal;
  }
};

inline const std::vector<std::string>& scenario_families() {
  static const std::vector<std::string> f{"lane_follow", "lane_change", "crossing", "lead_brake", "cut_in", "interactive"};
  return f;
}

struct ScenarioConfig {
  std::string family = "interactive";  // "interactive" cycles lead_brake, crossing, cut_in
  int count = 100;
  double noise = 1.0;  // scale of the agents' control noise
  std::uint64_t seed = 0;
  double dt = 0.5;
  double past_seconds = 4.0;
  double horizon_seconds = 3.0;
  double future_seconds = 3.0;  // 13 for closed-loop logs
  std::string id_prefix = "s";

  int steps(double seconds) const {
    const double n = seconds / dt;
    if (std::abs(n - std::round(n)) > 1e-9) throw ConfigError("scenario: " + std::to_string(seconds) + " s is not a multiple of dt");
    return static_cast<int>(std::round(n));
  }
  void validate() const {
    if (count < 0) throw ConfigError("scenario: count must be non-negative");
    if (!(dt > 0.0)) throw ConfigError("scenario: dt must be positive");
    if (!(noise >= 0.0)) throw ConfigError("scenario: noise must be non-negative");
    bool known = false;
    for (const auto& f : scenario_families()) known = known || f == family;
    if (!known) throw ConfigError("scenario: unknown family '" + family + "'");
    steps(past_seconds);
    if (steps(horizon_seconds) < 1) throw ConfigError("scenario: horizon must be at least one step");
    if (steps(future_seconds) < steps(horizon_seconds)) throw ConfigError("scenario: future shorter than the horizon");
  }
};

/// Checks shapes and references, naming the offending field.
inline void validate(const Scenario& s) {
  const std::string where = "scenario '" + s.id + "': ";
  if (!(s.dt > 0.0)) throw DataError(where + "dt must be positive");
  if (s.past_steps < 1 || s.horizon_steps < 1 || s.future_steps < s.horizon_steps)
    throw DataError(where + "inconsistent step counts");
  try {
    s.lanes.validate();
  } catch (const DomainError& e) {
    throw DataError(where + e.what());
  }
  if (s.lanes.lanes.empty()) throw DataError(where + "lane graph is empty");
  bool has_ego = false, has_pred = false;
  for (const AgentTrack& a : s.agents) {
    has_ego = has_ego || a.id == s.ego_id;
    has_pred = has_pred || a.id == s.predicted_agent_id;
    if (static_cast<int>(a.states.size()) < s.past_steps)
      throw DataError(where + "agent '" + a.id + "' history incomplete: expected " + std::to_string(s.past_steps) +
                      " past states, got " + std::to_string(a.states.size()));
    if (static_cast<int>(a.states.size()) != s.total_steps())
      throw DataError(where + "agent '" + a.id + "' future missing: expected " + std::to_string(s.total_steps()) +
                      " states, got " + std::to_string(a.states.size()));
    if (a.controls.size() + 1 != a.states.size())
      throw DataError(where + "agent '" + a.id + "' controls: expected " + std::to_string(a.states.size() - 1) +
                      ", got " + std::to_string(a.controls.size()));
    for (const State& st : a.states)
      if (!st.finite()) throw DataError(where + "agent '" + a.id + "' has a non-finite state");
  }
  if (!has_ego) throw DataError(where + "ego_id '" + s.ego_id + "' is not an agent");
  if (!has_pred) throw DataError(where + "predicted_agent_id '" + s.predicted_agent_id + "' is not an agent");
  if (s.ego_id == s.predicted_agent_id) throw DataError(where + "predicted agent must differ from the ego");
}

namespace scenario {

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kFormat = "diffstack.scenarios";

using json = nlohmann::json;

namespace detail {

inline json state_json(const State& s) { return json::array({s.x, s.y, s.heading, s.v}); }
inline json control_json(const Control& u) { return json::array({u.heading_rate, u.accel}); }

inline const json& field(const json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) throw DataError(where + "missing field '" + key + "'");
  return j.at(key);
}

template <class T>
T get(const json& j, const char* key, const std::string& where) {
  try {
    return field(j, key, where).get<T>();
  } catch (const json::exception&) {
    throw DataError(where + "field '" + key + "' has the wrong type");
  }
}

inline std::vector<double> numbers(const json& j, std::size_t n, const std::string& where) {
  if (!j.is_array() || j.size() != n) throw DataError(where + "expected an array of " + std::to_string(n) + " numbers");
  std::vector<double> out;
  for (const json& x : j) {
    if (!x.is_number()) throw DataError(where + "expected a number");
    out.push_back(x.get<double>());
  }
  return out;
}

inline State parse_state(const json& j, const std::string& where) {
  const auto v = numbers(j, 4, where);
  return {v[0], v[1], v[2], v[3]};
}

}  // namespace detail

inline json to_json(const Scenario& s) {
  json j;
  j["id"] = s.id;
  j["family"] = s.family;
  j["dt"] = s.dt;
  j["past_steps"] = s.past_steps;
  j["horizon_steps"] = s.horizon_steps;
  j["future_steps"] = s.future_steps;
  j["ego_id"] = s.ego_id;
  j["predicted_agent_id"] = s.predicted_agent_id;
  j["goal"] = detail::state_json(s.goal);
  j["lanes"] = json::array();
  for (const Lane& l : s.lanes.lanes) {
    json lj;
    lj["id"] = l.id;
    lj["points"] = json::array();
    for (const Vec2& p : l.points) lj["points"].push_back(json::array({p.x(), p.y()}));
    lj["headings"] = l.headings;
    j["lanes"].push_back(std::move(lj));
  }
  j["agents"] = json::array();
  for (const AgentTrack& a : s.agents) {
    json aj;
    aj["id"] = a.id;
    aj["states"] = json::array();
    for (const State& st : a.states) aj["states"].push_back(detail::state_json(st));
    aj["controls"] = json::array();
    for (const Control& u : a.controls) aj["controls"].push_back(detail::control_json(u));
    j["agents"].push_back(std::move(aj));
  }
  return j;
}

inline Scenario from_json(const json& j, const std::string& context = "") {
  using detail::get;
  std::string where = context + "scenario: ";
  Scenario s;
  s.id = get<std::string>(j, "id", where);
  where = context + "scenario '" + s.id + "': ";
  s.family = get<std::string>(j, "family", where);
  s.dt = get<double>(j, "dt", where);
  s.past_steps = get<int>(j, "past_steps", where);
  s.horizon_steps = get<int>(j, "horizon_steps", where);
  s.future_steps = get<int>(j, "future_steps", where);
  s.ego_id = get<std::string>(j, "ego_id", where);
  s.predicted_agent_id = get<std::string>(j, "predicted_agent_id", where);
  s.goal = detail::parse_state(detail::field(j, "goal", where), where + "goal: ");
  const json& lanes = detail::field(j, "lanes", where);
  if (!lanes.is_array()) throw DataError(where + "field 'lanes' must be an array");
  for (const json& lj : lanes) {
    const std::string lid = get<std::string>(lj, "id", where + "lane: ");
    const std::string lw = where + "lane '" + lid + "': ";
    std::vector<Vec2> pts;
    const json& pj = detail::field(lj, "points", lw);
    if (!pj.is_array()) throw DataError(lw + "field 'points' must be an array");
    for (const json& p : pj) {
      const auto v = detail::numbers(p, 2, lw + "points: ");
      pts.emplace_back(v[0], v[1]);
    }
    const json& hj = detail::field(lj, "headings", lw);
    const auto hd = detail::numbers(hj, hj.is_array() ? hj.size() : 0, lw + "headings: ");
    try {
      s.lanes.lanes.push_back(Lane::from_points(lid, pts, hd));
    } catch (const DomainError& e) {
      throw DataError(where + e.what());
    }
  }
  const json& agents = detail::field(j, "agents", where);
  if (!agents.is_array()) throw DataError(where + "field 'agents' must be an array");
  for (const json& aj : agents) {
    AgentTrack a;
    a.id = get<std::string>(aj, "id", where + "agent: ");
    const std::string aw = where + "agent '" + a.id + "': ";
    const json& sj = detail::field(aj, "states", aw);
    const json& cj = detail::field(aj, "controls", aw);
    if (!sj.is_array() || !cj.is_array()) throw DataError(aw + "states and controls must be arrays");
    for (const json& x : sj) a.states.push_back(detail::parse_state(x, aw + "states: "));
    for (const json& x : cj) {
      const auto v = detail::numbers(x, 2, aw + "controls: ");
      a.controls.push_back({v[0], v[1]});
    }
    s.agents.push_back(std::move(a));
  }
  validate(s);
  return s;
}

/// JSON Lines: a header object followed by one scenario per line.
inline void save(const std::string& path, const std::vector<Scenario>& scenarios) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  json header;
  header["format"] = kFormat;
  header["version"] = kSchemaVersion;
  header["count"] = scenarios.size();
  if (!scenarios.empty()) {
    header["dt"] = scenarios.front().dt;
    header["past_steps"] = scenarios.front().past_steps;
    header["horizon_steps"] = scenarios.front().horizon_steps;
    header["future_steps"] = scenarios.front().future_steps;
  }
  out << header.dump() << '\n';
  for (const Scenario& s : scenarios) out << to_json(s).dump() << '\n';
  if (!out) throw DataError("write to '" + path + "' failed");
}

inline std::vector<Scenario> load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open scenario file '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw DataError(path + ": empty file");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw DataError(path + ":1: malformed header: " + e.what());
  }
  const std::string hw = path + ": header: ";
  if (detail::get<std::string>(header, "format", hw) != kFormat) throw DataError(hw + "unknown format");
  const int version = detail::get<int>(header, "version", hw);
  if (version != kSchemaVersion) throw DataError(hw + "unsupported version " + std::to_string(version));
  const auto count = detail::get<std::size_t>(header, "count", hw);
  std::vector<Scenario> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": malformed JSON: " + e.what());
    }
    Scenario s = from_json(j, path + ":" + std::to_string(lineno) + ": ");
    if (count > 0) {
      const std::string w = path + ":" + std::to_string(lineno) + ": scenario '" + s.id + "': ";
      if (s.dt != detail::get<double>(header, "dt", hw)) throw DataError(w + "dt does not match the header");
      if (s.past_steps != detail::get<int>(header, "past_steps", hw) ||
          s.horizon_steps != detail::get<int>(header, "horizon_steps", hw) ||
          s.future_steps != detail::get<int>(header, "future_steps", hw))
        throw DataError(w + "step counts do not match the header");
    }
    out.push_back(std::move(s));
  }
  if (out.size() != count)
    throw DataError(path + ": header announces " + std::to_string(count) + " scenarios, found " +
                    std::to_string(out.size()));
  return out;
}

/// SplitMix64 finalizer; used to derive independent seeds and split keys.
inline std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_id(const std::string& id, std::uint64_t seed) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : id) h = (h ^ c) * 1099511628211ULL;
  return mix(h ^ mix(seed));
}

/// Deterministic split keyed on scenario ids, so input order does not matter.
/// The first round(fraction * n) ids in hash order form the training set.
inline std::pair<std::vector<Scenario>, std::vector<Scenario>> split(const std::vector<Scenario>& scenarios,
                                                                     double train_fraction, std::uint64_t seed) {
  if (!(train_fraction >= 0.0 && train_fraction <= 1.0)) throw ConfigError("split: fraction must be in [0, 1]");
  std::vector<std::pair<std::uint64_t, std::size_t>> keys;
  for (std::size_t i = 0; i < scenarios.size(); ++i) keys.emplace_back(hash_id(scenarios[i].id, seed), i);
  std::sort(keys.begin(), keys.end(), [&](const auto& a, const auto& b) {
    return a.first != b.first ? a.first < b.first : scenarios[a.second].id < scenarios[b.second].id;
  });
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(scenarios.size())));
  std::pair<std::vector<Scenario>, std::vector<Scenario>> out;
  for (std::size_t r = 0; r < keys.size(); ++r) (r < n_train ? out.first : out.second).push_back(scenarios[keys[r].second]);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic generator

namespace gen {

inline constexpr double kLaneWidth = 3.5;
inline constexpr double kVehicleLength = 4.5;

/// Heading-rate command steering toward `target_offset` from the lane centerline.
inline double lane_keep(const State& s, const Lane& lane, double target_offset) {
  const LaneProjection pr = lanegeo::project(lane, s.position());
  const double e = pr.signed_lateral_offset - target_offset;
  const double desired = pr.lane_heading - std::atan(0.05 * e);
  return std::clamp(1.0 * wrap_angle(desired - s.heading), -0.5, 0.5);
}

/// Intelligent-driver-model acceleration behind a leader at center distance `gap`.
inline double idm(double v, double v_des, double gap, double v_lead, double a_max = 1.5, double b = 2.5,
                  double jam = 2.0, double headway = 0.8) {
  const double s = std::max(gap - kVehicleLength, 0.1);
  const double s_star = jam + std::max(0.0, v * headway + v * (v - v_lead) / (2.0 * std::sqrt(a_max * b)));
  const double free = 1.0 - std::pow(v / std::max(v_des, 0.1), 4);
  const double inter = std::isfinite(gap) ? (s_star / s) * (s_star / s) : 0.0;
  return std::clamp(a_max * (free - inter), -4.0, 2.0);
}

struct Actor {
  AgentTrack track;
  std::function<Control(int step, const std::vector<State>& world, std::mt19937_64& rng)> policy;
};

/// Rolls all actors forward jointly; each policy sees everyone's current state.
inline void simulate(std::vector<Actor>& actors, int steps, double dt, std::mt19937_64& rng) {
  for (int k = 0; k < steps; ++k) {
    std::vector<State> world;
    for (const Actor& a : actors) world.push_back(a.track.states.back());
    std::vector<Control> us;
    for (Actor& a : actors) us.push_back(a.policy(k, world, rng));
    for (std::size_t i = 0; i < actors.size(); ++i) {
      Control u = us[i];
      const State& s = actors[i].track.states.back();
      // no reversing in the logs
      if (s.v + u.accel * dt < 0.0) u.accel = -s.v / dt;
      for (int n = 0; n < 8 && s.v + u.accel * dt < 0.0; ++n)
        u.accel = std::nextafter(u.accel, std::numeric_limits<double>::infinity());
      actors[i].track.controls.push_back(u);
      actors[i].track.states.push_back(dynamics::step(s, u, dt));
    }
  }
}

/// Leader of `self` among `world` in the ego lane corridor: center distance and speed.
inline std::pair<double, double> lane_leader(const State& self, const std::vector<State>& world, std::size_t self_idx,
                                             const Lane& lane, double corridor = 2.2) {
  const double s_self = lanegeo::project(lane, self.position()).arclength;
  double best = std::numeric_limits<double>::infinity(), v = 0.0;
  for (std::size_t j = 0; j < world.size(); ++j) {
    if (j == self_idx) continue;
    const LaneProjection pr = lanegeo::project(lane, world[j].position());
    if (std::abs(pr.signed_lateral_offset) > corridor) continue;
    const double ds = pr.arclength - s_self;
    if (ds > 0.0 && ds < best) {
      best = ds;
      v = world[j].v * std::cos(wrap_angle(world[j].heading - pr.lane_heading));
    }
  }
  return {best, v};
}

inline LaneGraph straight_road(bool crossing, double x_cross) {
  LaneGraph g;
  g.lanes.push_back(Lane::straight("main", {-150.0, 0.0}, 0.0, 400.0));
  g.lanes.push_back(Lane::straight("left", {-150.0, kLaneWidth}, 0.0, 400.0));
  if (crossing) g.lanes.push_back(Lane::straight("cross", {x_cross, -150.0}, kPi / 2, 300.0));
  return g;
}

/// One scenario of the given family; the current time is at log index past_steps - 1
/// and the ego sits near the origin at that time.
inline Scenario generate_one(const ScenarioConfig& cfg, const std::string& family, const std::string& id,
                             std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * U(rng); };
  std::normal_distribution<double> N(0.0, 1.0);
  const double dt = cfg.dt;
  const int past = cfg.steps(cfg.past_seconds) + 1;
  const int horizon = cfg.steps(cfg.horizon_seconds);
  const int future = cfg.steps(cfg.future_seconds);
  const int total = past + future;
  const double t0 = cfg.past_seconds;  // time of the current step since the log start
  const double noise = cfg.noise;

  Scenario sc;
  sc.id = id;
  sc.family = family;
  sc.dt = dt;
  sc.past_steps = past;
  sc.horizon_steps = horizon;
  sc.future_steps = future;

  const double v_e = uni(7.0, 10.0);
  double x_cross = 0.0;
  const bool crossing = family == "crossing";
  if (crossing) x_cross = v_e * uni(1.5, 2.5);
  sc.lanes = straight_road(crossing, x_cross);
  const Lane* main = &sc.lanes.lanes[0];
  const Lane* left = &sc.lanes.lanes[1];

  std::vector<Actor> actors;
  auto noisy = [noise](Control u, std::mt19937_64& r, double sa = 0.15, double sh = 0.01) {
    std::normal_distribution<double> n(0.0, 1.0);
    u.accel += noise * sa * n(r);
    u.heading_rate += noise * sh * n(r);
    return u;
  };
  // every actor is placed by its state at the current time and rolled back
  // to the log start along its lane at constant speed
  auto start_state = [&](const Lane& lane, double s_now, double offset, double v) {
    const auto lp = lanegeo::point_at(lane, s_now - v * t0, offset);
    return State{lp.position.x(), lp.position.y(), lp.heading, v};
  };
  const double s_main0 = lanegeo::project(*main, {0.0, 0.0}).arclength;

  // ego: IDM on the main lane; in lane_change it moves over to the left lane
  // interactive families get a tailgating ego so the key agent comes close
  const bool nominal = family == "lane_follow" || family == "lane_change";
  const double ego_jam = nominal ? 2.0 : uni(0.5, 2.0);
  const double ego_headway = nominal ? 0.8 : uni(0.2, 0.6);
  const double ego_tc = family == "lane_change" ? t0 + uni(-1.0, 1.0) : std::numeric_limits<double>::infinity();
  Actor ego;
  ego.track.id = "ego";
  ego.track.states.push_back(start_state(*main, s_main0, 0.0, v_e));
  ego.policy = [main, v_e, ego_jam, ego_headway, ego_tc, dt](int k, const std::vector<State>& w, std::mt19937_64&) {
    const double target = k * dt >= ego_tc ? kLaneWidth : 0.0;
    const auto [gap, vl] = lane_leader(w[0], w, 0, *main);
    return Control{lane_keep(w[0], *main, target), idm(w[0].v, v_e, gap, vl, 1.5, 2.5, ego_jam, ego_headway)};
  };
  actors.push_back(std::move(ego));

  Actor key;
  key.track.id = "a1";
  if (family == "lane_follow") {
    const double ahead = (U(rng) < 0.5 ? 1.0 : -1.0) * uni(15.0, 30.0);
    key.track.states.push_back(start_state(*left, s_main0 + ahead, 0.0, v_e));
    key.policy = [left, v_e, noisy](int, const std::vector<State>& w, std::mt19937_64& r) {
      return noisy(Control{lane_keep(w[1], *left, 0.0), 0.5 * (v_e - w[1].v)}, r);
    };
  } else if (family == "lane_change") {
    // traffic in the target lane well ahead of the ego
    const double ahead = uni(18.0, 30.0);
    const double v_a = v_e + uni(0.0, 1.0);
    key.track.states.push_back(start_state(*left, s_main0 + ahead, 0.0, v_a));
    key.policy = [left, v_a, noisy](int, const std::vector<State>& w, std::mt19937_64& r) {
      return noisy(Control{lane_keep(w[1], *left, 0.0), 0.5 * (v_a - w[1].v)}, r);
    };
  } else if (family == "lead_brake") {
    const double gap = uni(6.0, 12.0);
    const double v_l = v_e + uni(-1.0, 0.5);
    const double t_b = t0 + uni(-1.5, 1.5);
    const double decel = uni(2.0, 4.0);
    key.track.states.push_back(start_state(*main, s_main0 + gap + (v_l - v_e) * t0, 0.0, v_l));
    key.policy = [main, t_b, decel, dt, noisy](int k, const std::vector<State>& w, std::mt19937_64& r) {
      const double t = k * dt;
      const double a = (t >= t_b && t < t_b + 2.5) ? -decel : 0.0;
      return noisy(Control{lane_keep(w[1], *main, 0.0), a}, r, 0.1);
    };
  } else if (family == "cut_in") {
    const double ahead = uni(3.0, 9.0);
    const double v_a = v_e - uni(0.0, 2.0);
    const double t_c = t0 + uni(-1.5, 1.0);
    key.track.states.push_back(start_state(*main, s_main0 + ahead + (v_a - v_e) * t0, kLaneWidth, v_a));
    key.policy = [main, v_a, t_c, dt, noisy](int k, const std::vector<State>& w, std::mt19937_64& r) {
      const double target = k * dt >= t_c ? 0.0 : kLaneWidth;
      return noisy(Control{lane_keep(w[1], *main, target), 0.5 * (v_a - w[1].v)}, r);
    };
  } else if (crossing) {
    const Lane* cross = &sc.lanes.lanes[2];
    const double v_a = uni(5.0, 8.0);
    // arrival at the conflict point relative to the ego's free-flow arrival
    const double t_arrive = x_cross / v_e + uni(-1.2, 1.2);
    const double s_conflict = lanegeo::project(*cross, {x_cross, 0.0}).arclength;
    key.track.states.push_back(start_state(*cross, s_conflict - v_a * t_arrive, 0.0, v_a));
    key.policy = [cross, v_a, noisy](int, const std::vector<State>& w, std::mt19937_64& r) {
      return noisy(Control{lane_keep(w[1], *cross, 0.0), 0.5 * (v_a - w[1].v)}, r);
    };
  } else {
    throw ConfigError("scenario: unknown family '" + family + "'");
  }
  actors.push_back(std::move(key));

  // background traffic far behind in the adjacent lane
  Actor bg;
  bg.track.id = "a2";
  const double v_b = uni(7.0, 10.0);
  bg.track.states.push_back(start_state(*left, s_main0 - uni(40.0, 60.0), 0.0, v_b));
  bg.policy = [left, v_b, noisy](int, const std::vector<State>& w, std::mt19937_64& r) {
    return noisy(Control{lane_keep(w[2], *left, 0.0), 0.5 * (v_b - w[2].v)}, r);
  };
  actors.push_back(std::move(bg));

  // the crossing agent only appears in the scene's world for the ego via the corridor test
  simulate(actors, total - 1, dt, rng);

  for (Actor& a : actors) sc.agents.push_back(std::move(a.track));
  sc.ego_id = "ego";
  // closest vehicle to the ego at the current time
  const Vec2 pe = sc.agents[0].states[past - 1].position();
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i < sc.agents.size(); ++i) {
    const double d = (sc.agents[i].states[past - 1].position() - pe).norm();
    if (d < best) best = d, sc.predicted_agent_id = sc.agents[i].id;
  }
  sc.goal = sc.agents[0].states[past - 1 + horizon];
  return sc;
}

inline std::string family_for(const ScenarioConfig& cfg, int index) {
  if (cfg.family != "interactive") return cfg.family;
  static const char* mix[] = {"lead_brake", "crossing", "cut_in"};
  return mix[index % 3];
}

}  // namespace gen

/// Scenarios for `cfg`, deterministic in the seed. Scenario i uses its own seed
/// derived from (seed, i); `attempt` offsets it when a scenario is regenerated.
inline Scenario generate_at(const ScenarioConfig& cfg, int index, int attempt = 0) {
  const std::uint64_t s = mix(mix(cfg.seed) ^ mix(static_cast<std::uint64_t>(index) * 1000003ULL + attempt));
  Scenario sc = gen::generate_one(cfg, gen::family_for(cfg, index), cfg.id_prefix + std::to_string(index), s);
  validate(sc);
  return sc;
}

inline std::vector<Scenario> generate(const ScenarioConfig& cfg) {
  cfg.validate();
  std::vector<Scenario> out;
  out.reserve(cfg.count);
  for (int i = 0; i < cfg.count; ++i) out.push_back(generate_at(cfg, i));
  return out;
}

}  // namespace scenario
}  // namespace diffstack
