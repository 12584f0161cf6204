#pragma once

#include <limits>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "diffstack/common.hpp"
#include "diffstack/dynamics.hpp"

namespace diffstack {

/// Polyline lane centerline with per-point heading and cumulative arclength.
/// Headings are interpolated linearly in arclength within a segment.
struct Lane {
  std::string id;
  std::vector<Vec2> points;
  std::vector<double> headings;
  std::vector<double> arclength;

  double length() const { return arclength.back(); }
  std::size_t segments() const { return points.size() - 1; }

  /// Builds a lane, deriving arclength (and headings from segment directions when
  /// none are given). Throws DomainError on degenerate polylines.
  static Lane from_points(std::string id, std::vector<Vec2> pts, std::vector<double> hdgs = {}) {
    if (pts.size() < 2) throw DomainError("lane '" + id + "': needs at least 2 points");
    Lane lane;
    lane.id = std::move(id);
    lane.arclength.resize(pts.size());
    lane.arclength[0] = 0.0;
    for (std::size_t i = 1; i < pts.size(); ++i) {
      const double seg = (pts[i] - pts[i - 1]).norm();
      if (!(seg > 0.0)) throw DomainError("lane '" + lane.id + "': arclength must be strictly increasing");
      lane.arclength[i] = lane.arclength[i - 1] + seg;
    }
    if (hdgs.empty()) {
      hdgs.resize(pts.size());
      for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
        const Vec2 d = pts[i + 1] - pts[i];
        hdgs[i] = std::atan2(d.y(), d.x());
      }
      hdgs.back() = hdgs[pts.size() - 2];
    } else if (hdgs.size() != pts.size()) {
      throw DomainError("lane '" + lane.id + "': heading count does not match point count");
    }
    for (double& h : hdgs) h = wrap_angle(h);
    lane.points = std::move(pts);
    lane.headings = std::move(hdgs);
    return lane;
  }

  /// Straight lane from `start` along `heading`, sampled every `spacing` meters.
  static Lane straight(std::string id, const Vec2& start, double heading, double length, double spacing = 1.0) {
    const int n = std::max(1, static_cast<int>(std::ceil(length / spacing)));
    const Vec2 dir(std::cos(heading), std::sin(heading));
    std::vector<Vec2> pts;
    std::vector<double> hdgs;
    for (int i = 0; i <= n; ++i) {
      pts.push_back(start + dir * (length * i / n));
      hdgs.push_back(heading);
    }
    return from_points(std::move(id), std::move(pts), std::move(hdgs));
  }

  /// Heading change per meter of arclength on segment i.
  double heading_slope(std::size_t i) const {
    return wrap_angle(headings[i + 1] - headings[i]) / (arclength[i + 1] - arclength[i]);
  }

  double heading_at(double s) const {
    const std::size_t i = segment_at(s);
    const double ds = std::clamp(s, arclength[i], arclength[i + 1]) - arclength[i];
    return wrap_angle(headings[i] + heading_slope(i) * ds);
  }

  std::size_t segment_at(double s) const {
    if (s <= 0.0) return 0;
    const auto it = std::upper_bound(arclength.begin(), arclength.end(), s);
    if (it == arclength.end()) return segments() - 1;
    return std::min<std::size_t>(static_cast<std::size_t>(it - arclength.begin()) - 1, segments() - 1);
  }
};

struct LaneGraph {
  std::vector<Lane> lanes;

  void validate() const {
    std::unordered_set<std::string> ids;
    for (const Lane& l : lanes) {
      if (!ids.insert(l.id).second) throw DomainError("lane graph: duplicate lane id '" + l.id + "'");
    }
  }
  const Lane* find(const std::string& id) const {
    for (const Lane& l : lanes)
      if (l.id == id) return &l;
    return nullptr;
  }
};

struct LaneProjection {
  Vec2 closest_point = Vec2::Zero();
  double signed_lateral_offset = 0.0;
  double lane_heading = 0.0;
  double arclength = 0.0;
  // Derivative bookkeeping: the segment owning the closest point, whether the
  // closest point is a polyline vertex (arclength locally constant in p), and
  // the segment's unit direction.
  std::size_t segment = 0;
  bool at_vertex = false;
  Vec2 segment_dir = Vec2::UnitX();
};

namespace lanegeo {

inline LaneProjection project(const Lane& lane, const Vec2& p) {
  LaneProjection best;
  double best_d2 = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < lane.segments(); ++i) {
    const Vec2& a = lane.points[i];
    const Vec2 d = lane.points[i + 1] - a;
    const double len2 = d.squaredNorm();
    const double tau_raw = (p - a).dot(d) / len2;
    const double tau = std::clamp(tau_raw, 0.0, 1.0);
    const Vec2 q = a + tau * d;
    const double d2 = (p - q).squaredNorm();
    if (d2 < best_d2) {
      best_d2 = d2;
      best.segment = i;
      best.closest_point = q;
      best.segment_dir = d / std::sqrt(len2);
      best.arclength = lane.arclength[i] + tau * std::sqrt(len2);
      best.at_vertex = tau_raw < 0.0 || tau_raw > 1.0;
    }
  }
  const Vec2 r = p - best.closest_point;
  const double cross = best.segment_dir.x() * r.y() - best.segment_dir.y() * r.x();
  const double dist = r.norm();
  best.signed_lateral_offset = cross >= 0.0 ? dist : -dist;
  const double ds = best.arclength - lane.arclength[best.segment];
  best.lane_heading = wrap_angle(lane.headings[best.segment] + lane.heading_slope(best.segment) * ds);
  return best;
}

struct LanePoint {
  Vec2 position;
  double heading;
};

/// Point at `arclength` (clamped to [0, length]) displaced by `lateral_offset`
/// to the left of the lane direction.
inline LanePoint point_at(const Lane& lane, double arclength, double lateral_offset) {
  const double s = std::clamp(arclength, 0.0, lane.length());
  const std::size_t i = lane.segment_at(s);
  const double seg = lane.arclength[i + 1] - lane.arclength[i];
  const double tau = (s - lane.arclength[i]) / seg;
  const Vec2 center = lane.points[i] + tau * (lane.points[i + 1] - lane.points[i]);
  const double heading = lane.heading_at(s);
  const Vec2 normal(-std::sin(heading), std::cos(heading));
  return {center + lateral_offset * normal, heading};
}

inline constexpr double kCandidateLaneMaxDistance = 4.5;
inline constexpr double kCandidateLaneMaxHeadingDiff = kPi / 2.0;

/// Lanes within 4.5 m of the goal position whose heading at the projection
/// differs from the goal heading by less than 90 degrees, in graph order.
inline std::vector<const Lane*> candidate_lanes(const LaneGraph& graph, const State& goal) {
  if (graph.lanes.empty()) throw DomainError("candidate_lanes: empty lane graph");
  std::vector<const Lane*> out;
  for (const Lane& lane : graph.lanes) {
    const LaneProjection pr = project(lane, goal.position());
    const double dist = std::abs(pr.signed_lateral_offset);
    const double dh = std::abs(wrap_angle(goal.heading - pr.lane_heading));
    if (dist <= kCandidateLaneMaxDistance && dh < kCandidateLaneMaxHeadingDiff) out.push_back(&lane);
  }
  return out;
}

/// The candidate lane closest to `goal` (nullptr if none qualify).
inline const Lane* nearest_candidate_lane(const LaneGraph& graph, const State& goal) {
  const Lane* best = nullptr;
  double best_d = std::numeric_limits<double>::infinity();
  for (const Lane* lane : candidate_lanes(graph, goal)) {
    const double d = std::abs(project(*lane, goal.position()).signed_lateral_offset);
    if (d < best_d) {
      best_d = d;
      best = lane;
    }
  }
  return best;
}

}  // namespace lanegeo
}  // namespace diffstack
