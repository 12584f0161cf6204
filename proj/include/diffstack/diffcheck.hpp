#pragma once

#include <functional>
#include <vector>

#include <Eigen/Dense>

namespace diffstack::diffcheck {

struct CoordinateResult {
  int index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double relative_error = 0.0;  // |analytic - numeric| / max(|numeric|, eps)
  bool finite = true;
};

struct GradCheckReport {
  std::vector<CoordinateResult> coordinates;
  double relative_error = 0.0;  // |g_analytic - g_fd| / max(|g_fd|, eps) over checked coordinates
  double max_abs_error = 0.0;
  double tolerance = 0.0;
  int nonfinite = 0;
  int skipped = 0;
  bool passed = false;
};

inline constexpr double kEps = 1e-8;

/// Central-difference check of `grad` against `fn` at `x0`. Only `coords` are
/// checked (all coordinates when empty). Non-finite evaluations are flagged per
/// coordinate and excluded from the aggregate.
inline GradCheckReport check(const std::function<double(const Eigen::VectorXd&)>& fn, const Eigen::VectorXd& grad,
                             const Eigen::VectorXd& x0, double h = 1e-5, double tolerance = 1e-5,
                             std::vector<int> coords = {}) {
  if (coords.empty()) {
    coords.resize(x0.size());
    for (int i = 0; i < x0.size(); ++i) coords[i] = i;
  }
  GradCheckReport rep;
  rep.tolerance = tolerance;
  double diff2 = 0.0;
  double fd2 = 0.0;
  Eigen::VectorXd x = x0;
  for (int i : coords) {
    CoordinateResult c;
    c.index = i;
    c.analytic = grad[i];
    x[i] = x0[i] + h;
    const double fp = fn(x);
    x[i] = x0[i] - h;
    const double fm = fn(x);
    x[i] = x0[i];
    c.numeric = (fp - fm) / (2.0 * h);
    c.finite = std::isfinite(c.numeric) && std::isfinite(c.analytic);
    if (c.finite) {
      const double d = c.analytic - c.numeric;
      c.relative_error = std::abs(d) / std::max(std::abs(c.numeric), kEps);
      diff2 += d * d;
      fd2 += c.numeric * c.numeric;
      rep.max_abs_error = std::max(rep.max_abs_error, std::abs(d));
    } else {
      ++rep.nonfinite;
    }
    rep.coordinates.push_back(c);
  }
  rep.relative_error = std::sqrt(diff2) / std::max(std::sqrt(fd2), kEps);
  rep.passed = rep.nonfinite == 0 && rep.relative_error < tolerance;
  return rep;
}

/// Evenly spaced subset of at most `max_coords` coordinate indices of an n-vector.
inline std::vector<int> sample_coordinates(int n, int max_coords) {
  std::vector<int> out;
  if (n <= max_coords) {
    for (int i = 0; i < n; ++i) out.push_back(i);
    return out;
  }
  for (int j = 0; j < max_coords; ++j) out.push_back(static_cast<int>((static_cast<long long>(j) * n) / max_coords));
  return out;
}

}  // namespace diffstack::diffcheck
