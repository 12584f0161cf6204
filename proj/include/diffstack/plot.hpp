#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "diffstack/report.hpp"

namespace diffstack::plot {

namespace detail {

inline std::string escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '&') o += "&amp;";
    else if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else o += c;
  }
  return o;
}

inline const char* colour(std::size_t i) {
  static const char* p[] = {"#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c"};
  return p[i % 8];
}

}  // namespace detail

/// Bar charts of the relative columns of a metrics table, one panel per
/// `rel_*` column, one bar per baseline / method mean, SE whiskers.
inline std::string relative_bars(const report::Table& t) {
  const int mcol = t.column("method"), kcol = t.column("kind");
  std::vector<std::string> metrics;
  for (const auto& h : t.header)
    if (h.rfind("rel_", 0) == 0 && (h.size() < 3 || h.substr(h.size() - 3) != "_se")) metrics.push_back(h);
  std::vector<const std::vector<std::string>*> rows;
  for (const auto& r : t.rows)
    if (r[kcol] == "baseline" || r[kcol] == "mean") rows.push_back(&r);
  if (metrics.empty() || rows.empty()) throw DataError("plot: no relative columns or summary rows in the table");

  const double pw = 360, ph = 260, margin = 50, bar_area = pw - 2 * margin;
  const int ncols = std::min<int>(2, static_cast<int>(metrics.size()));
  const int nrows = (static_cast<int>(metrics.size()) + ncols - 1) / ncols;
  const double W = ncols * pw, H = nrows * ph + 30 + 18.0 * rows.size();

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t p = 0; p < metrics.size(); ++p) {
    const double ox = (p % ncols) * pw, oy = (p / ncols) * ph;
    const int c = t.column(metrics[p]), cs = t.column(metrics[p] + "_se");
    std::vector<double> v(rows.size()), e(rows.size());
    double lo = 0.0, hi = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& r = *rows[i];
      v[i] = r[c].empty() ? 0.0 : std::stod(r[c]);
      e[i] = (cs < 0 || r[cs].empty()) ? 0.0 : std::stod(r[cs]);
      lo = std::min(lo, v[i] - e[i]);
      hi = std::max(hi, v[i] + e[i]);
    }
    if (hi - lo <= 0.0) hi = lo + 1.0;
    const double top = oy + 30, bottom = oy + ph - 30;
    auto y = [&](double x) { return bottom - (x - lo) / (hi - lo) * (bottom - top); };
    o << "<text x=\"" << ox + pw / 2 << "\" y=\"" << oy + 18 << "\" text-anchor=\"middle\" font-size=\"13\">"
      << detail::escape(metrics[p]) << "</text>\n";
    o << "<line x1=\"" << ox + margin << "\" x2=\"" << ox + pw - margin << "\" y1=\"" << y(0) << "\" y2=\"" << y(0)
      << "\" stroke=\"black\"/>\n";
    o << "<text x=\"" << ox + margin - 4 << "\" y=\"" << y(hi) + 4 << "\" text-anchor=\"end\">" << report::num(hi)
      << "</text>\n<text x=\"" << ox + margin - 4 << "\" y=\"" << y(lo) + 4 << "\" text-anchor=\"end\">"
      << report::num(lo) << "</text>\n";
    const double slot = bar_area / rows.size();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const double x = ox + margin + i * slot + slot * 0.15, w = slot * 0.7;
      const double y0 = y(std::max(0.0, v[i])), y1 = y(std::min(0.0, v[i]));
      o << "<rect x=\"" << x << "\" y=\"" << y0 << "\" width=\"" << w << "\" height=\"" << y1 - y0 << "\" fill=\""
        << detail::colour(i) << "\"/>\n";
      if (e[i] > 0.0)
        o << "<line x1=\"" << x + w / 2 << "\" x2=\"" << x + w / 2 << "\" y1=\"" << y(v[i] - e[i]) << "\" y2=\""
          << y(v[i] + e[i]) << "\" stroke=\"black\"/>\n";
    }
  }
  const double ly = nrows * ph + 10;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double yy = ly + 18.0 * i;
    o << "<rect x=\"20\" y=\"" << yy << "\" width=\"12\" height=\"12\" fill=\"" << detail::colour(i)
      << "\"/><text x=\"38\" y=\"" << yy + 10 << "\">" << detail::escape((*rows[i])[mcol]) << " ("
      << detail::escape((*rows[i])[kcol]) << ")</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace diffstack::plot
