#pragma once

// Four SVG panels rendered straight from a trace: tensions with references,
// velocities, torques, and the adaptation variables on a log axis.
//
// The root element carries the data-to-pixel mapping as data-* attributes and
// every series is tagged with data-series, so the files can be checked
// without a renderer.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "atbm/io.hpp"
#include "atbm/orchestrator.hpp"

namespace atbm {

struct PlotSeries {
  std::string name;
  std::vector<double> t;
  std::vector<double> y;
  bool step = false;    // draw as a staircase (references)
  bool dashed = false;
};

struct PlotPanel {
  std::string title;
  std::string y_label;
  bool log_scale = false;
  std::vector<PlotSeries> series;
};

struct PlotFrame {
  double width = 800, height = 420;
  double left = 70, right = 150, top = 36, bottom = 46;
  double t_min = 0, t_max = 1, y_min = 0, y_max = 1;
  bool log_scale = false;

  double px(double t) const { return left + (t - t_min) / (t_max - t_min) * (width - left - right); }
  double py(double y) const {
    const double v = log_scale ? std::log10(y) : y;
    return top + (y_max - v) / (y_max - y_min) * (height - top - bottom);
  }
};

/// Non-positive values are drawn at this floor on log panels.
inline constexpr double kLogFloor = 1e-12;

namespace detail {

inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                                 "#8c564b", "#e377c2", "#17becf", "#7f7f7f", "#bcbd22"};
  return colors[i % (sizeof colors / sizeof colors[0])];
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace detail

inline std::string render_svg(const PlotPanel& panel) {
  PlotFrame f;
  f.log_scale = panel.log_scale;
  double t_lo = std::numeric_limits<double>::infinity(), t_hi = -t_lo;
  double y_lo = t_lo, y_hi = -t_lo;
  for (const PlotSeries& s : panel.series) {
    for (std::size_t i = 0; i < s.t.size(); ++i) {
      t_lo = std::min(t_lo, s.t[i]);
      t_hi = std::max(t_hi, s.t[i]);
      const double y = panel.log_scale ? std::log10(std::max(s.y[i], kLogFloor)) : s.y[i];
      y_lo = std::min(y_lo, y);
      y_hi = std::max(y_hi, y);
    }
  }
  if (!std::isfinite(t_lo)) t_lo = 0, t_hi = 1, y_lo = 0, y_hi = 1;
  if (t_hi <= t_lo) t_lo -= 0.5, t_hi += 0.5;
  if (panel.log_scale) {
    y_lo = std::floor(y_lo);
    y_hi = std::ceil(y_hi);
    if (y_hi <= y_lo) y_hi = y_lo + 1;
  } else {
    const double pad = y_hi > y_lo ? 0.05 * (y_hi - y_lo) : std::max(1.0, 0.05 * std::abs(y_hi));
    y_lo -= pad;
    y_hi += pad;
  }
  f.t_min = t_lo;
  f.t_max = t_hi;
  f.y_min = y_lo;
  f.y_max = y_hi;

  std::ostringstream o;
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.width << "\" height=\"" << f.height
    << "\" viewBox=\"0 0 " << f.width << " " << f.height << "\" data-t-min=\"" << detail::num(f.t_min)
    << "\" data-t-max=\"" << detail::num(f.t_max) << "\" data-y-min=\"" << detail::num(f.y_min)
    << "\" data-y-max=\"" << detail::num(f.y_max) << "\" data-log=\"" << (f.log_scale ? 1 : 0)
    << "\" data-plot-left=\"" << f.left << "\" data-plot-right=\"" << f.width - f.right << "\">\n";
  o << "<rect x=\"0\" y=\"0\" width=\"" << f.width << "\" height=\"" << f.height << "\" fill=\"white\"/>\n";
  o << "<text x=\"" << f.width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">"
    << detail::escape(panel.title) << "</text>\n";
  const double x0 = f.left, x1 = f.width - f.right, y0 = f.top, y1 = f.height - f.bottom;
  o << "<rect x=\"" << x0 << "\" y=\"" << y0 << "\" width=\"" << x1 - x0 << "\" height=\"" << y1 - y0
    << "\" fill=\"none\" stroke=\"black\"/>\n";

  o << "<g font-family=\"sans-serif\" font-size=\"11\">\n";
  for (int i = 0; i <= 5; ++i) {
    const double t = f.t_min + (f.t_max - f.t_min) * i / 5.0;
    o << "<line x1=\"" << f.px(t) << "\" y1=\"" << y1 << "\" x2=\"" << f.px(t) << "\" y2=\"" << y1 + 4
      << "\" stroke=\"black\"/><text x=\"" << f.px(t) << "\" y=\"" << y1 + 16 << "\" text-anchor=\"middle\">"
      << detail::num(t) << "</text>\n";
  }
  const int y_ticks = panel.log_scale ? static_cast<int>(f.y_max - f.y_min) : 5;
  for (int i = 0; i <= y_ticks; ++i) {
    const double v = f.y_min + (f.y_max - f.y_min) * i / y_ticks;
    const double y = f.top + (f.y_max - v) / (f.y_max - f.y_min) * (y1 - y0);
    const std::string label = panel.log_scale ? "1e" + detail::num(v) : detail::num(v);
    o << "<line x1=\"" << x0 - 4 << "\" y1=\"" << y << "\" x2=\"" << x0 << "\" y2=\"" << y
      << "\" stroke=\"black\"/><text x=\"" << x0 - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << label
      << "</text>\n";
  }
  o << "<text x=\"" << (x0 + x1) / 2 << "\" y=\"" << f.height - 8 << "\" text-anchor=\"middle\">time [s]</text>\n";
  o << "<text x=\"14\" y=\"" << (y0 + y1) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
    << (y0 + y1) / 2 << ")\">" << detail::escape(panel.y_label) << "</text>\n";
  o << "</g>\n";

  for (std::size_t si = 0; si < panel.series.size(); ++si) {
    const PlotSeries& s = panel.series[si];
    const char* color = detail::palette(si);
    const std::string dash = s.dashed ? " stroke-dasharray=\"6,3\"" : "";
    auto yv = [&](std::size_t i) { return panel.log_scale ? std::max(s.y[i], kLogFloor) : s.y[i]; };
    if (s.t.size() == 1) {
      o << "<circle data-series=\"" << detail::escape(s.name) << "\" cx=\"" << f.px(s.t[0]) << "\" cy=\""
        << f.py(yv(0)) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    } else if (!s.t.empty()) {
      o << "<polyline data-series=\"" << detail::escape(s.name) << "\" fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"1.4\"" << dash << " points=\"";
      for (std::size_t i = 0; i < s.t.size(); ++i) {
        if (s.step && i > 0) o << f.px(s.t[i]) << "," << f.py(yv(i - 1)) << " ";
        o << f.px(s.t[i]) << "," << f.py(yv(i)) << " ";
      }
      o << "\"/>\n";
    }
    const double ly = y0 + 14.0 * static_cast<double>(si) + 8;
    o << "<g font-family=\"sans-serif\" font-size=\"11\"><line x1=\"" << x1 + 10 << "\" y1=\"" << ly << "\" x2=\""
      << x1 + 30 << "\" y2=\"" << ly << "\" stroke=\"" << color << "\"" << dash << "/><text x=\"" << x1 + 34
      << "\" y=\"" << ly + 4 << "\">" << detail::escape(s.name) << "</text></g>\n";
  }
  o << "</svg>\n";
  return o.str();
}

inline std::vector<PlotPanel> trace_panels(const ClosedLoopTrace& t) {
  const Index n = t.rollers;
  std::vector<double> time;
  for (const StepRecord& r : t.rows) time.push_back(r.time);
  auto series = [&](const std::string& name, auto get, bool step = false, bool dashed = false) {
    PlotSeries s{name, time, {}, step, dashed};
    for (const StepRecord& r : t.rows) s.y.push_back(get(r));
    return s;
  };
  PlotPanel tension{"Web tensions", "tension [N]", false, {}};
  PlotPanel velocity{"Roller velocities", "velocity [m/s]", false, {}};
  PlotPanel torque{"Motor torques", "torque [N m]", false, {}};
  for (Index i = 0; i < n; ++i) {
    const std::string k = std::to_string(i + 1);
    tension.series.push_back(series("T_" + k, [i](const StepRecord& r) { return r.x[i]; }));
    velocity.series.push_back(series("v_" + k, [i, n](const StepRecord& r) { return r.x[n + i]; }));
    torque.series.push_back(series("u_" + k, [i](const StepRecord& r) { return r.u[i]; }));
  }
  for (Index i = 0; i < n; ++i) {
    const std::string k = std::to_string(i + 1);
    tension.series.push_back(series("Tref_" + k, [i](const StepRecord& r) { return r.tension_ref[i]; }, true, true));
    velocity.series.push_back(series("vref_" + k, [i](const StepRecord& r) { return r.velocity_ref[i]; }, true, true));
  }
  PlotPanel adapt{"Adaptation variables", "value (log scale)", true, {}};
  adapt.series.push_back(series("delta", [](const StepRecord& r) { return r.delta; }));
  adapt.series.push_back(series("mu", [](const StepRecord& r) { return r.mu; }));
  for (Index j = 0; j < t.soft_classes; ++j) {
    adapt.series.push_back(series("gamma_" + std::to_string(j + 1), [j](const StepRecord& r) { return r.gammas[j]; }));
  }
  adapt.series.push_back(series("nu_dyn", [](const StepRecord& r) { return r.nu_dyn; }, false, true));
  adapt.series.push_back(series("nu_hard", [](const StepRecord& r) { return r.nu_hard; }, false, true));
  return {tension, velocity, torque, adapt};
}

/// Writes <prefix>tensions.svg, velocities.svg, torques.svg, adaptation.svg.
inline std::vector<std::string> emit_plots(const ClosedLoopTrace& t, const std::string& prefix) {
  require(!t.rows.empty(), "emit_plots: empty trace");
  static const char* names[] = {"tensions.svg", "velocities.svg", "torques.svg", "adaptation.svg"};
  const auto panels = trace_panels(t);
  std::vector<std::string> paths;
  for (std::size_t i = 0; i < panels.size(); ++i) {
    const std::string path = prefix + names[i];
    std::ofstream out(path);
    if (!out) throw IoError("cannot write '" + path + "'");
    out << render_svg(panels[i]);
    if (!out) throw IoError("write failed for '" + path + "'");
    paths.push_back(path);
  }
  return paths;
}

}  // namespace atbm
