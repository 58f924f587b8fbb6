#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "resil/harness.hpp"

namespace resil {

/// Mean and std over seeds of the group return at each episode, one series
/// per protocol. Episodes run across both phases: pre first, then post.
struct LearningCurve {
  std::string label;
  std::vector<double> mean, std;
  std::vector<std::size_t> n;
};

struct CurvePlot {
  std::string environment;
  double K = 0.0;
  std::uint64_t t_pert = 0;
  std::vector<LearningCurve> curves;
};

inline std::vector<CurvePlot> learning_curves(const std::vector<RunRecord>& records) {
  std::map<std::pair<std::string, double>, std::vector<const RunRecord*>> groups;
  for (const RunRecord& r : records)
    if (r.ok()) groups[{r.environment, r.K}].push_back(&r);
  std::vector<CurvePlot> plots;
  for (const auto& [key, rs] : groups) {
    CurvePlot plot{key.first, key.second, rs.front()->t_pert, {}};
    std::vector<Protocol> order;
    for (const RunRecord* r : rs)
      if (std::none_of(order.begin(), order.end(), [&](const Protocol& p) { return same_protocol(p, r->protocol); }))
        order.push_back(r->protocol);
    std::stable_sort(order.begin(), order.end(),
                     [](const Protocol& a, const Protocol& b) { return static_cast<int>(a.kind) < static_cast<int>(b.kind); });
    for (const Protocol& p : order) {
      LearningCurve c{protocol_label(p), {}, {}, {}};
      std::vector<std::vector<double>> series;
      std::size_t len = 0;
      for (const RunRecord* r : rs)
        if (same_protocol(r->protocol, p)) {
          std::vector<double> s = r->pre_returns;
          s.insert(s.end(), r->post_returns.begin(), r->post_returns.end());
          len = std::max(len, s.size());
          series.push_back(std::move(s));
        }
      for (std::size_t e = 0; e < len; ++e) {
        std::vector<double> xs;
        for (const auto& s : series)
          if (e < s.size()) xs.push_back(s[e]);
        const SampleStats st = sample_stats(xs);
        c.mean.push_back(st.mean);
        c.std.push_back(st.std);
        c.n.push_back(st.n);
      }
      plot.curves.push_back(std::move(c));
    }
    plots.push_back(std::move(plot));
  }
  return plots;
}

inline std::string curve_csv(const CurvePlot& plot) {
  std::string out = "episode,protocol,mean,std,seeds\n";
  for (const LearningCurve& c : plot.curves)
    for (std::size_t e = 0; e < c.mean.size(); ++e)
      out += std::to_string(e) + "," + c.label + "," + format_number(c.mean[e]) + "," + format_number(c.std[e]) + "," +
             std::to_string(c.n[e]) + "\n";
  return out;
}

namespace detail {

inline std::string fmt(double v, int precision = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

}  // namespace detail

/// Geometry shared by the SVG writer and its tests.
struct PlotFrame {
  double width = 800, height = 420;
  double left = 70, right = 170, top = 40, bottom = 50;
  std::size_t episodes = 1;

  double x(double episode) const {
    const double span = static_cast<double>(std::max<std::size_t>(episodes, 2) - 1);
    return left + (width - left - right) * episode / span;
  }
};

/**
 * @brief Line chart of mean group return per protocol with a shaded +-1 std
 * band (only when more than one seed) and a dashed marker at t_pert. Long
 * curves are averaged into at most `max_points` bins.
 */
inline std::string curve_svg(const CurvePlot& plot, std::size_t max_points = 400) {
  static const char* palette[] = {"#1b6ca8", "#d1495b", "#2e8b57", "#edae49", "#6a4c93", "#444444"};
  PlotFrame f;
  for (const LearningCurve& c : plot.curves) f.episodes = std::max(f.episodes, c.mean.size());
  double lo = 0.0, hi = 0.0;
  bool first = true;
  struct Binned {
    std::vector<double> x, m, s;
    bool band = false;
  };
  std::vector<Binned> binned;
  for (const LearningCurve& c : plot.curves) {
    Binned b;
    const std::size_t bin = std::max<std::size_t>(1, (c.mean.size() + max_points - 1) / max_points);
    for (std::size_t start = 0; start < c.mean.size(); start += bin) {
      const std::size_t end = std::min(c.mean.size(), start + bin);
      double m = 0.0, s = 0.0;
      for (std::size_t e = start; e < end; ++e) {
        m += c.mean[e];
        s += c.std[e];
        b.band |= c.n[e] > 1;
      }
      m /= static_cast<double>(end - start);
      s /= static_cast<double>(end - start);
      b.x.push_back(0.5 * static_cast<double>(start + end - 1));
      b.m.push_back(m);
      b.s.push_back(s);
      const double a = b.band ? m - s : m, z = b.band ? m + s : m;
      lo = first ? a : std::min(lo, a);
      hi = first ? z : std::max(hi, z);
      first = false;
    }
    binned.push_back(std::move(b));
  }
  if (hi - lo < 1e-9) {
    lo -= 1.0;
    hi += 1.0;
  }
  auto y = [&](double v) { return f.top + (f.height - f.top - f.bottom) * (hi - v) / (hi - lo); };

  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + detail::fmt(f.width, 0) + "\" height=\"" +
                    detail::fmt(f.height, 0) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + detail::fmt(f.left) + "\" y=\"22\" font-size=\"14\">" + plot.environment +
         ", K = " + format_number(plot.K) + "</text>\n";
  const double x0 = f.left, x1 = f.width - f.right, y0 = f.top, y1 = f.height - f.bottom;
  svg += "<rect class=\"axes\" x=\"" + detail::fmt(x0) + "\" y=\"" + detail::fmt(y0) + "\" width=\"" +
         detail::fmt(x1 - x0) + "\" height=\"" + detail::fmt(y1 - y0) + "\" fill=\"none\" stroke=\"#888\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    svg += "<text x=\"" + detail::fmt(x0 - 6) + "\" y=\"" + detail::fmt(y(v) + 4) + "\" text-anchor=\"end\">" +
           detail::fmt(v, 1) + "</text>\n";
  }
  svg += "<text x=\"" + detail::fmt(x0) + "\" y=\"" + detail::fmt(y1 + 18) + "\">0</text>\n";
  svg += "<text x=\"" + detail::fmt(x1) + "\" y=\"" + detail::fmt(y1 + 18) + "\" text-anchor=\"end\">" +
         std::to_string(f.episodes - 1) + "</text>\n";
  svg += "<text x=\"" + detail::fmt((x0 + x1) / 2) + "\" y=\"" + detail::fmt(y1 + 36) +
         "\" text-anchor=\"middle\">episode</text>\n";

  for (std::size_t i = 0; i < binned.size(); ++i) {
    const Binned& b = binned[i];
    const std::string color = palette[i % (sizeof palette / sizeof *palette)];
    if (b.band) {
      std::string pts;
      for (std::size_t k = 0; k < b.x.size(); ++k) pts += detail::fmt(f.x(b.x[k])) + "," + detail::fmt(y(b.m[k] + b.s[k])) + " ";
      for (std::size_t k = b.x.size(); k-- > 0;) pts += detail::fmt(f.x(b.x[k])) + "," + detail::fmt(y(b.m[k] - b.s[k])) + " ";
      svg += "<polygon class=\"band\" points=\"" + pts + "\" fill=\"" + color + "\" fill-opacity=\"0.18\" stroke=\"none\"/>\n";
    }
    std::string pts;
    for (std::size_t k = 0; k < b.x.size(); ++k) pts += detail::fmt(f.x(b.x[k])) + "," + detail::fmt(y(b.m[k])) + " ";
    svg += "<polyline class=\"curve\" points=\"" + pts + "\" fill=\"none\" stroke=\"" + color + "\" stroke-width=\"1.5\"/>\n";
    const double ly = f.top + 16.0 * static_cast<double>(i) + 8;
    svg += "<line x1=\"" + detail::fmt(x1 + 12) + "\" y1=\"" + detail::fmt(ly) + "\" x2=\"" + detail::fmt(x1 + 32) +
           "\" y2=\"" + detail::fmt(ly) + "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    svg += "<text x=\"" + detail::fmt(x1 + 38) + "\" y=\"" + detail::fmt(ly + 4) + "\">" + plot.curves[i].label +
           "</text>\n";
  }
  const double mx = f.x(static_cast<double>(plot.t_pert));
  svg += "<line class=\"t-pert\" x1=\"" + detail::fmt(mx) + "\" y1=\"" + detail::fmt(y0) + "\" x2=\"" + detail::fmt(mx) +
         "\" y2=\"" + detail::fmt(y1) + "\" stroke=\"black\" stroke-dasharray=\"5,4\"/>\n";
  svg += "</svg>\n";
  return svg;
}

inline std::string plot_stem(const CurvePlot& p) { return "curve_" + p.environment + "_K" + format_number(p.K); }

/// Writes one SVG and one CSV per (environment, K) under `dir`; returns the paths.
inline std::vector<std::string> emit_plots(const std::vector<RunRecord>& records, const std::string& dir) {
  namespace fs = std::filesystem;
  if (std::none_of(records.begin(), records.end(), [](const RunRecord& r) { return r.ok(); }))
    throw ModelError("no completed run records to plot");
  fs::create_directories(dir);
  std::vector<std::string> files;
  for (const CurvePlot& p : learning_curves(records)) {
    const fs::path svg = fs::path(dir) / (plot_stem(p) + ".svg");
    const fs::path csv = fs::path(dir) / (plot_stem(p) + ".csv");
    write_text_file(svg.string(), curve_svg(p));
    write_text_file(csv.string(), curve_csv(p));
    files.push_back(svg.string());
    files.push_back(csv.string());
  }
  return files;
}

}  // namespace resil
