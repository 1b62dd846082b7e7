// SPDX-License-Identifier: Apache-2.0
#include "stmae/plot.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "stmae/common.hpp"

namespace stmae {

namespace {

constexpr double kLeft = 70, kRight = 480, kTop = 30, kBottom = 360;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"};

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    out.emplace_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

double to_double(const std::string& s, std::size_t row, const char* col) {
  double v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw FormatError("plot: row " + std::to_string(row) + " column " + col + ": cannot parse '" + s + "'");
  return v;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

std::string escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

Axis make_axis(double lo, double hi, double p0, double p1) {
  if (hi - lo <= 0) {
    lo -= 0.5;
    hi += 0.5;
  }
  return {lo, hi, p0, p1};
}

std::vector<double> categories(const std::vector<PlotPoint>& pts) {
  std::vector<double> xs;
  for (const auto& p : pts) xs.push_back(p.x);
  std::sort(xs.begin(), xs.end());
  xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
  return xs;
}

}  // namespace

PlotKind parse_plot_kind(std::string_view s) {
  if (s == "line") return PlotKind::Line;
  if (s == "bar") return PlotKind::Bar;
  throw ConfigError("plot kind must be line or bar, got '" + std::string(s) + "'");
}

std::vector<PlotPoint> parse_plot_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line.empty()) throw ConfigError("plot: CSV is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = split_csv_line(line);
  auto col = [&](const char* name) -> int {
    const auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : static_cast<int>(it - header.begin());
  };
  const int cs = col("series"), cx = col("x"), cy = col("y"), cl = col("label");
  if (cs < 0 || cx < 0 || cy < 0) throw FormatError("plot: CSV header must contain series, x and y columns");

  std::vector<PlotPoint> pts;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != header.size())
      throw FormatError("plot: row " + std::to_string(row) + " has " + std::to_string(f.size()) + " fields, expected " +
                        std::to_string(header.size()));
    PlotPoint p;
    p.series = f[static_cast<std::size_t>(cs)];
    p.x_text = f[static_cast<std::size_t>(cx)];
    p.y_text = f[static_cast<std::size_t>(cy)];
    if (cl >= 0) p.label = f[static_cast<std::size_t>(cl)];
    p.x = to_double(p.x_text, row, "x");
    p.y = to_double(p.y_text, row, "y");
    pts.push_back(std::move(p));
  }
  if (pts.empty()) throw ConfigError("plot: CSV has no data rows");
  return pts;
}

PlotLayout plot_layout(const std::vector<PlotPoint>& pts, PlotKind kind) {
  if (pts.empty()) throw ConfigError("plot: no points");
  double ylo = pts.front().y, yhi = ylo;
  for (const auto& p : pts) {
    ylo = std::min(ylo, p.y);
    yhi = std::max(yhi, p.y);
  }
  PlotLayout L;
  if (kind == PlotKind::Bar) {
    ylo = std::min(ylo, 0.0);
    yhi = std::max(yhi, 0.0);
    const auto cats = categories(pts);
    L.x = make_axis(-0.5, static_cast<double>(cats.size()) - 0.5, kLeft, kRight);
  } else {
    double xlo = pts.front().x, xhi = xlo;
    for (const auto& p : pts) {
      xlo = std::min(xlo, p.x);
      xhi = std::max(xhi, p.x);
    }
    L.x = make_axis(xlo, xhi, kLeft, kRight);
  }
  L.y = make_axis(ylo, yhi, kBottom, kTop);
  return L;
}

std::string render_svg(const std::vector<PlotPoint>& pts, PlotKind kind, std::string_view title) {
  const PlotLayout L = plot_layout(pts, kind);
  std::vector<std::string> series;
  for (const auto& p : pts)
    if (std::find(series.begin(), series.end(), p.series) == series.end()) series.push_back(p.series);
  const auto cats = categories(pts);
  auto cat_index = [&](double x) { return static_cast<double>(std::lower_bound(cats.begin(), cats.end(), x) - cats.begin()); };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" viewBox=\"0 0 640 400\">\n";
  s << "<rect width=\"640\" height=\"400\" fill=\"white\"/>\n";
  if (!title.empty()) s << "<text x=\"275\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">" << escape(title) << "</text>\n";
  // Axes with min/max tick labels.
  s << "<g class=\"axes\" stroke=\"black\">\n";
  s << "<line x1=\"" << kLeft << "\" y1=\"" << kBottom << "\" x2=\"" << kRight << "\" y2=\"" << kBottom << "\"/>\n";
  s << "<line x1=\"" << kLeft << "\" y1=\"" << kBottom << "\" x2=\"" << kLeft << "\" y2=\"" << kTop << "\"/>\n";
  s << "</g>\n<g class=\"ticks\" font-size=\"10\">\n";
  s << "<text x=\"" << kLeft - 4 << "\" y=\"" << kBottom << "\" text-anchor=\"end\">" << fmt(L.y.lo) << "</text>\n";
  s << "<text x=\"" << kLeft - 4 << "\" y=\"" << kTop + 4 << "\" text-anchor=\"end\">" << fmt(L.y.hi) << "</text>\n";
  if (kind == PlotKind::Bar) {
    for (std::size_t i = 0; i < cats.size(); ++i) {
      std::string label = fmt(cats[i]);
      for (const auto& p : pts)
        if (p.x == cats[i] && !p.label.empty()) {
          label = p.label;
          break;
        }
      s << "<text x=\"" << fmt(L.x.map(static_cast<double>(i))) << "\" y=\"" << kBottom + 14
        << "\" text-anchor=\"middle\">" << escape(label) << "</text>\n";
    }
  } else {
    s << "<text x=\"" << kLeft << "\" y=\"" << kBottom + 14 << "\" text-anchor=\"middle\">" << fmt(L.x.lo) << "</text>\n";
    s << "<text x=\"" << kRight << "\" y=\"" << kBottom + 14 << "\" text-anchor=\"middle\">" << fmt(L.x.hi) << "</text>\n";
  }
  s << "</g>\n";

  const double n_series = static_cast<double>(series.size());
  const double slot = (L.x.map(1.0) - L.x.map(0.0)) * 0.8;
  for (std::size_t si = 0; si < series.size(); ++si) {
    const char* colour = kPalette[si % std::size(kPalette)];
    std::vector<const PlotPoint*> mine;
    for (const auto& p : pts)
      if (p.series == series[si]) mine.push_back(&p);
    s << "<g class=\"series\" data-series=\"" << escape(series[si]) << "\" fill=\"" << colour << "\" stroke=\"" << colour
      << "\">\n";
    if (kind == PlotKind::Line) {
      std::stable_sort(mine.begin(), mine.end(), [](const PlotPoint* a, const PlotPoint* b) { return a->x < b->x; });
      s << "<polyline fill=\"none\" points=\"";
      for (std::size_t i = 0; i < mine.size(); ++i)
        s << (i ? " " : "") << fmt(L.x.map(mine[i]->x)) << ',' << fmt(L.y.map(mine[i]->y));
      s << "\"/>\n";
      for (const auto* p : mine)
        s << "<circle class=\"point\" cx=\"" << fmt(L.x.map(p->x)) << "\" cy=\"" << fmt(L.y.map(p->y))
          << "\" r=\"3\" data-x=\"" << escape(p->x_text) << "\" data-y=\"" << escape(p->y_text) << "\"/>\n";
    } else {
      const double width = slot / n_series;
      for (const auto* p : mine) {
        const double cx = L.x.map(cat_index(p->x));
        const double left = cx - slot / 2 + width * static_cast<double>(si);
        const double top = std::min(L.y.map(p->y), L.y.map(0.0));
        const double height = std::abs(L.y.map(p->y) - L.y.map(0.0));
        s << "<rect class=\"point\" x=\"" << fmt(left) << "\" y=\"" << fmt(top) << "\" width=\"" << fmt(width)
          << "\" height=\"" << fmt(height) << "\" data-x=\"" << escape(p->x_text) << "\" data-y=\"" << escape(p->y_text)
          << "\"/>\n";
      }
    }
    s << "</g>\n";
  }

  s << "<g class=\"legend\" font-size=\"11\">\n";
  for (std::size_t si = 0; si < series.size(); ++si) {
    const double y = kTop + 16.0 * static_cast<double>(si);
    s << "<g class=\"legend-entry\"><rect x=\"500\" y=\"" << fmt(y) << "\" width=\"10\" height=\"10\" fill=\""
      << kPalette[si % std::size(kPalette)] << "\"/><text x=\"516\" y=\"" << fmt(y + 9) << "\">" << escape(series[si])
      << "</text></g>\n";
  }
  s << "</g>\n</svg>\n";
  return s.str();
}

void plot_file(const std::filesystem::path& csv, const std::filesystem::path& svg, PlotKind kind) {
  std::ifstream in(csv, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + csv.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const auto pts = parse_plot_csv(buf.str());
  std::ofstream out(svg, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + svg.string());
  out << render_svg(pts, kind, csv.stem().string());
}

}  // namespace stmae
