// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace stmae {

enum class PlotKind { Line, Bar };

PlotKind parse_plot_kind(std::string_view s);

/// One row of a long-format results table (columns series,x,y and optional label).
struct PlotPoint {
  std::string series;
  std::string x_text, y_text, label;
  double x = 0, y = 0;
};

std::vector<PlotPoint> parse_plot_csv(std::string_view text);

/// Maps data value v to pixel p = p0 + (v - lo) / (hi - lo) * (p1 - p0).
/// A zero-width range is widened to [lo - 0.5, hi + 0.5].
struct Axis {
  double lo = 0, hi = 1, p0 = 0, p1 = 1;
  double map(double v) const { return p0 + (v - lo) / (hi - lo) * (p1 - p0); }
};

/// Canvas 640x400. Plot area x in [70, 480], y in [360, 30] (y grows upward).
/// Line: x axis spans [min x, max x]. Bar: categories are the distinct x values
/// in ascending order at positions 0..K-1, axis spans [-0.5, K - 0.5], and the
/// y axis always includes 0. Every point carries its CSV text in data-x/data-y.
struct PlotLayout {
  Axis x, y;
};
PlotLayout plot_layout(const std::vector<PlotPoint>& points, PlotKind kind);

std::string render_svg(const std::vector<PlotPoint>& points, PlotKind kind, std::string_view title = "");

/// Read a CSV, write an SVG. Throws ConfigError on an empty table.
void plot_file(const std::filesystem::path& csv, const std::filesystem::path& svg, PlotKind kind);

}  // namespace stmae
