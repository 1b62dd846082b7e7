// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stmae/config.hpp"
#include "stmae/ingest.hpp"
#include "stmae/model.hpp"

namespace stmae {

enum class AblationGrid { MaskRatio, Criterion, SslFraction, LabelFraction, ReconTarget };

AblationGrid parse_grid(std::string_view name);
std::string grid_name(AblationGrid g);

struct AblationCell {
  std::string name;                                        // e.g. "0.3", "sce/bce", "node"
  std::vector<std::pair<std::string, std::string>> overrides;  // option key -> value
  RunConfig config;
  double x = 0;                                            // numeric position for plotting
};

/// Cells of a grid applied on top of `base`. `values` replaces the default
/// sweep for numeric grids and is ignored otherwise.
std::vector<AblationCell> ablation_cells(AblationGrid grid, const RunConfig& base, std::span<const double> values = {});

/// Keys a grid is allowed to vary.
std::vector<std::string> grid_keys(AblationGrid grid);

struct AblationRow {
  std::string grid, cell, method, fold;  // fold: "0".."k-1", "mean" or "std"
  double x = 0;
  std::optional<double> auroc, accuracy, mae;
  int n = 0;
  std::uint64_t seed = 0;
  std::string status = "ok";  // "ok" or "failed: <reason>"
};

struct AblationTable {
  std::vector<AblationRow> rows;

  static const std::vector<std::string>& columns();
  std::string to_csv() const;
  /// series,x,y rows: one per (method or cell, x) with y = mean primary metric.
  std::string to_plot_csv() const;
};

struct AblationOptions {
  std::filesystem::path out_dir;  // empty: nothing written
  std::function<void(const std::string&)> log;
};

/// Runs pre-training plus k-fold fine-tuning for every cell. A failing cell
/// is recorded with its reason and the remaining cells still run. The
/// label-fraction grid also runs the randomly initialised baseline.
AblationTable ablate(std::span<const Subject> subjects, AblationGrid grid, const RunConfig& base, HeadKind task,
                     std::span<const double> values = {}, const AblationOptions& opts = {});

}  // namespace stmae
