// SPDX-License-Identifier: Apache-2.0
#include "stmae/ablate.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "stmae/train.hpp"

namespace stmae {

namespace {

std::string number_text(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

std::vector<double> or_default(std::span<const double> values, std::vector<double> fallback) {
  if (values.empty()) return fallback;
  return {values.begin(), values.end()};
}

std::string sanitize(std::string s) {
  for (char& c : s)
    if (c == ',' || c == '\n' || c == '\r' || c == '"') c = ';';
  return s;
}

std::string dir_safe(std::string s) {
  for (char& c : s)
    if (c == '/' || c == '\\' || c == ' ') c = '-';
  return s;
}

std::string opt_text(const std::optional<double>& v) { return v ? number_text(*v) : ""; }

}  // namespace

AblationGrid parse_grid(std::string_view name) {
  if (name == "mask_ratio") return AblationGrid::MaskRatio;
  if (name == "criterion") return AblationGrid::Criterion;
  if (name == "ssl_fraction") return AblationGrid::SslFraction;
  if (name == "label_fraction") return AblationGrid::LabelFraction;
  if (name == "recon_target") return AblationGrid::ReconTarget;
  throw ConfigError("unknown ablation grid '" + std::string(name) +
                    "' (expected mask_ratio|criterion|ssl_fraction|label_fraction|recon_target)");
}

std::string grid_name(AblationGrid g) {
  switch (g) {
    case AblationGrid::MaskRatio: return "mask_ratio";
    case AblationGrid::Criterion: return "criterion";
    case AblationGrid::SslFraction: return "ssl_fraction";
    case AblationGrid::LabelFraction: return "label_fraction";
    case AblationGrid::ReconTarget: return "recon_target";
  }
  return "?";
}

std::vector<std::string> grid_keys(AblationGrid grid) {
  switch (grid) {
    case AblationGrid::MaskRatio: return {"mask.ratio_node", "mask.ratio_edge"};
    case AblationGrid::Criterion: return {"ssl.node_criterion", "ssl.edge_criterion"};
    case AblationGrid::SslFraction: return {"train.ssl_fraction"};
    case AblationGrid::LabelFraction: return {"train.label_fraction"};
    case AblationGrid::ReconTarget: return {"ssl.recon_node", "ssl.recon_edge"};
  }
  return {};
}

std::vector<AblationCell> ablation_cells(AblationGrid grid, const RunConfig& base, std::span<const double> values) {
  std::vector<AblationCell> cells;
  auto push = [&](std::string name, double x, std::vector<std::pair<std::string, std::string>> ov) {
    AblationCell c;
    c.name = std::move(name);
    c.x = x;
    c.overrides = std::move(ov);
    c.config = base;
    for (const auto& [k, v] : c.overrides) set_option(c.config, k, v);
    cells.push_back(std::move(c));
  };
  switch (grid) {
    case AblationGrid::MaskRatio:
      for (double r : or_default(values, {0.1, 0.3, 0.5, 0.7, 0.9}))
        push(number_text(r), r, {{"mask.ratio_node", number_text(r)}, {"mask.ratio_edge", number_text(r)}});
      break;
    case AblationGrid::Criterion: {
      int i = 0;
      for (const char* node : {"mse", "sce"})
        for (const char* edge : {"mse", "bce"})
          push(std::string(node) + "/" + edge, i++, {{"ssl.node_criterion", node}, {"ssl.edge_criterion", edge}});
      break;
    }
    case AblationGrid::SslFraction:
      for (double f : or_default(values, {0.25, 0.5, 1.0})) push(number_text(f), f, {{"train.ssl_fraction", number_text(f)}});
      break;
    case AblationGrid::LabelFraction:
      for (double f : or_default(values, {0.1, 0.25, 0.5, 1.0}))
        push(number_text(f), f, {{"train.label_fraction", number_text(f)}});
      break;
    case AblationGrid::ReconTarget:
      push("node", 0, {{"ssl.recon_node", "true"}, {"ssl.recon_edge", "false"}});
      push("edge", 1, {{"ssl.recon_node", "false"}, {"ssl.recon_edge", "true"}});
      push("both", 2, {{"ssl.recon_node", "true"}, {"ssl.recon_edge", "true"}});
      break;
  }
  return cells;
}

const std::vector<std::string>& AblationTable::columns() {
  static const std::vector<std::string> cols{"grid", "cell", "x",   "method", "fold",  "auroc",
                                             "accuracy", "mae", "n", "seed", "status"};
  return cols;
}

std::string AblationTable::to_csv() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < columns().size(); ++i) os << (i ? "," : "") << columns()[i];
  os << '\n';
  for (const auto& r : rows)
    os << r.grid << ',' << sanitize(r.cell) << ',' << number_text(r.x) << ',' << r.method << ',' << r.fold << ','
       << opt_text(r.auroc) << ',' << opt_text(r.accuracy) << ',' << opt_text(r.mae) << ',' << r.n << ',' << r.seed
       << ',' << sanitize(r.status) << '\n';
  return os.str();
}

std::string AblationTable::to_plot_csv() const {
  std::ostringstream os;
  os << "series,x,label,y\n";
  for (const auto& r : rows) {
    if (r.fold != "mean" || r.status != "ok") continue;
    const auto& y = r.auroc ? r.auroc : r.mae;
    if (!y) continue;
    os << r.method << ',' << number_text(r.x) << ',' << sanitize(r.cell) << ',' << number_text(*y) << '\n';
  }
  return os.str();
}

AblationTable ablate(std::span<const Subject> subjects, AblationGrid grid, const RunConfig& base, HeadKind task,
                     std::span<const double> values, const AblationOptions& opts) {
  const auto cells = ablation_cells(grid, base, values);
  const auto allowed = grid_keys(grid);
  auto say = [&](const std::string& s) {
    if (opts.log) opts.log(s);
  };

  std::vector<std::string> ids;
  std::vector<std::optional<int>> classes;
  for (const auto& s : subjects) {
    ids.push_back(s.ts.subject_id);
    classes.push_back(task == HeadKind::Classify ? s.labels.cls : std::nullopt);
  }

  AblationTable table;
  std::optional<Model> shared_encoder;  // label-fraction cells share one pre-training run
  for (const auto& cell : cells) {
    const std::string gname = grid_name(grid);
    std::vector<std::string> methods{"stmae"};
    if (grid == AblationGrid::LabelFraction) methods.push_back("baseline");
    auto failed = [&](const std::string& method, const std::string& why) {
      AblationRow r;
      r.grid = gname;
      r.cell = cell.name;
      r.x = cell.x;
      r.method = method;
      r.fold = "mean";
      r.seed = cell.config.train.seed;
      r.status = "failed: " + why;
      table.rows.push_back(r);
      say("cell " + cell.name + " (" + method + ") failed: " + why);
    };

    // Only the grid's own keys may differ from the base configuration.
    bool hygiene_ok = true;
    for (const auto& k : diff_keys(base, cell.config))
      if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) {
        for (const auto& m : methods) failed(m, "configuration differs from base in " + k);
        hygiene_ok = false;
        break;
      }
    if (!hygiene_ok) continue;

    for (const auto& method : methods) {
      try {
        say("cell " + cell.name + " (" + method + ")");
        const FoldSplit split = split_folds(ids, classes, cell.config.train.folds, cell.config.train.seed);
        std::optional<Model> encoder;
        if (method == "stmae") {
          if (grid == AblationGrid::LabelFraction) {
            if (!shared_encoder) shared_encoder = pretrain(subjects, base).checkpoint.model;
            encoder = *shared_encoder;
          } else {
            PretrainOptions po;
            if (!opts.out_dir.empty()) po.out_dir = opts.out_dir / ("pretrain_" + gname + "_" + dir_safe(cell.name));
            encoder = pretrain(subjects, cell.config, po).checkpoint.model;
          }
        }
        const auto ft = finetune(subjects, encoder ? &*encoder : nullptr, task, split, cell.config);
        auto emit = [&](const std::string& fold, const MetricReport& m) {
          AblationRow r;
          r.grid = gname;
          r.cell = cell.name;
          r.x = cell.x;
          r.method = method;
          r.fold = fold;
          r.auroc = m.auroc;
          r.accuracy = m.accuracy;
          r.mae = m.mae;
          r.n = m.n;
          r.seed = cell.config.train.seed;
          table.rows.push_back(r);
        };
        for (const auto& m : ft.folds) emit(std::to_string(m.fold), m);
        emit("mean", ft.mean);
        emit("std", ft.sd);
      } catch (const std::exception& e) {
        failed(method, e.what());
      }
    }
  }

  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    const std::string g = grid_name(grid);
    std::ofstream(opts.out_dir / ("ablation_" + g + ".csv")) << table.to_csv();
    std::ofstream(opts.out_dir / ("ablation_" + g + "_plot.csv")) << table.to_plot_csv();
    nlohmann::ordered_json summary;
    summary["grid"] = g;
    summary["cells"] = nlohmann::ordered_json::array();
    for (const auto& c : cells) {
      nlohmann::ordered_json jc;
      jc["name"] = c.name;
      for (const auto& [k, v] : c.overrides) jc["overrides"][k] = v;
      summary["cells"].push_back(jc);
    }
    summary["base_config"] = to_json(base);
    std::ofstream(opts.out_dir / ("ablation_" + g + ".json")) << summary.dump(2) << '\n';
  }
  return table;
}

}  // namespace stmae
