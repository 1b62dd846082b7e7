// SPDX-License-Identifier: Apache-2.0
// stmae command-line front end. Talks to the library through the C API only.
//
// Exit codes: 0 success, 1 usage error, 2 data/config error, 3 runtime failure.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "stmae/stmae.h"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Failure {
  int code;
  std::string message;
};

void check(stmae_status s) {
  if (s != STMAE_OK) throw Failure{static_cast<int>(s), stmae_last_error()};
}

std::string take_string(char* s) {
  std::string out = s ? s : "";
  stmae_free_string(s);
  return out;
}

struct ConfigDeleter {
  void operator()(stmae_config* c) const { stmae_config_destroy(c); }
};
struct DatasetDeleter {
  void operator()(stmae_dataset* d) const { stmae_dataset_destroy(d); }
};
struct CheckpointDeleter {
  void operator()(stmae_checkpoint* c) const { stmae_checkpoint_destroy(c); }
};
using ConfigPtr = std::unique_ptr<stmae_config, ConfigDeleter>;
using DatasetPtr = std::unique_ptr<stmae_dataset, DatasetDeleter>;
using CheckpointPtr = std::unique_ptr<stmae_checkpoint, CheckpointDeleter>;

void log_line(const char* line, void*) { std::cerr << line << '\n'; }

/// Options shared by every subcommand.
struct Common {
  std::string out;
  std::string config_file;
  std::string preset;
  std::vector<std::string> sets;
  std::string from_run;
  std::optional<std::uint64_t> seed;
};

struct Args {
  Common common;
  // synth
  int subjects = 200, rois = 64, timepoints = 300;
  std::optional<double> contrast, noise, target_coupling;
  std::optional<int> communities;
  // graphs
  std::string data, graphs;
  std::optional<int> window, stride;
  std::optional<double> frac;
  // training
  std::optional<int> epochs, batch_size, dim, layers;
  std::optional<double> lr, label_fraction, ssl_fraction;
  std::string checkpoint;
  bool baseline = false;
  std::string task = "classify";
  // ablate
  std::string grid;
  std::vector<double> values;
  std::optional<int> pretrain_epochs, finetune_epochs;
  // plot
  std::string csv, kind = "line";
  // replay
  std::string run_file;
};

void add_common(CLI::App* cmd, Common& c, bool out_required) {
  auto* o = cmd->add_option("--out", c.out, "Output directory");
  if (out_required) o->required();
  cmd->add_option("--config", c.config_file, "Configuration file of `key = value` lines")->check(CLI::ExistingFile);
  cmd->add_option("--preset", c.preset, "Named parameter set: ukb-like | clinical-like");
  cmd->add_option("--set", c.sets, "Override one option, KEY=VALUE (repeatable)");
  cmd->add_option("--from-run", c.from_run, "Load the full configuration from a run.json")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Random seed (train.seed)");
}

void add_graph_flags(CLI::App* cmd, Args& a) {
  cmd->add_option("--window", a.window, "Sliding-window length in timepoints");
  cmd->add_option("--stride", a.stride, "Sliding-window stride in timepoints");
  cmd->add_option("--frac", a.frac, "Fraction of the N*N correlation entries kept as edges");
}

void add_model_flags(CLI::App* cmd, Args& a) {
  cmd->add_option("--dim", a.dim, "Hidden width (model.D)");
  cmd->add_option("--layers", a.layers, "Number of GIN layers (model.n_layers)");
  cmd->add_option("--batch-size", a.batch_size, "Subjects per optimisation step");
  cmd->add_option("--lr", a.lr, "Base learning rate");
}

template <class T>
std::string text_of(const T& v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

void set(stmae_config* cfg, const std::string& key, const std::string& value) {
  check(stmae_config_set(cfg, key.c_str(), value.c_str()));
}

template <class T>
void set_if(stmae_config* cfg, const std::string& key, const std::optional<T>& v) {
  if (v) set(cfg, key, text_of(*v));
}

/// defaults < run.json < preset < config file < --set < explicit flags.
ConfigPtr build_config(const Args& a) {
  stmae_config* raw = nullptr;
  check(stmae_config_create(&raw));
  ConfigPtr cfg(raw);
  const Common& c = a.common;
  if (!c.from_run.empty()) {
    std::ifstream in(c.from_run);
    const auto j = nlohmann::json::parse(in);
    if (!j.contains("config")) throw Failure{2, c.from_run + " has no config object"};
    check(stmae_config_from_json(cfg.get(), j["config"].dump().c_str()));
  }
  if (!c.preset.empty()) check(stmae_config_preset(cfg.get(), c.preset.c_str()));
  if (!c.config_file.empty()) check(stmae_config_load(cfg.get(), c.config_file.c_str()));
  for (const auto& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Failure{1, "--set expects KEY=VALUE, got '" + kv + "'"};
    set(cfg.get(), kv.substr(0, eq), kv.substr(eq + 1));
  }
  set_if(cfg.get(), "train.seed", c.seed);
  set_if(cfg.get(), "graph.window", a.window);
  set_if(cfg.get(), "graph.stride", a.stride);
  set_if(cfg.get(), "graph.frac", a.frac);
  set_if(cfg.get(), "model.D", a.dim);
  set_if(cfg.get(), "model.n_layers", a.layers);
  set_if(cfg.get(), "train.batch_size", a.batch_size);
  set_if(cfg.get(), "train.lr", a.lr);
  set_if(cfg.get(), "train.label_fraction", a.label_fraction);
  set_if(cfg.get(), "train.ssl_fraction", a.ssl_fraction);
  set_if(cfg.get(), "train.pretrain_epochs", a.pretrain_epochs);
  set_if(cfg.get(), "train.finetune_epochs", a.finetune_epochs);
  return cfg;
}

DatasetPtr open_dataset(const std::string& path) {
  stmae_dataset* raw = nullptr;
  check(stmae_dataset_open(path.c_str(), &raw));
  return DatasetPtr(raw);
}

stmae_task parse_task(const std::string& t) {
  if (t == "classify") return STMAE_TASK_CLASSIFY;
  if (t == "regress") return STMAE_TASK_REGRESS;
  throw Failure{1, "--task must be classify or regress, got '" + t + "'"};
}

void write_run_json(const fs::path& dir, const std::string& command, const std::vector<std::string>& argv,
                    const stmae_config* cfg) {
  fs::create_directories(dir);
  json j;
  j["command"] = command;
  j["argv"] = argv;
  j["cwd"] = fs::current_path().string();
  j["version"] = stmae_version();
  char* text = nullptr;
  check(stmae_config_to_json(cfg, &text));
  j["config"] = json::parse(take_string(text));
  char* seed = nullptr;
  check(stmae_config_get(cfg, "train.seed", &seed));
  j["seed"] = std::stoull(take_string(seed));
  std::ofstream(dir / "run.json") << j.dump(2) << '\n';
}

int dispatch(const std::string& command, Args& a, const std::vector<std::string>& argv) {
  ConfigPtr cfg = build_config(a);
  fs::path out = a.common.out;

  if (command == "synth") {
    stmae_synth_spec spec;
    stmae_synth_spec_default(&spec);
    if (a.contrast) spec.contrast = *a.contrast;
    if (a.noise) spec.noise = *a.noise;
    if (a.target_coupling) spec.target_coupling = *a.target_coupling;
    if (a.communities) spec.communities = *a.communities;
    char* seed_text = nullptr;
    check(stmae_config_get(cfg.get(), "train.seed", &seed_text));
    const auto seed = std::stoull(take_string(seed_text));
    check(stmae_synth(a.subjects, a.rois, a.timepoints, seed, &spec, out.string().c_str()));
    write_run_json(out, command, argv, cfg.get());
    std::cout << "wrote " << a.subjects << " subjects to " << out.string() << '\n';
    return 0;
  }
  if (command == "build-graphs") {
    if (out.empty()) out = fs::path(a.data) / "graphs";
    auto ds = open_dataset(a.data);
    std::size_t n = 0;
    check(stmae_build_graphs(ds.get(), cfg.get(), out.string().c_str(), &n));
    write_run_json(out, command, argv, cfg.get());
    stmae_graph_stats st;
    check(stmae_graph_stats_dir(out.string().c_str(), &st));
    std::cout << "wrote " << n << " graphs to " << out.string() << " (" << st.n_graphs << " snapshots, "
              << st.n_graphs / static_cast<long>(std::max<std::size_t>(n, 1)) << " per subject)\n";
    return 0;
  }
  if (command == "stats") {
    if (out.empty()) out = a.graphs;
    stmae_graph_stats st;
    check(stmae_graph_stats_dir(a.graphs.c_str(), &st));
    json j;
    j["n_graphs"] = st.n_graphs;
    j["n_nodes_avg"] = st.n_nodes_avg;
    j["n_edges_avg"] = st.n_edges_avg;
    j["d_max"] = st.d_max;
    j["d_avg"] = st.d_avg;
    j["clustering"] = st.clustering;
    j["zero_wedge_graphs"] = st.zero_wedge_graphs;
    j["empty_snapshots"] = st.empty_snapshots;
    j["degenerate_rois"] = st.degenerate_rois;
    fs::create_directories(out);
    std::ofstream(out / "stats.json") << j.dump(2) << '\n';
    write_run_json(out, command, argv, cfg.get());
    std::cout << j.dump(2) << '\n';
    return 0;
  }
  if (command == "pretrain") {
    set_if(cfg.get(), "train.pretrain_epochs", a.epochs);
    auto ds = open_dataset(a.data);
    write_run_json(out, command, argv, cfg.get());
    check(stmae_pretrain(ds.get(), cfg.get(), out.string().c_str(), log_line, nullptr, nullptr));
    std::cout << "checkpoint: " << (out / "checkpoint.bin").string() << '\n';
    return 0;
  }
  if (command == "finetune") {
    set_if(cfg.get(), "train.finetune_epochs", a.epochs);
    if (a.checkpoint.empty() && !a.baseline)
      throw Failure{1, "finetune needs --checkpoint, or --baseline to train from a random initialisation"};
    auto ds = open_dataset(a.data);
    CheckpointPtr ck;
    if (!a.checkpoint.empty()) {
      stmae_checkpoint* raw = nullptr;
      check(stmae_checkpoint_load(a.checkpoint.c_str(), &raw));
      ck.reset(raw);
    }
    write_run_json(out, command, argv, cfg.get());
    stmae_metrics m;
    check(stmae_finetune(ds.get(), ck.get(), cfg.get(), parse_task(a.task), out.string().c_str(), log_line, nullptr, &m));
    if (m.has_auroc) std::cout << "auroc " << m.auroc_mean << " +/- " << m.auroc_std << '\n';
    if (m.has_accuracy) std::cout << "accuracy " << m.accuracy_mean << " +/- " << m.accuracy_std << '\n';
    if (m.has_mae) std::cout << "mae " << m.mae_mean << " +/- " << m.mae_std << '\n';
    return 0;
  }
  if (command == "ablate") {
    auto ds = open_dataset(a.data);
    write_run_json(out, command, argv, cfg.get());
    check(stmae_ablate(ds.get(), cfg.get(), a.grid.c_str(), a.values.empty() ? nullptr : a.values.data(),
                       a.values.size(), parse_task(a.task), out.string().c_str(), log_line, nullptr));
    std::cout << "wrote " << (out / ("ablation_" + a.grid + ".csv")).string() << '\n';
    return 0;
  }
  if (command == "grad-check") {
    if (!a.dim) set(cfg.get(), "model.D", "4");
    if (!a.layers) set(cfg.get(), "model.n_layers", "2");
    char* seed_text = nullptr;
    check(stmae_config_get(cfg.get(), "train.seed", &seed_text));
    const auto seed = std::stoull(take_string(seed_text));
    fs::create_directories(out);
    write_run_json(out, command, argv, cfg.get());
    stmae_grad_report rep;
    check(stmae_grad_check(cfg.get(), seed, (out / "grad_check.json").string().c_str(), &rep));
    std::cout << "checked " << rep.n_checked << " entries (" << rep.n_zero << " zero-gradient), max relative error "
              << rep.max_rel_err << " (tolerance " << rep.tolerance << "): " << (rep.passed ? "PASS" : "FAIL") << '\n';
    return rep.passed ? 0 : 3;
  }
  if (command == "plot") {
    fs::create_directories(out);
    const fs::path svg = out / (fs::path(a.csv).stem().string() + ".svg");
    check(stmae_plot(a.csv.c_str(), svg.string().c_str(), a.kind.c_str()));
    write_run_json(out, command, argv, cfg.get());
    std::cout << "wrote " << svg.string() << '\n';
    return 0;
  }
  throw Failure{1, "unknown command " + command};
}

int run(const std::vector<std::string>& argv);

int replay(const std::string& run_file) {
  std::ifstream in(run_file);
  if (!in) throw Failure{2, "cannot open " + run_file};
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Failure{2, run_file + ": " + e.what()};
  }
  if (!j.contains("argv") || !j.contains("config")) throw Failure{2, run_file + " lacks argv or config"};
  const fs::path abs_run = fs::absolute(run_file);
  std::vector<std::string> argv;
  const auto stored = j["argv"].get<std::vector<std::string>>();
  // Configuration sources are replaced by the recorded configuration.
  const std::vector<std::string> sources{"--config", "--preset", "--set", "--from-run"};
  for (std::size_t i = 0; i < stored.size(); ++i) {
    const std::string& t = stored[i];
    if (std::find(sources.begin(), sources.end(), t) != sources.end()) {
      ++i;
      continue;
    }
    const bool inline_value = std::any_of(sources.begin(), sources.end(),
                                          [&](const std::string& f) { return t.rfind(f + "=", 0) == 0; });
    if (!inline_value) argv.push_back(t);
  }
  argv.push_back("--from-run");
  argv.push_back(abs_run.string());
  if (j.contains("cwd")) fs::current_path(j["cwd"].get<std::string>());
  return run(argv);
}

int run(const std::vector<std::string>& argv) {
  CLI::App app{"stmae: dynamic functional-connectivity graphs and spatio-temporal masked autoencoder pre-training"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(stmae_version()));
  app.footer("Exit codes: 0 success, 1 usage error, 2 data/config error, 3 runtime failure.");
  Args a;

  auto* synth = app.add_subcommand("synth", "Generate a labelled synthetic dataset");
  add_common(synth, a.common, true);
  synth->add_option("--subjects", a.subjects, "Number of subjects")->capture_default_str();
  synth->add_option("--rois", a.rois, "ROIs per subject")->capture_default_str();
  synth->add_option("--timepoints", a.timepoints, "Timepoints per subject")->capture_default_str();
  synth->add_option("--contrast", a.contrast, "Cross-community coupling added for class 1");
  synth->add_option("--noise", a.noise, "Observation noise scale");
  synth->add_option("--target-coupling", a.target_coupling, "Scale of the continuous per-subject coupling");
  synth->add_option("--communities", a.communities, "Number of ROI communities");

  auto* build = app.add_subcommand("build-graphs", "Build dynamic graphs for every subject of a dataset");
  add_common(build, a.common, false);
  build->add_option("--data", a.data, "Dataset directory or manifest")->required();
  add_graph_flags(build, a);

  auto* stats = app.add_subcommand("stats", "Summarise a directory of dynamic graphs");
  add_common(stats, a.common, false);
  stats->add_option("--graphs", a.graphs, "Directory of .stdg files")->required();

  auto* pre = app.add_subcommand("pretrain", "Self-supervised pre-training");
  add_common(pre, a.common, true);
  pre->add_option("--data", a.data, "Dataset directory or manifest")->required();
  pre->add_option("--epochs", a.epochs, "Pre-training epochs");
  pre->add_option("--ssl-fraction", a.ssl_fraction, "Fraction of subjects used for pre-training");
  add_graph_flags(pre, a);
  add_model_flags(pre, a);

  auto* ft = app.add_subcommand("finetune", "k-fold fine-tuning and evaluation");
  add_common(ft, a.common, true);
  ft->add_option("--data", a.data, "Dataset directory or manifest")->required();
  ft->add_option("--checkpoint", a.checkpoint, "Pre-trained checkpoint")->check(CLI::ExistingFile);
  ft->add_flag("--baseline", a.baseline, "Train from a random initialisation instead of a checkpoint");
  ft->add_option("--task", a.task, "classify | regress")->capture_default_str();
  ft->add_option("--epochs", a.epochs, "Fine-tuning epochs");
  ft->add_option("--label-fraction", a.label_fraction, "Fraction of training labels used");
  add_graph_flags(ft, a);
  add_model_flags(ft, a);

  auto* abl = app.add_subcommand("ablate", "Run an ablation grid");
  add_common(abl, a.common, true);
  abl->add_option("--data", a.data, "Dataset directory or manifest")->required();
  abl->add_option("--grid", a.grid, "mask_ratio | criterion | ssl_fraction | label_fraction | recon_target")
      ->required();
  abl->add_option("--values", a.values, "Override the grid's numeric sweep")->delimiter(',');
  abl->add_option("--task", a.task, "classify | regress")->capture_default_str();
  abl->add_option("--pretrain-epochs", a.pretrain_epochs, "Pre-training epochs per cell");
  abl->add_option("--finetune-epochs", a.finetune_epochs, "Fine-tuning epochs per fold");
  add_graph_flags(abl, a);
  add_model_flags(abl, a);

  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of the pre-training gradient");
  add_common(gc, a.common, true);
  add_model_flags(gc, a);

  auto* plot = app.add_subcommand("plot", "Render a long-format results CSV (series,x,y) as SVG");
  add_common(plot, a.common, true);
  plot->add_option("--csv", a.csv, "Input CSV")->required()->check(CLI::ExistingFile);
  plot->add_option("--kind", a.kind, "line | bar")->capture_default_str();

  auto* rep = app.add_subcommand("replay", "Re-run a command from its run.json");
  rep->add_option("run_json", a.run_file, "Path to run.json")->required()->check(CLI::ExistingFile);

  std::vector<std::string> reversed(argv.rbegin(), argv.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (rep->parsed()) return replay(a.run_file);
  for (auto* sub : app.get_subcommands()) return dispatch(sub->get_name(), a, argv);
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    return run(args);
  } catch (const Failure& f) {
    std::cerr << "error: " << f.message << '\n';
    return f.code;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
}
