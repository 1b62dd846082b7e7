// SPDX-License-Identifier: Apache-2.0
#include "stmae/stmae.h"

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>

#include <json.hpp>

#include "stmae/ablate.hpp"
#include "stmae/config.hpp"
#include "stmae/dynfc.hpp"
#include "stmae/ingest.hpp"
#include "stmae/plot.hpp"
#include "stmae/train.hpp"

#ifndef STMAE_VERSION_STRING
#define STMAE_VERSION_STRING "0.0.0"
#endif

struct stmae_config {
  stmae::RunConfig cfg;
};

struct stmae_dataset {
  stmae::DatasetManifest manifest;
  std::vector<stmae::Subject> subjects;
};

struct stmae_checkpoint {
  stmae::Checkpoint ck;
};

namespace {

thread_local std::string g_last_error;

stmae_status fail(stmae_status s, const std::string& msg) {
  g_last_error = msg;
  return s;
}

template <class F>
stmae_status guard(F&& f) {
  try {
    f();
    g_last_error.clear();
    return STMAE_OK;
  } catch (const stmae::Error& e) {
    return fail(static_cast<stmae_status>(e.kind()), e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(STMAE_ERR_DATA, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(STMAE_ERR_DATA, e.what());
  } catch (const std::exception& e) {
    return fail(STMAE_ERR_RUNTIME, e.what());
  } catch (...) {
    return fail(STMAE_ERR_RUNTIME, "unknown error");
  }
}

void require(bool ok, const char* what) {
  if (!ok) throw stmae::Error(stmae::ErrorKind::Usage, what);
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

stmae::HeadKind head_of(stmae_task t) {
  require(t == STMAE_TASK_CLASSIFY || t == STMAE_TASK_REGRESS, "unknown task");
  return t == STMAE_TASK_CLASSIFY ? stmae::HeadKind::Classify : stmae::HeadKind::Regress;
}

void write_split(const std::filesystem::path& dir, const stmae::FoldSplit& split) {
  nlohmann::ordered_json j;
  j["k"] = split.k;
  for (const auto& [id, f] : split.assignments) j["assignments"][id] = f;
  std::ofstream(dir / "split.json") << j.dump(2) << '\n';
}

}  // namespace

extern "C" {

const char* stmae_version(void) { return STMAE_VERSION_STRING; }

const char* stmae_last_error(void) { return g_last_error.c_str(); }

void stmae_free_string(char* s) { std::free(s); }

stmae_status stmae_config_create(stmae_config** out) {
  return guard([&] {
    require(out != nullptr, "stmae_config_create: out is NULL");
    *out = new stmae_config{};
  });
}

void stmae_config_destroy(stmae_config* cfg) { delete cfg; }

stmae_status stmae_config_set(stmae_config* cfg, const char* key, const char* value) {
  return guard([&] {
    require(cfg && key && value, "stmae_config_set: NULL argument");
    stmae::set_option(cfg->cfg, key, value);
  });
}

stmae_status stmae_config_get(const stmae_config* cfg, const char* key, char** out) {
  return guard([&] {
    require(cfg && key && out, "stmae_config_get: NULL argument");
    *out = dup_string(stmae::get_option(cfg->cfg, key));
  });
}

stmae_status stmae_config_keys(char** out) {
  return guard([&] {
    require(out != nullptr, "stmae_config_keys: out is NULL");
    std::string s;
    for (const auto& k : stmae::option_keys()) s += k + "\n";
    *out = dup_string(s);
  });
}

stmae_status stmae_config_load(stmae_config* cfg, const char* path) {
  return guard([&] {
    require(cfg && path, "stmae_config_load: NULL argument");
    stmae::load_config_file(cfg->cfg, path);
  });
}

stmae_status stmae_config_preset(stmae_config* cfg, const char* name) {
  return guard([&] {
    require(cfg && name, "stmae_config_preset: NULL argument");
    stmae::apply_preset(cfg->cfg, name);
  });
}

stmae_status stmae_config_to_json(const stmae_config* cfg, char** out) {
  return guard([&] {
    require(cfg && out, "stmae_config_to_json: NULL argument");
    *out = dup_string(stmae::to_json(cfg->cfg).dump(2));
  });
}

stmae_status stmae_config_from_json(stmae_config* cfg, const char* json) {
  return guard([&] {
    require(cfg && json, "stmae_config_from_json: NULL argument");
    cfg->cfg = stmae::from_json(nlohmann::json::parse(json));
  });
}

void stmae_synth_spec_default(stmae_synth_spec* spec) {
  if (!spec) return;
  const stmae::SynthSpec d;
  *spec = {d.communities, d.smooth_width, d.contrast, d.target_coupling, d.noise, d.window};
}

stmae_status stmae_synth(int n_subjects, int n_rois, int n_timepoints, uint64_t seed, const stmae_synth_spec* spec,
                         const char* out_dir) {
  return guard([&] {
    require(out_dir != nullptr, "stmae_synth: out_dir is NULL");
    stmae::SynthSpec s;
    if (spec) {
      s.communities = spec->communities;
      s.smooth_width = spec->smooth_width;
      s.contrast = spec->contrast;
      s.target_coupling = spec->target_coupling;
      s.noise = spec->noise;
      s.window = spec->window;
    }
    stmae::synth_dataset(n_subjects, n_rois, n_timepoints, seed, s, out_dir);
  });
}

stmae_status stmae_dataset_open(const char* path, stmae_dataset** out) {
  return guard([&] {
    require(path && out, "stmae_dataset_open: NULL argument");
    std::filesystem::path p(path);
    if (std::filesystem::is_directory(p)) p /= "manifest.jsonl";
    auto ds = std::make_unique<stmae_dataset>();
    ds->manifest = stmae::load_manifest(p);
    ds->subjects = stmae::load_dataset(ds->manifest);
    *out = ds.release();
  });
}

size_t stmae_dataset_size(const stmae_dataset* ds) { return ds ? ds->subjects.size() : 0; }

int stmae_dataset_rois(const stmae_dataset* ds) {
  return ds && !ds->subjects.empty() ? ds->subjects.front().ts.n_rois() : 0;
}

void stmae_dataset_destroy(stmae_dataset* ds) { delete ds; }

stmae_status stmae_build_graphs(const stmae_dataset* ds, const stmae_config* cfg, const char* out_dir,
                                size_t* n_written) {
  return guard([&] {
    require(ds && cfg && out_dir, "stmae_build_graphs: NULL argument");
    const auto& g = cfg->cfg.graph;
    std::filesystem::create_directories(out_dir);
    std::vector<stmae::DynamicGraph> graphs(ds->subjects.size());
    stmae::parallel_for(static_cast<int>(graphs.size()), [&](int i) {
      graphs[static_cast<std::size_t>(i)] =
          stmae::build_dynamic_graph(ds->subjects[static_cast<std::size_t>(i)].ts, g.window, g.stride, g.frac);
    });
    for (const auto& dg : graphs) stmae::save_graph(std::filesystem::path(out_dir) / (dg.subject_id + ".stdg"), dg);
    if (n_written) *n_written = graphs.size();
  });
}

stmae_status stmae_graph_stats_dir(const char* graphs_dir, stmae_graph_stats* out) {
  return guard([&] {
    require(graphs_dir && out, "stmae_graph_stats_dir: NULL argument");
    if (!std::filesystem::is_directory(graphs_dir))
      throw stmae::ConfigError(std::string("graph directory not found: ") + graphs_dir);
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(graphs_dir))
      if (e.path().extension() == ".stdg") files.push_back(e.path());
    if (files.empty()) throw stmae::ConfigError(std::string("no .stdg graph files in ") + graphs_dir);
    std::sort(files.begin(), files.end());
    std::vector<stmae::DynamicGraph> graphs;
    for (const auto& f : files) graphs.push_back(stmae::load_graph(f));
    const auto s = stmae::graph_stats(graphs);
    *out = {};
    out->n_graphs = s.n_graphs;
    out->n_nodes_avg = s.n_nodes_avg;
    out->n_edges_avg = s.n_edges_avg;
    out->d_max = s.d_max;
    out->d_avg = s.d_avg;
    out->clustering = s.K;
    out->zero_wedge_graphs = s.zero_wedge_graphs;
    for (const auto& g : graphs) {
      out->empty_snapshots += g.empty_snapshots;
      out->degenerate_rois += g.degenerate_rois;
    }
  });
}

stmae_status stmae_pretrain(const stmae_dataset* ds, const stmae_config* cfg, const char* out_dir, stmae_log_fn log,
                            void* user, stmae_checkpoint** out) {
  return guard([&] {
    require(ds && cfg, "stmae_pretrain: NULL argument");
    stmae::PretrainOptions opts;
    if (out_dir) opts.out_dir = out_dir;
    if (log)
      opts.on_step = [&](const stmae::PretrainLogRow& r) { log(stmae::format_log_row(r).c_str(), user); };
    auto res = stmae::pretrain(ds->subjects, cfg->cfg, opts);
    if (out) *out = new stmae_checkpoint{std::move(res.checkpoint)};
  });
}

stmae_status stmae_checkpoint_load(const char* path, stmae_checkpoint** out) {
  return guard([&] {
    require(path && out, "stmae_checkpoint_load: NULL argument");
    *out = new stmae_checkpoint{stmae::load_checkpoint(path)};
  });
}

stmae_status stmae_checkpoint_save(const stmae_checkpoint* ck, const char* path) {
  return guard([&] {
    require(ck && path, "stmae_checkpoint_save: NULL argument");
    stmae::save_checkpoint(path, ck->ck);
  });
}

stmae_status stmae_checkpoint_config(const stmae_checkpoint* ck, stmae_config** out) {
  return guard([&] {
    require(ck && out, "stmae_checkpoint_config: NULL argument");
    *out = new stmae_config{ck->ck.config};
  });
}

void stmae_checkpoint_destroy(stmae_checkpoint* ck) { delete ck; }

stmae_status stmae_finetune(const stmae_dataset* ds, const stmae_checkpoint* ck, const stmae_config* cfg,
                            stmae_task task, const char* out_dir, stmae_log_fn log, void* user, stmae_metrics* out) {
  return guard([&] {
    require(ds && cfg, "stmae_finetune: NULL argument");
    const auto head = head_of(task);
    stmae::RunConfig rc = cfg->cfg;
    if (ck) {
      // Encoder shape comes from the checkpoint.
      const auto& m = ck->ck.config.model;
      rc.model.D = m.D;
      rc.model.n_layers = m.n_layers;
      rc.model.time_encoder = m.time_encoder;
      rc.model.max_T = m.max_T;
      rc.model.gin_norm = m.gin_norm;
      rc.model.activation = m.activation;
    }
    std::vector<std::string> ids;
    std::vector<std::optional<int>> classes;
    for (const auto& s : ds->subjects) {
      ids.push_back(s.ts.subject_id);
      classes.push_back(head == stmae::HeadKind::Classify ? s.labels.cls : std::nullopt);
    }
    const auto split = stmae::split_folds(ids, classes, rc.train.folds, rc.train.seed);
    stmae::FinetuneOptions opts;
    if (out_dir) {
      opts.out_dir = out_dir;
      std::filesystem::create_directories(opts.out_dir);
      write_split(opts.out_dir, split);
    }
    if (log)
      opts.on_epoch = [&](int fold, int epoch, double loss) {
        const std::string line = "fold " + std::to_string(fold) + " epoch " + std::to_string(epoch) +
                                 " loss " + std::to_string(loss);
        log(line.c_str(), user);
      };
    const auto res = stmae::finetune(ds->subjects, ck ? &ck->ck.model : nullptr, head, split, rc, opts);
    if (out_dir) {
      nlohmann::ordered_json j;
      j["task"] = res.mean.task;
      j["pretrained"] = ck != nullptr;
      for (const auto& f : res.folds) {
        nlohmann::ordered_json jf;
        jf["fold"] = f.fold;
        jf["n"] = f.n;
        if (f.auroc) jf["auroc"] = *f.auroc;
        if (f.accuracy) jf["accuracy"] = *f.accuracy;
        if (f.mae) jf["mae"] = *f.mae;
        j["folds"].push_back(jf);
      }
      for (const auto& [name, r] : {std::pair{"mean", &res.mean}, std::pair{"std", &res.sd}}) {
        if (r->auroc) j[name]["auroc"] = *r->auroc;
        if (r->accuracy) j[name]["accuracy"] = *r->accuracy;
        if (r->mae) j[name]["mae"] = *r->mae;
      }
      std::ofstream(opts.out_dir / "summary.json") << j.dump(2) << '\n';
    }
    if (out) {
      *out = {};
      out->folds = static_cast<int>(res.folds.size());
      if (res.mean.auroc) {
        out->has_auroc = 1;
        out->auroc_mean = *res.mean.auroc;
        out->auroc_std = *res.sd.auroc;
      }
      if (res.mean.accuracy) {
        out->has_accuracy = 1;
        out->accuracy_mean = *res.mean.accuracy;
        out->accuracy_std = *res.sd.accuracy;
      }
      if (res.mean.mae) {
        out->has_mae = 1;
        out->mae_mean = *res.mean.mae;
        out->mae_std = *res.sd.mae;
      }
    }
  });
}

stmae_status stmae_ablate(const stmae_dataset* ds, const stmae_config* cfg, const char* grid, const double* values,
                          size_t n_values, stmae_task task, const char* out_dir, stmae_log_fn log, void* user) {
  return guard([&] {
    require(ds && cfg && grid, "stmae_ablate: NULL argument");
    require(n_values == 0 || values != nullptr, "stmae_ablate: values is NULL");
    stmae::AblationOptions opts;
    if (out_dir) opts.out_dir = out_dir;
    if (log) opts.log = [&](const std::string& s) { log(s.c_str(), user); };
    stmae::ablate(ds->subjects, stmae::parse_grid(grid), cfg->cfg, head_of(task),
                  std::span<const double>(values, n_values), opts);
  });
}

stmae_status stmae_grad_check(const stmae_config* cfg, uint64_t seed, const char* report_path,
                              stmae_grad_report* out) {
  return guard([&] {
    require(cfg != nullptr, "stmae_grad_check: cfg is NULL");
    const auto rep = stmae::grad_check(cfg->cfg, seed);
    int zero = 0;
    for (const auto& g : rep.groups) zero += g.zero_flagged;
    if (report_path) {
      nlohmann::ordered_json j;
      j["max_rel_err"] = rep.max_rel_err;
      j["tolerance"] = rep.tolerance;
      j["passed"] = rep.passed();
      for (const auto& g : rep.groups)
        j["groups"].push_back({{"group", g.group},
                               {"checked", g.checked},
                               {"zero_gradient", g.zero_flagged},
                               {"max_rel_err", g.max_rel_err}});
      for (const auto& e : rep.entries)
        j["entries"].push_back({{"name", e.name},
                                {"row", e.row},
                                {"col", e.col},
                                {"analytic", e.analytic},
                                {"numeric", e.numeric},
                                {"rel_err", e.rel_err},
                                {"zero_gradient", e.zero}});
      std::ofstream os(report_path);
      if (!os) throw stmae::ConfigError(std::string("cannot write ") + report_path);
      os << j.dump(2) << '\n';
    }
    if (out) {
      out->max_rel_err = rep.max_rel_err;
      out->tolerance = rep.tolerance;
      out->n_checked = static_cast<int>(rep.entries.size());
      out->n_zero = zero;
      out->passed = rep.passed() ? 1 : 0;
    }
  });
}

stmae_status stmae_plot(const char* csv_path, const char* svg_path, const char* kind) {
  return guard([&] {
    require(csv_path && svg_path && kind, "stmae_plot: NULL argument");
    stmae::plot_file(csv_path, svg_path, stmae::parse_plot_kind(kind));
  });
}

}  // extern "C"
