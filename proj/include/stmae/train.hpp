// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "stmae/config.hpp"
#include "stmae/eval.hpp"
#include "stmae/ingest.hpp"
#include "stmae/model.hpp"

namespace stmae {

/// base * (1 + cos(pi * step / total)) / 2.
double cosine_lr(long step, long total, double base);

/// Linear warm-up from cfg.lr to the peak over the first warm_frac of steps,
/// then cosine decay from the peak to the floor.
double onecycle_lr(long step, long total, const TrainConfig& cfg);

struct AdamState {
  Grads m, v;
  long step = 0;
};

AdamState make_adam_state(const ParamStore& params);

/// One Adam/AdamW update. Entries with frozen[i] set are left untouched.
void adam_update(ParamStore& params, const Grads& grads, AdamState& state, double lr, const TrainConfig& cfg,
                 const std::vector<bool>* frozen = nullptr);

struct Checkpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  RunConfig config;
  Model model;
  AdamState optimizer;
  int epoch = 0;       // completed epochs
  long global_step = 0;
};

/// Layout: "STMAECKP", u32 version, u64 header length, JSON header (config,
/// epoch, step, rng derivation, tensor directory), then little-endian f64
/// data for every parameter followed by the Adam m and v buffers.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct PretrainLogRow {
  int epoch = 0;
  long step = 0;
  double l_sp_node = 0, l_sp_edge = 0, l_tp_node = 0, l_tp_edge = 0, l_total = 0;
  double lr = 0;
};

struct PretrainOptions {
  std::filesystem::path out_dir;  // empty: no files written
  std::function<void(const PretrainLogRow&)> on_step;
};

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<PretrainLogRow> log;
  std::vector<double> epoch_loss;  // mean l_total per epoch
  std::vector<std::string> ssl_subjects;
};

PretrainResult pretrain(std::span<const Subject> subjects, const RunConfig& cfg, const PretrainOptions& opts = {});

/// Header line for loss logs.
std::string loss_log_header();
std::string format_log_row(const PretrainLogRow& row);

struct Prediction {
  std::string subject_id;
  int fold = 0;
  double score = 0;  // probability (classify) or value (regress)
  double label = 0;
};

struct FinetuneOptions {
  std::filesystem::path out_dir;
  std::function<void(int fold, int epoch, double loss)> on_epoch;
};

struct FinetuneResult {
  std::vector<MetricReport> folds;
  MetricReport mean, sd;
  std::vector<Prediction> predictions;
  std::vector<std::vector<std::string>> train_sets;  // labelled subjects used per fold
};

/// k-fold fine-tuning. `pretrained` supplies the encoder; nullptr trains from
/// a random initialisation with otherwise identical code.
FinetuneResult finetune(std::span<const Subject> subjects, const Model* pretrained, HeadKind task,
                        const FoldSplit& split, const RunConfig& cfg, const FinetuneOptions& opts = {});

struct GradCheckEntry {
  std::string name;
  int row = 0, col = 0;
  double analytic = 0, numeric = 0, rel_err = 0;
  bool zero = false;  // both gradients below the zero threshold
};

struct GradCheckGroup {
  std::string group;
  int checked = 0;
  int zero_flagged = 0;
  double max_rel_err = 0;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0;
  double tolerance = 1e-4;
  bool passed() const { return max_rel_err < tolerance; }
};

struct GradCheckOptions {
  int samples_per_group = 20;
  double h = 1e-6;
  double tolerance = 1e-4;
  double zero_threshold = 1e-8;
  int n_rois = 6;
  int snapshots = 5;
};

/// Central finite differences of the pre-training loss on a tiny random
/// model. Masks and context draws are replayed identically per evaluation.
GradCheckReport grad_check(const RunConfig& cfg, std::uint64_t seed, const GradCheckOptions& opts = {});

/// Worker count from STMAE_THREADS (default: hardware concurrency, min 1).
int worker_count();

/// Run fn(i) for i in [0, n) on up to worker_count() threads.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace stmae
