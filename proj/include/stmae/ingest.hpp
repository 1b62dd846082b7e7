// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "stmae/common.hpp"

namespace stmae {

/// One subject's ROI x time signal matrix (rows = ROIs, columns = timepoints).
struct RoiTimeSeries {
  std::string subject_id;
  Mat P;

  int n_rois() const { return static_cast<int>(P.rows()); }
  int n_timepoints() const { return static_cast<int>(P.cols()); }
};

/// Parse a headerless CSV (rows = ROIs). Throws FormatError on ragged rows or
/// unparseable cells, naming the 1-based row (and column) involved.
RoiTimeSeries load_timeseries(const std::filesystem::path& path);

/// Canonical writer: shortest round-trip decimal per cell, ',' separated, '\n' terminated.
void save_timeseries(const std::filesystem::path& path, const RoiTimeSeries& ts);
std::string format_timeseries(const Mat& P);

struct Labels {
  std::optional<int> cls;        // 0/1 class label
  std::optional<double> target;  // continuous regression target
};

struct ManifestEntry {
  std::string subject_id;
  std::string path;  // as written in the manifest; relative paths resolve against the manifest dir
  Labels labels;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::filesystem::path base_dir;

  std::filesystem::path resolve(const ManifestEntry& e) const;
};

/// JSON-lines reader/writer. Duplicate subject ids are rejected.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

/// A manifest entry together with its loaded signal.
struct Subject {
  RoiTimeSeries ts;
  Labels labels;
};

/// Load every referenced series; all subjects must share the ROI count.
std::vector<Subject> load_dataset(const DatasetManifest& manifest);

/// Generator knobs for the community-coupled synthetic benchmark.
struct SynthSpec {
  int communities = 4;
  int smooth_width = 5;         // moving-average width applied to latent noise
  double contrast = 0.6;        // cross-community coupling added for class 1
  double target_coupling = 0.3; // scale of the subject-specific continuous coupling
  double noise = 0.5;           // per-ROI observation noise
  int window = 50;              // series must span at least two windows
};

/// In-memory generation; pure function of (n_subjects, n_rois, n_timepoints, seed, spec).
std::vector<Subject> synth_subjects(int n_subjects, int n_rois, int n_timepoints, std::uint64_t seed,
                                    const SynthSpec& spec = {});

/// Writes `<out_dir>/<subject>.csv` files plus `<out_dir>/manifest.jsonl`.
DatasetManifest synth_dataset(int n_subjects, int n_rois, int n_timepoints, std::uint64_t seed,
                              const SynthSpec& spec, const std::filesystem::path& out_dir);

struct FoldSplit {
  int k = 0;
  std::map<std::string, int> assignments;

  std::vector<std::string> fold_members(int fold) const;
};

/// Stratified when every subject carries a class label, plain shuffle otherwise.
FoldSplit split_folds(const std::vector<std::string>& subject_ids,
                      const std::vector<std::optional<int>>& classes, int k, std::uint64_t seed);
FoldSplit split_folds(const DatasetManifest& manifest, int k, std::uint64_t seed);

struct Segment {
  RoiTimeSeries ts;
  int offset = 0;
};

/// Contiguous column slice [s, s + length) with s uniform over all valid offsets.
Segment sample_segment(const RoiTimeSeries& ts, int length, Rng& rng);

}  // namespace stmae
