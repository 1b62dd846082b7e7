// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stmae/common.hpp"
#include "stmae/ingest.hpp"

namespace stmae {

/// One sliding-window position: correlation, binary adjacency and the
/// window-mean ROI signal consumed by the time encoder.
struct GraphSnapshot {
  int t = 0;  // 1-based window index
  Mat C;      // N x N Pearson correlation
  Mat A;      // N x N, entries in {0, 1}, symmetric, zero diagonal
  Vec mean;   // length N window-mean signal
};

struct DynamicGraph {
  std::string subject_id;
  int window = 0;
  int stride = 0;
  double frac = 0.0;
  int N = 0;
  std::vector<GraphSnapshot> snapshots;
  int degenerate_rois = 0;   // zero-variance (ROI, window) pairs encountered
  int empty_snapshots = 0;   // snapshots where thresholding selected nothing off-diagonal

  int T() const { return static_cast<int>(snapshots.size()); }
};

struct GraphStats {
  long n_graphs = 0;
  double n_nodes_avg = 0.0;
  double n_edges_avg = 0.0;
  int d_max = 0;
  double d_avg = 0.0;
  double K = 0.0;  // transitivity: 3 * triangles / wedges over all snapshots
  long zero_wedge_graphs = 0;
};

/// Windowed Pearson correlation of the rows of `window` (N x W, W >= 2).
/// Zero-variance rows get zero correlation with every other row; the diagonal is always 1.
/// `degenerate`, when given, receives the number of zero-variance rows.
Mat pearson_fc(const Mat& window, int* degenerate = nullptr);

struct Thresholded {
  Mat A;
  bool empty = false;  // k <= N: nothing survives diagonal removal
};

/// Keep the k = round(frac * N^2) largest entries of C (ties by ascending (row, col)),
/// drop the diagonal, then symmetrize.
Thresholded threshold_topk(const Mat& C, double frac);

/// Snapshot count for a series of length t_max.
int snapshot_count(int t_max, int window, int stride);

DynamicGraph build_dynamic_graph(const RoiTimeSeries& ts, int window, int stride, double frac);

long edge_count(const Mat& A);
/// Exact (triangles, wedges) of an undirected binary adjacency.
std::pair<long, long> triangles_and_wedges(const Mat& A);

GraphStats graph_stats(std::span<const DynamicGraph> graphs);

/// Binary graph cache, little-endian:
///   "STDG" | u32 version(=1) | u32 N | u32 T | u32 window | u32 stride | f64 frac |
///   u32 id_len | id bytes | T x { u32 t | ceil(N(N-1)/2 / 8) adjacency bytes |
///   N(N-1)/2 f32 correlations | N f32 window means }
/// Pairs enumerate the strict upper triangle row-major; adjacency bits are LSB-first.
void save_graph(const std::filesystem::path& path, const DynamicGraph& g);
DynamicGraph load_graph(const std::filesystem::path& path);

}  // namespace stmae
