// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "stmae/model.hpp"

namespace stmae {

enum class NodeCriterion { Sce, Mse };
enum class EdgeCriterion { Bce, Mse };
enum class NodeLossScope { Masked, All };

struct MaskConfig {
  double ratio_node = 0.3;  // fraction of nodes whose features are hidden
  double ratio_edge = 0.3;  // fraction of unordered node pairs whose adjacency is flipped
  double ratio_time = 0.5;  // fraction of interior snapshots reconstructed per step
  MaskMode node_mode = MaskMode::Token;

  void validate() const;
};

struct SslConfig {
  MaskConfig mask;
  double sce_gamma = 2.0;
  NodeCriterion node_criterion = NodeCriterion::Sce;
  EdgeCriterion edge_criterion = EdgeCriterion::Bce;
  bool recon_node = true;
  bool recon_edge = true;
  NodeLossScope node_loss_scope = NodeLossScope::Masked;
  bool mask_context = false;       // mask the flanking snapshots before encoding them
  bool symmetric_context = false;  // average both concatenation orders in the temporal node decoder
  bool allow_spatial_only = false; // accept T < 3 by skipping the temporal objective
  bool detach_target = true;       // node targets X(t) enter the loss as constants

  void validate() const;
};

struct MaskedSnapshot {
  ad::Var X_m;
  Mat A_m;
  std::vector<int> node_mask;                     // 0-based node ids, sorted
  std::vector<std::pair<int, int>> edge_flips;    // (i, j), i < j
};

/// 1-based interior time indices {2..T-1}, |result| = max(1, round(ratio * (T - 2))), sorted.
std::vector<int> sample_mask_times(int T, double ratio_time, Rng& rng);

/// Uniform (t_a, t_b) with 1 <= t_a < t < t_b <= T.
std::pair<int, int> sample_context(int t, int T, Rng& rng);

/// Hide round(ratio_node * N) node rows and flip round(ratio_edge * N(N-1)/2) node pairs.
MaskedSnapshot mask_snapshot(Forward& fw, const ad::Var& X, const Mat& A, const MaskConfig& cfg, Rng& rng);

/// Value-only conveniences around the differentiable losses.
double sce_loss(const Mat& X, const Mat& X_hat, std::span<const int> subset, double gamma, int* skipped = nullptr);
double bce_loss(const Mat& A, const Mat& A_hat);

struct LossBreakdown {
  double l_sp_node = 0, l_sp_edge = 0, l_tp_node = 0, l_tp_edge = 0;
  double l_spatial = 0, l_temporal = 0, l_total = 0;
  std::vector<int> mask_times;
  int zero_norm_rows = 0;
  bool spatial_only = false;
};

/// Per-subject forward state shared between the spatial and temporal objectives:
/// time encodings plus lazily built unmasked features and encodings per snapshot.
class StepState {
 public:
  StepState(Forward& fw, const DynamicGraph& g);

  Forward& fw() { return fw_; }
  const DynamicGraph& graph() const { return g_; }
  int T() const { return g_.T(); }
  const ad::Var& features(int t);         // X(t), 1-based
  const ad::Var& unmasked_encoding(int t);  // Z(t) from (X(t), A(t))

 private:
  Forward& fw_;
  const DynamicGraph& g_;
  std::vector<ad::Var> eta_;
  std::vector<ad::Var> x_;
  std::vector<ad::Var> z_;
};

struct TermPair {
  ad::Var node;  // invalid when the node objective is disabled
  ad::Var edge;  // invalid when the edge objective is disabled
  int zero_norm_rows = 0;
};

struct SpatialResult {
  TermPair loss;
  MaskedSnapshot masked;
  ad::Var X_hat, A_hat;
};

struct TemporalResult {
  TermPair loss;
  int t_a = 0, t_b = 0;
  ad::Var X_hat, A_hat;
};

SpatialResult spatial_step(StepState& st, int t, const SslConfig& cfg, Rng& rng);

/// Reconstruct snapshot t from two context encodings (order as given).
TemporalResult temporal_reconstruct(StepState& st, int t, const ad::Var& Za, const ad::Var& Zb, const SslConfig& cfg);

TemporalResult temporal_step(StepState& st, int t, const SslConfig& cfg, Rng& rng);

/// One subject's spatio-temporal objective. When `grads` is non-null the
/// gradient of l_total is accumulated into it.
LossBreakdown stmae_step(const Model& model, const DynamicGraph& g, const SslConfig& cfg, Rng& rng,
                         Grads* grads = nullptr);

}  // namespace stmae
