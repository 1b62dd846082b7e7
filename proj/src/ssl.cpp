// SPDX-License-Identifier: Apache-2.0
#include "stmae/ssl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace stmae {

void MaskConfig::validate() const {
  auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in01(ratio_node)) throw ConfigError("mask: ratio_node must lie in [0, 1]");
  if (!in01(ratio_edge)) throw ConfigError("mask: ratio_edge must lie in [0, 1]");
  if (!(ratio_time > 0.0 && ratio_time <= 1.0)) throw ConfigError("mask: ratio_time must lie in (0, 1]");
}

void SslConfig::validate() const {
  mask.validate();
  if (sce_gamma < 1.0) throw ConfigError("ssl: sce_gamma must be >= 1");
  if (!recon_node && !recon_edge) throw ConfigError("ssl: at least one reconstruction target is required");
}

namespace {

/// First `k` entries of a uniformly shuffled 0..n-1 (partial Fisher-Yates).
std::vector<int> choose(int n, int k, Rng& rng) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < k; ++i) std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(uniform_int(rng, i, n - 1))]);
  idx.resize(static_cast<std::size_t>(k));
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<int> all_rows(Eigen::Index n) {
  std::vector<int> r(static_cast<std::size_t>(n));
  std::iota(r.begin(), r.end(), 0);
  return r;
}

ad::Var node_term(ad::Tape& tape, const ad::Var& target, const ad::Var& recon, std::span<const int> rows,
                  const SslConfig& cfg, int* skipped) {
  const ad::Var x = cfg.detach_target ? tape.constant(target.value()) : target;
  if (cfg.node_criterion == NodeCriterion::Sce) return ad::sce(x, recon, rows, cfg.sce_gamma, skipped);
  return ad::mse_rows(x, recon, rows);
}

ad::Var edge_term(const Mat& target, const ad::Var& prob, const SslConfig& cfg) {
  if (cfg.edge_criterion == EdgeCriterion::Bce) return ad::bce_offdiag(target, prob);
  return ad::mse_offdiag(target, prob);
}

}  // namespace

std::vector<int> sample_mask_times(int T, double ratio_time, Rng& rng) {
  if (T < 3) throw ConfigError("temporal masking needs T >= 3, got T = " + std::to_string(T));
  if (!(ratio_time > 0.0 && ratio_time <= 1.0)) throw ConfigError("ratio_time must lie in (0, 1]");
  const int interior = T - 2;
  const int k = std::max(1, static_cast<int>(std::lround(ratio_time * interior)));
  auto picked = choose(interior, std::min(k, interior), rng);
  for (auto& t : picked) t += 2;
  return picked;
}

std::pair<int, int> sample_context(int t, int T, Rng& rng) {
  if (t < 2 || t > T - 1)
    throw ConfigError("context sampling needs 2 <= t <= T-1 (t = " + std::to_string(t) + ", T = " + std::to_string(T) + ")");
  // S_{a,b} is a product set, so independent uniform draws are uniform over it.
  const int ta = uniform_int(rng, 1, t - 1);
  const int tb = uniform_int(rng, t + 1, T);
  return {ta, tb};
}

MaskedSnapshot mask_snapshot(Forward& fw, const ad::Var& X, const Mat& A, const MaskConfig& cfg, Rng& rng) {
  cfg.validate();
  const int N = static_cast<int>(A.rows());
  MaskedSnapshot out;
  out.node_mask = choose(N, static_cast<int>(std::lround(cfg.ratio_node * N)), rng);

  const int pairs = N * (N - 1) / 2;
  const auto flips = choose(pairs, static_cast<int>(std::lround(cfg.ratio_edge * pairs)), rng);
  // Decode flat strict-upper-triangle indices (row-major) back into (i, j).
  out.A_m = A;
  std::size_t next = 0;
  int p = 0;
  for (int i = 0; i < N && next < flips.size(); ++i)
    for (int j = i + 1; j < N && next < flips.size(); ++j, ++p) {
      if (flips[next] != p) continue;
      ++next;
      const double v = A(i, j) != 0.0 ? 0.0 : 1.0;
      out.A_m(i, j) = v;
      out.A_m(j, i) = v;
      out.edge_flips.emplace_back(i, j);
    }

  if (out.node_mask.empty())
    out.X_m = X;
  else if (cfg.node_mode == MaskMode::Zero)
    out.X_m = ad::zero_rows(X, out.node_mask);
  else
    out.X_m = ad::replace_rows(X, out.node_mask, fw.mask_token_row());
  return out;
}

double sce_loss(const Mat& X, const Mat& X_hat, std::span<const int> subset, double gamma, int* skipped) {
  ad::Tape tape;
  return ad::sce(tape.constant(X), tape.constant(X_hat), subset, gamma, skipped).scalar();
}

double bce_loss(const Mat& A, const Mat& A_hat) {
  ad::Tape tape;
  return ad::bce_offdiag(A, tape.constant(A_hat)).scalar();
}

StepState::StepState(Forward& fw, const DynamicGraph& g) : fw_(fw), g_(g) {
  eta_ = fw_.encode_time(g_);
  x_.resize(eta_.size());
  z_.resize(eta_.size());
}

const ad::Var& StepState::features(int t) {
  auto& slot = x_[static_cast<std::size_t>(t - 1)];
  if (!slot.valid()) slot = fw_.node_features(eta_[static_cast<std::size_t>(t - 1)]);
  return slot;
}

const ad::Var& StepState::unmasked_encoding(int t) {
  auto& slot = z_[static_cast<std::size_t>(t - 1)];
  if (!slot.valid()) slot = fw_.gin_encode(features(t), g_.snapshots[static_cast<std::size_t>(t - 1)].A).z();
  return slot;
}

SpatialResult spatial_step(StepState& st, int t, const SslConfig& cfg, Rng& rng) {
  Forward& fw = st.fw();
  const ad::Var X = st.features(t);
  const Mat& A = st.graph().snapshots[static_cast<std::size_t>(t - 1)].A;

  SpatialResult res;
  res.masked = mask_snapshot(fw, X, A, cfg.mask, rng);
  const ad::Var Z = fw.gin_encode(res.masked.X_m, res.masked.A_m).z();
  const ad::Var proj = fw.project_spatial(Z);
  if (cfg.recon_node) {
    res.X_hat = fw.decode_nodes(proj);
    const bool masked_only = cfg.node_loss_scope == NodeLossScope::Masked && !res.masked.node_mask.empty();
    const auto rows = masked_only ? res.masked.node_mask : all_rows(X.rows());
    res.loss.node = node_term(fw.tape(), X, res.X_hat, rows, cfg, &res.loss.zero_norm_rows);
  }
  if (cfg.recon_edge) {
    res.A_hat = fw.decode_edges_same(fw.edge_embedding(proj));
    res.loss.edge = edge_term(A, res.A_hat, cfg);
  }
  return res;
}

TemporalResult temporal_reconstruct(StepState& st, int t, const ad::Var& Za, const ad::Var& Zb, const SslConfig& cfg) {
  Forward& fw = st.fw();
  const ad::Var X = st.features(t);
  const Mat& A = st.graph().snapshots[static_cast<std::size_t>(t - 1)].A;
  TemporalResult res;
  if (cfg.recon_node) {
    ad::Var proj = fw.project_temporal(Za, Zb);
    if (cfg.symmetric_context) proj = ad::scale(ad::add(proj, fw.project_temporal(Zb, Za)), 0.5);
    res.X_hat = fw.decode_nodes(proj);
    res.loss.node = node_term(fw.tape(), X, res.X_hat, all_rows(X.rows()), cfg, &res.loss.zero_norm_rows);
  }
  if (cfg.recon_edge) {
    const ad::Var Ha = fw.edge_embedding(fw.project_spatial(Za));
    const ad::Var Hb = fw.edge_embedding(fw.project_spatial(Zb));
    res.A_hat = fw.decode_edges_cross(Ha, Hb);
    res.loss.edge = edge_term(A, res.A_hat, cfg);
  }
  return res;
}

TemporalResult temporal_step(StepState& st, int t, const SslConfig& cfg, Rng& rng) {
  const auto [ta, tb] = sample_context(t, st.T(), rng);
  ad::Var Za, Zb;
  if (cfg.mask_context) {
    Forward& fw = st.fw();
    for (auto [tc, out] : {std::pair{ta, &Za}, std::pair{tb, &Zb}}) {
      const auto m = mask_snapshot(fw, st.features(tc), st.graph().snapshots[static_cast<std::size_t>(tc - 1)].A,
                                   cfg.mask, rng);
      *out = fw.gin_encode(m.X_m, m.A_m).z();
    }
  } else {
    Za = st.unmasked_encoding(ta);
    Zb = st.unmasked_encoding(tb);
  }
  auto res = temporal_reconstruct(st, t, Za, Zb, cfg);
  res.t_a = ta;
  res.t_b = tb;
  return res;
}

LossBreakdown stmae_step(const Model& model, const DynamicGraph& g, const SslConfig& cfg, Rng& rng, Grads* grads) {
  cfg.validate();
  ad::Tape tape;
  Forward fw(model, tape, grads);
  StepState st(fw, g);
  const int T = g.T();

  LossBreakdown out;
  if (T < 3) {
    if (!cfg.allow_spatial_only || T < 1)
      throw ConfigError("subject " + g.subject_id + " yields T = " + std::to_string(T) +
                        " snapshots; the temporal objective needs T >= 3");
    out.spatial_only = true;
    const int k = std::max(1, static_cast<int>(std::lround(cfg.mask.ratio_time * T)));
    std::vector<int> idx(static_cast<std::size_t>(T));
    std::iota(idx.begin(), idx.end(), 1);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(std::min(k, T)));
    std::sort(idx.begin(), idx.end());
    out.mask_times = idx;
  } else {
    out.mask_times = sample_mask_times(T, cfg.mask.ratio_time, rng);
  }

  std::vector<ad::Var> terms;
  auto take = [&](const ad::Var& v, double& sink) {
    if (!v.valid()) return;
    sink += v.scalar();
    terms.push_back(v);
  };
  for (int t : out.mask_times) {
    const auto sp = spatial_step(st, t, cfg, rng);
    take(sp.loss.node, out.l_sp_node);
    take(sp.loss.edge, out.l_sp_edge);
    out.zero_norm_rows += sp.loss.zero_norm_rows;
    if (out.spatial_only) continue;
    const auto tp = temporal_step(st, t, cfg, rng);
    take(tp.loss.node, out.l_tp_node);
    take(tp.loss.edge, out.l_tp_edge);
    out.zero_norm_rows += tp.loss.zero_norm_rows;
  }
  out.l_spatial = out.l_sp_node + out.l_sp_edge;
  out.l_temporal = out.l_tp_node + out.l_tp_edge;
  out.l_total = out.l_spatial + out.l_temporal;

  if (grads && !terms.empty()) {
    ad::Var total = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
    tape.backward(total);
  }
  return out;
}

}  // namespace stmae
