// SPDX-License-Identifier: Apache-2.0
#include "stmae/model.hpp"

#include <cmath>

namespace stmae {

void ModelConfig::validate() const {
  if (N < 2) throw ConfigError("model: N must be >= 2");
  if (D < 1) throw ConfigError("model: D must be >= 1");
  if (n_layers < 1) throw ConfigError("model: n_layers must be >= 1");
  if (sero_reduction < 1) throw ConfigError("model: sero_reduction must be >= 1");
  if (max_T < 1) throw ConfigError("model: max_T must be >= 1");
}

int ParamStore::add(std::string name, Mat value) {
  if (lookup_.count(name)) throw ConfigError("duplicate parameter " + name);
  const int idx = static_cast<int>(values_.size());
  lookup_.emplace(name, idx);
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return idx;
}

int ParamStore::index(std::string_view name) const {
  const auto it = lookup_.find(std::string(name));
  if (it == lookup_.end()) throw ConfigError("unknown parameter " + std::string(name));
  return it->second;
}

bool ParamStore::contains(std::string_view name) const { return lookup_.count(std::string(name)) > 0; }

std::vector<Mat> ParamStore::zeros_like() const {
  std::vector<Mat> out;
  out.reserve(values_.size());
  for (const auto& v : values_) out.push_back(Mat::Zero(v.rows(), v.cols()));
  return out;
}

bool ParamStore::all_finite() const {
  for (const auto& v : values_)
    if (!v.allFinite()) return false;
  return true;
}

std::string param_group(std::string_view name) {
  const auto dot = name.find('.');
  return std::string(dot == std::string_view::npos ? name : name.substr(0, dot));
}

bool is_encoder_param(std::string_view name) {
  const std::string g = param_group(name);
  return g == "time" || g == "input" || g == "gin";
}

namespace {

Mat uniform_bounded(Rng& rng, Eigen::Index rows, Eigen::Index cols, double bound) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = bound * (2.0 * uniform01(rng) - 1.0);
  return m;
}

Mat uniform_fan_in(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  return uniform_bounded(rng, rows, cols, 1.0 / std::sqrt(static_cast<double>(rows)));
}

}  // namespace

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng = derive_rng(seed, {0x1417ull});
  const int N = cfg_.N, D = cfg_.D;
  auto& p = params_;

  if (cfg_.time_encoder == TimeEncoderKind::Gru) {
    p.add("time.in_w", uniform_fan_in(rng, N, D));
    p.add("time.in_b", Mat::Zero(1, D));
    for (const char* gate : {"z", "r", "n"}) {
      p.add(std::string("time.gru.w") + gate, uniform_fan_in(rng, D, D));
      p.add(std::string("time.gru.u") + gate, uniform_fan_in(rng, D, D));
      p.add(std::string("time.gru.b") + gate, Mat::Zero(1, D));
    }
  } else {
    p.add("time.pos", uniform_bounded(rng, cfg_.max_T, D, 1.0 / std::sqrt(static_cast<double>(D))));
  }
  p.add("input.W", uniform_fan_in(rng, N + D, D));
  p.add("mask_token", uniform_bounded(rng, 1, N + D, 1.0 / std::sqrt(static_cast<double>(N + D))));

  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string pre = "gin." + std::to_string(l) + ".";
    p.add(pre + "eps", Mat::Zero(1, 1));
    p.add(pre + "w1", uniform_fan_in(rng, D, D));
    p.add(pre + "b1", Mat::Zero(1, D));
    p.add(pre + "w2", uniform_fan_in(rng, D, D));
    p.add(pre + "b2", Mat::Zero(1, D));
  }

  p.add("ssl.W_sp", uniform_fan_in(rng, D, D));
  p.add("ssl.W_tp", uniform_fan_in(rng, 2 * D, D));
  for (const char* dec : {"dec_node.", "dec_edge."}) {
    p.add(std::string(dec) + "w1", uniform_fan_in(rng, D, D));
    p.add(std::string(dec) + "b1", Mat::Zero(1, D));
    p.add(std::string(dec) + "w2", uniform_fan_in(rng, D, D));
    p.add(std::string(dec) + "b2", Mat::Zero(1, D));
  }

  const int hidden = std::max(1, D / cfg_.sero_reduction);
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string pre = "readout." + std::to_string(l) + ".";
    p.add(pre + "w1", uniform_fan_in(rng, 2 * D, hidden));
    p.add(pre + "b1", Mat::Zero(1, hidden));
    p.add(pre + "w2", uniform_fan_in(rng, hidden, 1));
    p.add(pre + "b2", Mat::Zero(1, 1));
  }
  p.add("head.w", uniform_fan_in(rng, static_cast<Eigen::Index>(cfg_.n_layers) * D, 1));
  p.add("head.b", Mat::Zero(1, 1));
}

void Model::load_encoder_from(const Model& other) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const std::string& n = params_.name(static_cast<int>(i));
    if (!is_encoder_param(n)) continue;
    if (!other.params().contains(n)) throw ConfigError("checkpoint lacks encoder tensor " + n);
    const Mat& src = other.params().value(n);
    Mat& dst = params_.value(static_cast<int>(i));
    if (src.rows() != dst.rows() || src.cols() != dst.cols())
      throw ConfigError("checkpoint tensor " + n + " has incompatible shape");
    dst = src;
  }
}

Forward::Forward(const Model& model, ad::Tape& tape, Grads* grads)
    : model_(model), tape_(tape), grads_(grads), bound_(model.params().size()) {
  if (grads_ && grads_->size() != model.params().size()) *grads_ = model.params().zeros_like();
}

ad::Var Forward::param(std::string_view name) {
  const int idx = model_.params().index(name);
  ad::Var& slot = bound_[static_cast<std::size_t>(idx)];
  if (!slot.valid()) {
    const bool frozen_eps = !config().gin_eps_learnable && name.ends_with(".eps");
    Mat* sink = (grads_ && !frozen_eps) ? &(*grads_)[static_cast<std::size_t>(idx)] : nullptr;
    slot = tape_.leaf(model_.params().value(idx), sink);
  }
  return slot;
}

ad::Var Forward::activate(const ad::Var& x) {
  return config().activation == Activation::Gelu ? ad::gelu(x) : x;
}

ad::Var Forward::mlp2(const ad::Var& x, const std::string& prefix) {
  const ad::Var h = activate(ad::add_row(ad::matmul(x, param(prefix + "w1")), param(prefix + "b1")));
  return ad::add_row(ad::matmul(h, param(prefix + "w2")), param(prefix + "b2"));
}

std::vector<ad::Var> Forward::encode_time(std::span<const Vec> window_means) {
  std::vector<ad::Var> eta;
  eta.reserve(window_means.size());
  if (config().time_encoder == TimeEncoderKind::Positional) {
    const ad::Var table = param("time.pos");
    if (window_means.size() > static_cast<std::size_t>(config().max_T))
      throw ConfigError("positional time encoder supports at most max_T snapshots");
    for (std::size_t t = 0; t < window_means.size(); ++t) eta.push_back(ad::row_of(table, static_cast<Eigen::Index>(t)));
    return eta;
  }
  ad::Var h = tape_.constant(Mat::Zero(1, config().D));
  for (const auto& m : window_means) {
    const ad::Var x = ad::add_row(ad::matmul(tape_.constant(m.transpose()), param("time.in_w")), param("time.in_b"));
    auto gate = [&](const char* g) {
      return ad::add_row(ad::add(ad::matmul(x, param(std::string("time.gru.w") + g)),
                                 ad::matmul(h, param(std::string("time.gru.u") + g))),
                         param(std::string("time.gru.b") + g));
    };
    const ad::Var z = ad::sigmoid(gate("z"));
    const ad::Var r = ad::sigmoid(gate("r"));
    const ad::Var n = ad::tanh(ad::add_row(
        ad::add(ad::matmul(x, param("time.gru.wn")), ad::matmul(ad::hadamard(r, h), param("time.gru.un"))),
        param("time.gru.bn")));
    h = ad::add(n, ad::hadamard(z, ad::sub(h, n)));
    eta.push_back(h);
  }
  return eta;
}

std::vector<ad::Var> Forward::encode_time(const DynamicGraph& g) {
  std::vector<Vec> means;
  means.reserve(g.snapshots.size());
  for (const auto& s : g.snapshots) means.push_back(s.mean);
  return encode_time(means);
}

ad::Var Forward::node_features(const ad::Var& eta) {
  const int N = config().N;
  const ad::Var identity = tape_.constant(Mat::Identity(N, N));
  return ad::matmul(ad::hcat(identity, ad::tile_rows(eta, N)), param("input.W"));
}

ad::Var Forward::mask_token_row() { return ad::matmul(param("mask_token"), param("input.W")); }

EncoderOutput Forward::gin_encode(const ad::Var& X, const Mat& A) {
  EncoderOutput out;
  const ad::Var adj = tape_.constant(A);
  ad::Var h = X;
  for (int l = 0; l < config().n_layers; ++l) {
    const std::string pre = "gin." + std::to_string(l) + ".";
    const ad::Var self = ad::add(h, ad::scale_by(h, param(pre + "eps")));
    const ad::Var agg = ad::add(self, ad::matmul(adj, h));
    ad::Var y = mlp2(agg, pre);
    if (config().gin_norm == NormKind::Layer) y = ad::layer_norm_rows(y);
    h = activate(y);
    out.layers.push_back(h);
  }
  return out;
}

ad::Var Forward::project_spatial(const ad::Var& Z) { return ad::matmul(Z, param("ssl.W_sp")); }

ad::Var Forward::project_temporal(const ad::Var& Za, const ad::Var& Zb) {
  return ad::matmul(ad::hcat(Za, Zb), param("ssl.W_tp"));
}

ad::Var Forward::decode_nodes(const ad::Var& projected) { return mlp2(projected, "dec_node."); }

ad::Var Forward::edge_embedding(const ad::Var& projected) { return mlp2(projected, "dec_edge."); }

ad::Var Forward::decode_edges_same(const ad::Var& H) { return ad::sigmoid(ad::matmul(H, ad::transpose(H))); }

ad::Var Forward::decode_edges_cross(const ad::Var& Ha, const ad::Var& Hb) {
  const ad::Var ab = ad::sigmoid(ad::matmul(Ha, ad::transpose(Hb)));
  const ad::Var ba = ad::sigmoid(ad::matmul(Hb, ad::transpose(Ha)));
  return ad::scale(ad::add(ab, ba), 0.5);
}

ad::Var Forward::readout(std::span<const ad::Var> layers) {
  if (layers.empty()) throw ConfigError("readout: no layer outputs");
  ad::Var out;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const ad::Var& H = layers[l];
    const std::string pre = "readout." + std::to_string(l) + ".";
    const ad::Var squeeze = ad::tile_rows(ad::mean_rows(H), H.rows());
    const ad::Var hidden = ad::gelu(ad::add_row(ad::matmul(ad::hcat(H, squeeze), param(pre + "w1")), param(pre + "b1")));
    const ad::Var gates = ad::sigmoid(ad::add_row(ad::matmul(hidden, param(pre + "w2")), param(pre + "b2")));
    const ad::Var pooled = ad::scale(ad::matmul(ad::transpose(gates), H), 1.0 / static_cast<double>(H.rows()));
    out = out.valid() ? ad::hcat(out, pooled) : pooled;
  }
  return out;
}

ad::Var Forward::head(std::span<const ad::Var> g_seq) {
  if (g_seq.empty()) throw ConfigError("head: empty readout sequence");
  ad::Var acc = g_seq.front();
  for (std::size_t t = 1; t < g_seq.size(); ++t) acc = ad::add(acc, g_seq[t]);
  const ad::Var mean = ad::scale(acc, 1.0 / static_cast<double>(g_seq.size()));
  return ad::add(ad::matmul(mean, param("head.w")), param("head.b"));
}

ad::Var Forward::predict(const DynamicGraph& g) {
  const auto eta = encode_time(g);
  std::vector<ad::Var> g_seq;
  g_seq.reserve(eta.size());
  for (std::size_t t = 0; t < eta.size(); ++t) {
    const auto enc = gin_encode(node_features(eta[t]), g.snapshots[t].A);
    g_seq.push_back(readout(enc.layers));
  }
  return head(g_seq);
}

}  // namespace stmae
