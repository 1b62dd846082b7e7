// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "stmae/autodiff.hpp"
#include "stmae/common.hpp"
#include "stmae/dynfc.hpp"

namespace stmae {

enum class MaskMode { Zero, Token };
enum class Activation { Gelu, Linear };
enum class NormKind { None, Layer };
enum class TimeEncoderKind { Gru, Positional };
enum class HeadKind { Classify, Regress };

struct ModelConfig {
  int N = 0;           // ROI count, taken from the data
  int D = 32;          // hidden width
  int n_layers = 4;
  bool gin_eps_learnable = true;
  Activation activation = Activation::Gelu;
  NormKind gin_norm = NormKind::Layer;
  TimeEncoderKind time_encoder = TimeEncoderKind::Gru;
  int max_T = 256;        // positional table size
  int sero_reduction = 2;
  HeadKind head = HeadKind::Classify;

  void validate() const;
};

/// Named dense tensors in insertion order.
class ParamStore {
 public:
  int add(std::string name, Mat value);
  int index(std::string_view name) const;
  bool contains(std::string_view name) const;
  std::size_t size() const { return values_.size(); }
  const std::string& name(int i) const { return names_[static_cast<std::size_t>(i)]; }
  Mat& value(int i) { return values_[static_cast<std::size_t>(i)]; }
  const Mat& value(int i) const { return values_[static_cast<std::size_t>(i)]; }
  Mat& value(std::string_view n) { return value(index(n)); }
  const Mat& value(std::string_view n) const { return value(index(n)); }
  std::vector<Mat> zeros_like() const;
  bool all_finite() const;

 private:
  std::vector<std::string> names_;
  std::vector<Mat> values_;
  std::unordered_map<std::string, int> lookup_;
};

/// Gradient buffers aligned with a ParamStore.
using Grads = std::vector<Mat>;

/// Leading component of a parameter name ("gin.0.w1" -> "gin").
std::string param_group(std::string_view name);

/// Parameter groups that make up the encoder (transferred from pre-training).
bool is_encoder_param(std::string_view name);

class Model {
 public:
  Model() = default;
  Model(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// Copy every encoder tensor from `other` (shapes must match).
  void load_encoder_from(const Model& other);

 private:
  ModelConfig cfg_;
  ParamStore params_;
};

struct EncoderOutput {
  std::vector<ad::Var> layers;  // H^1 ... H^L
  const ad::Var& z() const { return layers.back(); }
};

/// Binds a model's parameters onto one tape for a single forward (and
/// optionally backward) pass. When `grads` is given, parameter adjoints are
/// accumulated into it on backward().
class Forward {
 public:
  Forward(const Model& model, ad::Tape& tape, Grads* grads = nullptr);

  ad::Tape& tape() { return tape_; }
  const ModelConfig& config() const { return model_.config(); }
  ad::Var param(std::string_view name);

  /// eta(1..T) from the per-window mean ROI vectors; causal in t.
  std::vector<ad::Var> encode_time(std::span<const Vec> window_means);
  std::vector<ad::Var> encode_time(const DynamicGraph& g);

  /// X(t): row v = [e_v || eta(t)] W.
  ad::Var node_features(const ad::Var& eta);
  /// Replacement row for masked nodes in token mode: token W.
  ad::Var mask_token_row();

  EncoderOutput gin_encode(const ad::Var& X, const Mat& A);

  ad::Var project_spatial(const ad::Var& Z);
  ad::Var project_temporal(const ad::Var& Za, const ad::Var& Zb);
  ad::Var decode_nodes(const ad::Var& projected);
  ad::Var edge_embedding(const ad::Var& projected);
  ad::Var decode_edges_same(const ad::Var& H);
  ad::Var decode_edges_cross(const ad::Var& Ha, const ad::Var& Hb);

  /// Gated node pooling per layer, concatenated across layers (length L*D).
  ad::Var readout(std::span<const ad::Var> layers);
  /// Temporal mean of readouts followed by an affine map to one output.
  ad::Var head(std::span<const ad::Var> g_seq);

  /// Downstream forward on unmasked snapshots: logit (classify) or value (regress).
  ad::Var predict(const DynamicGraph& g);

 private:
  ad::Var activate(const ad::Var& x);
  ad::Var mlp2(const ad::Var& x, const std::string& prefix);

  const Model& model_;
  ad::Tape& tape_;
  Grads* grads_;
  std::vector<ad::Var> bound_;
};

}  // namespace stmae
