// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "stmae/model.hpp"
#include "stmae/ssl.hpp"

namespace stmae {

enum class Schedule { Cosine, OneCycle };
enum class Resample { Epoch, Batch };

struct GraphConfig {
  int window = 50;
  int stride = 16;
  double frac = 0.3;
};

struct TrainConfig {
  double lr = 5e-4;
  double weight_decay = 1e-4;
  bool decoupled_weight_decay = true;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 32;
  int pretrain_epochs = 100;
  int finetune_epochs = 50;
  Schedule schedule = Schedule::Cosine;  // pre-training schedule; fine-tuning always uses one-cycle
  double onecycle_peak = 1e-3;
  double onecycle_floor = 5e-7;
  double onecycle_warm_frac = 0.2;
  std::uint64_t seed = 0;
  int segment_length = 0;  // 0 = whole series
  Resample resample = Resample::Epoch;
  int folds = 5;
  double label_fraction = 1.0;
  double ssl_fraction = 1.0;
  bool freeze_encoder = false;

  void validate() const;
};

/// Everything a command needs besides data paths.
struct RunConfig {
  ModelConfig model;
  SslConfig ssl;
  TrainConfig train;
  GraphConfig graph;

  void validate() const;
};

/// Set one option by its dotted key ("train.lr", "mask.ratio_node", ...).
/// Unknown keys and unparseable values throw ConfigError.
void set_option(RunConfig& cfg, std::string_view key, std::string_view value);
std::string get_option(const RunConfig& cfg, std::string_view key);
const std::vector<std::string>& option_keys();

/// Flat `key = value` text, '#' starts a comment.
void load_config_text(RunConfig& cfg, std::string_view text);
void load_config_file(RunConfig& cfg, const std::filesystem::path& path);
std::string to_config_text(const RunConfig& cfg);

nlohmann::ordered_json to_json(const RunConfig& cfg);
RunConfig from_json(const nlohmann::json& j);

/// Named parameter sets: "ukb-like" (window 50, stride 16) and "clinical-like" (window 16, stride 3).
void apply_preset(RunConfig& cfg, std::string_view name);

/// Keys whose values differ between two configurations.
std::vector<std::string> diff_keys(const RunConfig& a, const RunConfig& b);

}  // namespace stmae
