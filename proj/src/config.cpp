// SPDX-License-Identifier: Apache-2.0
#include "stmae/config.hpp"

#include <array>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace stmae {

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("train.lr must be >= 0");
  if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (pretrain_epochs < 0 || finetune_epochs < 0) throw ConfigError("epoch counts must be >= 0");
  if (!(onecycle_warm_frac > 0.0 && onecycle_warm_frac < 1.0))
    throw ConfigError("train.onecycle_warm_frac must lie in (0, 1)");
  if (!(onecycle_floor < onecycle_peak)) throw ConfigError("train.onecycle_floor must be below onecycle_peak");
  if (segment_length < 0) throw ConfigError("train.segment_length must be >= 0");
  if (folds < 2) throw ConfigError("train.folds must be >= 2");
  if (!(label_fraction > 0.0 && label_fraction <= 1.0)) throw ConfigError("train.label_fraction must lie in (0, 1]");
  if (!(ssl_fraction > 0.0 && ssl_fraction <= 1.0)) throw ConfigError("train.ssl_fraction must lie in (0, 1]");
}

void RunConfig::validate() const {
  ssl.validate();
  train.validate();
  if (graph.window < 2) throw ConfigError("graph.window must be >= 2");
  if (graph.stride < 1) throw ConfigError("graph.stride must be >= 1");
  if (!(graph.frac > 0.0 && graph.frac < 1.0)) throw ConfigError("graph.frac must lie in (0, 1)");
}

namespace {

using json = nlohmann::ordered_json;

std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <class T>
T parse_number(std::string_view key, std::string_view s) {
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw ConfigError("option " + std::string(key) + ": cannot parse '" + std::string(s) + "'");
  return v;
}

bool parse_bool(std::string_view key, std::string_view s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("option " + std::string(key) + ": expected true/false, got '" + std::string(s) + "'");
}

template <class E, std::size_t M>
E parse_enum(std::string_view key, std::string_view s, const std::array<std::pair<E, const char*>, M>& names) {
  for (const auto& [e, n] : names)
    if (s == n) return e;
  std::string allowed;
  for (const auto& [e, n] : names) allowed += (allowed.empty() ? "" : "|") + std::string(n);
  throw ConfigError("option " + std::string(key) + ": expected one of " + allowed + ", got '" + std::string(s) + "'");
}

template <class E, std::size_t M>
const char* enum_name(E v, const std::array<std::pair<E, const char*>, M>& names) {
  for (const auto& [e, n] : names)
    if (e == v) return n;
  return "?";
}

constexpr std::array<std::pair<Activation, const char*>, 2> kActivation{{{Activation::Gelu, "gelu"}, {Activation::Linear, "linear"}}};
constexpr std::array<std::pair<NormKind, const char*>, 2> kNorm{{{NormKind::None, "none"}, {NormKind::Layer, "layer"}}};
constexpr std::array<std::pair<TimeEncoderKind, const char*>, 2> kTimeEnc{
    {{TimeEncoderKind::Gru, "gru"}, {TimeEncoderKind::Positional, "positional"}}};
constexpr std::array<std::pair<HeadKind, const char*>, 2> kHead{{{HeadKind::Classify, "classify"}, {HeadKind::Regress, "regress"}}};
constexpr std::array<std::pair<MaskMode, const char*>, 2> kMaskMode{{{MaskMode::Zero, "zero"}, {MaskMode::Token, "token"}}};
constexpr std::array<std::pair<NodeCriterion, const char*>, 2> kNodeCrit{{{NodeCriterion::Sce, "sce"}, {NodeCriterion::Mse, "mse"}}};
constexpr std::array<std::pair<EdgeCriterion, const char*>, 2> kEdgeCrit{{{EdgeCriterion::Bce, "bce"}, {EdgeCriterion::Mse, "mse"}}};
constexpr std::array<std::pair<NodeLossScope, const char*>, 2> kScope{{{NodeLossScope::Masked, "masked"}, {NodeLossScope::All, "all"}}};
constexpr std::array<std::pair<Schedule, const char*>, 2> kSchedule{{{Schedule::Cosine, "cosine"}, {Schedule::OneCycle, "onecycle"}}};
constexpr std::array<std::pair<Resample, const char*>, 2> kResample{{{Resample::Epoch, "epoch"}, {Resample::Batch, "batch"}}};

struct Option {
  std::string key;
  std::function<json(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

template <class Field>
Option make_option(std::string key, Field field) {
  Option o;
  o.key = key;
  o.get = [field](const RunConfig& c) -> json {
    const auto& v = field(const_cast<RunConfig&>(c));
    return json(v);
  };
  o.set = [field, key](RunConfig& c, std::string_view s) {
    auto& v = field(c);
    using T = std::remove_reference_t<decltype(v)>;
    if constexpr (std::is_same_v<T, bool>)
      v = parse_bool(key, s);
    else
      v = parse_number<T>(key, s);
  };
  return o;
}

template <class Field, class E, std::size_t M>
Option make_enum_option(std::string key, Field field, const std::array<std::pair<E, const char*>, M>& names) {
  Option o;
  o.key = key;
  o.get = [field, &names](const RunConfig& c) -> json { return json(enum_name(field(const_cast<RunConfig&>(c)), names)); };
  o.set = [field, key, &names](RunConfig& c, std::string_view s) { field(c) = parse_enum(key, s, names); };
  return o;
}

#define STMAE_FIELD(expr) [](RunConfig& c) -> auto& { return c.expr; }

const std::vector<Option>& options() {
  static const std::vector<Option> table = [] {
    std::vector<Option> t;
    t.push_back(make_option("model.D", STMAE_FIELD(model.D)));
    t.push_back(make_option("model.n_layers", STMAE_FIELD(model.n_layers)));
    t.push_back(make_option("model.gin_eps_learnable", STMAE_FIELD(model.gin_eps_learnable)));
    t.push_back(make_enum_option("model.activation", STMAE_FIELD(model.activation), kActivation));
    t.push_back(make_enum_option("model.gin_norm", STMAE_FIELD(model.gin_norm), kNorm));
    t.push_back(make_enum_option("model.time_encoder", STMAE_FIELD(model.time_encoder), kTimeEnc));
    t.push_back(make_option("model.max_T", STMAE_FIELD(model.max_T)));
    t.push_back(make_option("model.sero_reduction", STMAE_FIELD(model.sero_reduction)));
    t.push_back(make_enum_option("model.head", STMAE_FIELD(model.head), kHead));

    t.push_back(make_option("mask.ratio_node", STMAE_FIELD(ssl.mask.ratio_node)));
    t.push_back(make_option("mask.ratio_edge", STMAE_FIELD(ssl.mask.ratio_edge)));
    t.push_back(make_option("mask.ratio_time", STMAE_FIELD(ssl.mask.ratio_time)));
    t.push_back(make_enum_option("mask.node_mode", STMAE_FIELD(ssl.mask.node_mode), kMaskMode));

    t.push_back(make_option("ssl.sce_gamma", STMAE_FIELD(ssl.sce_gamma)));
    t.push_back(make_enum_option("ssl.node_criterion", STMAE_FIELD(ssl.node_criterion), kNodeCrit));
    t.push_back(make_enum_option("ssl.edge_criterion", STMAE_FIELD(ssl.edge_criterion), kEdgeCrit));
    t.push_back(make_option("ssl.recon_node", STMAE_FIELD(ssl.recon_node)));
    t.push_back(make_option("ssl.recon_edge", STMAE_FIELD(ssl.recon_edge)));
    t.push_back(make_enum_option("ssl.node_loss_scope", STMAE_FIELD(ssl.node_loss_scope), kScope));
    t.push_back(make_option("ssl.mask_context", STMAE_FIELD(ssl.mask_context)));
    t.push_back(make_option("ssl.symmetric_context", STMAE_FIELD(ssl.symmetric_context)));
    t.push_back(make_option("ssl.allow_spatial_only", STMAE_FIELD(ssl.allow_spatial_only)));
    t.push_back(make_option("ssl.detach_target", STMAE_FIELD(ssl.detach_target)));

    t.push_back(make_option("train.lr", STMAE_FIELD(train.lr)));
    t.push_back(make_option("train.weight_decay", STMAE_FIELD(train.weight_decay)));
    t.push_back(make_option("train.decoupled_weight_decay", STMAE_FIELD(train.decoupled_weight_decay)));
    t.push_back(make_option("train.beta1", STMAE_FIELD(train.beta1)));
    t.push_back(make_option("train.beta2", STMAE_FIELD(train.beta2)));
    t.push_back(make_option("train.adam_eps", STMAE_FIELD(train.adam_eps)));
    t.push_back(make_option("train.batch_size", STMAE_FIELD(train.batch_size)));
    t.push_back(make_option("train.pretrain_epochs", STMAE_FIELD(train.pretrain_epochs)));
    t.push_back(make_option("train.finetune_epochs", STMAE_FIELD(train.finetune_epochs)));
    t.push_back(make_enum_option("train.schedule", STMAE_FIELD(train.schedule), kSchedule));
    t.push_back(make_option("train.onecycle_peak", STMAE_FIELD(train.onecycle_peak)));
    t.push_back(make_option("train.onecycle_floor", STMAE_FIELD(train.onecycle_floor)));
    t.push_back(make_option("train.onecycle_warm_frac", STMAE_FIELD(train.onecycle_warm_frac)));
    t.push_back(make_option("train.seed", STMAE_FIELD(train.seed)));
    t.push_back(make_option("train.segment_length", STMAE_FIELD(train.segment_length)));
    t.push_back(make_enum_option("train.resample", STMAE_FIELD(train.resample), kResample));
    t.push_back(make_option("train.folds", STMAE_FIELD(train.folds)));
    t.push_back(make_option("train.label_fraction", STMAE_FIELD(train.label_fraction)));
    t.push_back(make_option("train.ssl_fraction", STMAE_FIELD(train.ssl_fraction)));
    t.push_back(make_option("train.freeze_encoder", STMAE_FIELD(train.freeze_encoder)));

    t.push_back(make_option("graph.window", STMAE_FIELD(graph.window)));
    t.push_back(make_option("graph.stride", STMAE_FIELD(graph.stride)));
    t.push_back(make_option("graph.frac", STMAE_FIELD(graph.frac)));
    return t;
  }();
  return table;
}

#undef STMAE_FIELD

const Option& find_option(std::string_view key) {
  for (const auto& o : options())
    if (o.key == key) return o;
  throw ConfigError("unknown option '" + std::string(key) + "'");
}

std::string json_to_text(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_float()) return fmt_double(v.get<double>());
  return v.dump();
}

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void set_option(RunConfig& cfg, std::string_view key, std::string_view value) {
  find_option(key).set(cfg, trim(value));
}

std::string get_option(const RunConfig& cfg, std::string_view key) { return json_to_text(find_option(key).get(cfg)); }

const std::vector<std::string>& option_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& o : options()) k.push_back(o.key);
    return k;
  }();
  return keys;
}

void load_config_text(RunConfig& cfg, std::string_view text) {
  std::size_t lineno = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    set_option(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void load_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  load_config_text(cfg, ss.str());
}

std::string to_config_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& o : options()) out += o.key + " = " + json_to_text(o.get(cfg)) + "\n";
  return out;
}

nlohmann::ordered_json to_json(const RunConfig& cfg) {
  json j = json::object();
  for (const auto& o : options()) j[o.key] = o.get(cfg);
  j["model.N"] = cfg.model.N;
  return j;
}

RunConfig from_json(const nlohmann::json& j) {
  RunConfig cfg;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() == "model.N") {
      cfg.model.N = it.value().get<int>();
      continue;
    }
    const auto& v = it.value();
    std::string text;
    if (v.is_string())
      text = v.get<std::string>();
    else if (v.is_boolean())
      text = v.get<bool>() ? "true" : "false";
    else if (v.is_number_float())
      text = fmt_double(v.get<double>());
    else
      text = v.dump();
    set_option(cfg, it.key(), text);
  }
  return cfg;
}

void apply_preset(RunConfig& cfg, std::string_view name) {
  if (name == "ukb-like") {
    cfg.graph.window = 50;
    cfg.graph.stride = 16;
  } else if (name == "clinical-like") {
    cfg.graph.window = 16;
    cfg.graph.stride = 3;
  } else {
    throw ConfigError("unknown preset '" + std::string(name) + "' (expected ukb-like or clinical-like)");
  }
}

std::vector<std::string> diff_keys(const RunConfig& a, const RunConfig& b) {
  std::vector<std::string> out;
  for (const auto& o : options())
    if (o.get(a) != o.get(b)) out.push_back(o.key);
  return out;
}

}  // namespace stmae
