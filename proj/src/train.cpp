// SPDX-License-Identifier: Apache-2.0
#include "stmae/train.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "stmae/dynfc.hpp"
#include "stmae/ssl.hpp"

namespace stmae {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

using json = nlohmann::json;

// ---------------------------------------------------------------- schedules

double cosine_lr(long step, long total, double base) {
  if (total <= 0) throw ConfigError("cosine schedule needs total steps > 0");
  const double frac = std::clamp(static_cast<double>(step) / static_cast<double>(total), 0.0, 1.0);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

double onecycle_lr(long step, long total, const TrainConfig& cfg) {
  if (total <= 0) throw ConfigError("one-cycle schedule needs total steps > 0");
  const double peak = cfg.onecycle_peak, floor = cfg.onecycle_floor, start = cfg.lr;
  const long warm = static_cast<long>(std::llround(cfg.onecycle_warm_frac * static_cast<double>(total)));
  step = std::clamp(step, 0L, total);
  if (step < warm) {
    const double f = static_cast<double>(step) / static_cast<double>(warm);
    return peak - (peak - start) * (1.0 - f);
  }
  if (total == warm) return peak;
  const double f = static_cast<double>(step - warm) / static_cast<double>(total - warm);
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * f));
}

// ---------------------------------------------------------------- optimiser

AdamState make_adam_state(const ParamStore& params) {
  AdamState s;
  s.m = params.zeros_like();
  s.v = params.zeros_like();
  return s;
}

void adam_update(ParamStore& params, const Grads& grads, AdamState& state, double lr, const TrainConfig& cfg,
                 const std::vector<bool>* frozen) {
  if (grads.size() != params.size()) throw ConfigError("adam: gradient count does not match parameters");
  if (state.m.size() != params.size()) state = make_adam_state(params);
  ++state.step;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (frozen && (*frozen)[i]) continue;
    Mat& p = params.value(static_cast<int>(i));
    Mat g = grads[i];
    if (!cfg.decoupled_weight_decay) g += cfg.weight_decay * p;
    state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
    state.v[i] = b2 * state.v[i] + (1.0 - b2) * g.cwiseProduct(g);
    const Mat update = (state.m[i] / c1).array() / ((state.v[i] / c2).array().sqrt() + cfg.adam_eps);
    if (cfg.decoupled_weight_decay) p -= lr * cfg.weight_decay * p;
    p -= lr * update;
  }
}

// ---------------------------------------------------------------- checkpoint

namespace {

constexpr char kMagic[8] = {'S', 'T', 'M', 'A', 'E', 'C', 'K', 'P'};

void write_mat(std::ostream& os, const Mat& m) {
  // Row-major order on disk.
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const double v = m(r, c);
      os.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
}

void read_mat(std::istream& is, Mat& m, const std::string& what) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      double v;
      if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError("checkpoint truncated in " + what);
      m(r, c) = v;
    }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const ParamStore& p = ckpt.model.params();
  const bool has_opt = ckpt.optimizer.m.size() == p.size() && ckpt.optimizer.v.size() == p.size();
  json header;
  header["config"] = to_json(ckpt.config);
  header["epoch"] = ckpt.epoch;
  header["global_step"] = ckpt.global_step;
  header["adam_step"] = ckpt.optimizer.step;
  header["has_optimizer"] = has_opt;
  // Every stream is derived from (seed, epoch, ...), so this pair is the full RNG state.
  header["rng"] = {{"scheme", "derive_rng/mt19937_64"}, {"seed", ckpt.config.train.seed}, {"next_epoch", ckpt.epoch}};
  json dir = json::array();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Mat& m = p.value(static_cast<int>(i));
    dir.push_back({{"name", p.name(static_cast<int>(i))}, {"rows", m.rows()}, {"cols", m.cols()}});
  }
  header["tensors"] = dir;
  const std::string text = header.dump();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw ConfigError("cannot write checkpoint " + path.string());
    os.write(kMagic, sizeof kMagic);
    const std::uint32_t version = Checkpoint::kFormatVersion;
    os.write(reinterpret_cast<const char*>(&version), sizeof version);
    const std::uint64_t len = text.size();
    os.write(reinterpret_cast<const char*>(&len), sizeof len);
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (std::size_t i = 0; i < p.size(); ++i) write_mat(os, p.value(static_cast<int>(i)));
    if (has_opt) {
      for (const auto& m : ckpt.optimizer.m) write_mat(os, m);
      for (const auto& v : ckpt.optimizer.v) write_mat(os, v);
    }
    if (!os) throw ConfigError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw FormatError(path.string() + " is not a checkpoint (bad magic)");
  std::uint32_t version = 0;
  is.read(reinterpret_cast<char*>(&version), sizeof version);
  if (version != Checkpoint::kFormatVersion)
    throw FormatError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(Checkpoint::kFormatVersion) + ")");
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!is || len > (1ull << 30)) throw FormatError("checkpoint header is corrupt");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw FormatError("checkpoint header truncated");
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }

  Checkpoint ck;
  ck.config = from_json(header.at("config"));
  ck.epoch = header.at("epoch").get<int>();
  ck.global_step = header.at("global_step").get<long>();
  ck.model = Model(ck.config.model, ck.config.train.seed);
  ParamStore& p = ck.model.params();
  const auto& dir = header.at("tensors");
  if (dir.size() != p.size()) throw FormatError("checkpoint tensor count does not match its configuration");
  for (std::size_t i = 0; i < dir.size(); ++i) {
    const std::string name = dir[i].at("name").get<std::string>();
    if (p.name(static_cast<int>(i)) != name) throw FormatError("checkpoint tensor order mismatch at " + name);
    Mat& m = p.value(static_cast<int>(i));
    if (dir[i].at("rows").get<long>() != m.rows() || dir[i].at("cols").get<long>() != m.cols())
      throw FormatError("checkpoint tensor " + name + " has an unexpected shape");
    read_mat(is, m, name);
  }
  if (header.value("has_optimizer", false)) {
    ck.optimizer = make_adam_state(p);
    ck.optimizer.step = header.at("adam_step").get<long>();
    for (auto& m : ck.optimizer.m) read_mat(is, m, "adam.m");
    for (auto& v : ck.optimizer.v) read_mat(is, v, "adam.v");
  }
  return ck;
}

// ---------------------------------------------------------------- threading

int worker_count() {
  if (const char* env = std::getenv("STMAE_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(int n, const std::function<void(int)>& fn) {
  const int workers = std::min(worker_count(), n);
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(std::max(n, 0)));
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  auto body = [&] {
    for (int i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(i)] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) pool.emplace_back(body);
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------- pre-training

namespace {

int common_roi_count(std::span<const Subject> subjects) {
  if (subjects.empty()) throw ConfigError("no subjects given");
  const int N = subjects.front().ts.n_rois();
  for (const auto& s : subjects)
    if (s.ts.n_rois() != N)
      throw ConfigError("subject " + s.ts.subject_id + " has " + std::to_string(s.ts.n_rois()) + " ROIs, expected " +
                        std::to_string(N));
  return N;
}

DynamicGraph subject_graph(const RoiTimeSeries& ts, const RunConfig& cfg, Rng* seg_rng) {
  if (cfg.train.segment_length > 0 && seg_rng) {
    const Segment seg = sample_segment(ts, cfg.train.segment_length, *seg_rng);
    return build_dynamic_graph(seg.ts, cfg.graph.window, cfg.graph.stride, cfg.graph.frac);
  }
  return build_dynamic_graph(ts, cfg.graph.window, cfg.graph.stride, cfg.graph.frac);
}

void add_into(Grads& acc, const Grads& g) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

bool finite(const LossBreakdown& l) { return std::isfinite(l.l_total); }

}  // namespace

std::string loss_log_header() { return "epoch,step,l_sp_node,l_sp_edge,l_tp_node,l_tp_edge,l_total,lr"; }

std::string format_log_row(const PretrainLogRow& r) {
  std::ostringstream os;
  os << std::setprecision(10) << r.epoch << ',' << r.step << ',' << r.l_sp_node << ',' << r.l_sp_edge << ','
     << r.l_tp_node << ',' << r.l_tp_edge << ',' << r.l_total << ',' << r.lr;
  return os.str();
}

PretrainResult pretrain(std::span<const Subject> subjects, const RunConfig& cfg_in, const PretrainOptions& opts) {
  RunConfig cfg = cfg_in;
  cfg.model.N = common_roi_count(subjects);
  cfg.validate();
  const auto& tc = cfg.train;

  // SSL subset.
  std::vector<int> pool(subjects.size());
  std::iota(pool.begin(), pool.end(), 0);
  if (tc.ssl_fraction < 1.0) {
    Rng rng = derive_rng(tc.seed, {0x55ull});
    std::shuffle(pool.begin(), pool.end(), rng);
    const auto keep = static_cast<std::size_t>(
        std::max(1L, std::lround(tc.ssl_fraction * static_cast<double>(subjects.size()))));
    pool.resize(std::min(keep, pool.size()));
    std::sort(pool.begin(), pool.end());
  }

  for (int i : pool) {
    const auto& ts = subjects[static_cast<std::size_t>(i)].ts;
    const int len = tc.segment_length > 0 ? tc.segment_length : ts.n_timepoints();
    if (len > ts.n_timepoints())
      throw ConfigError("subject " + ts.subject_id + " has " + std::to_string(ts.n_timepoints()) +
                        " timepoints, shorter than segment_length " + std::to_string(len));
    const int T = snapshot_count(len, cfg.graph.window, cfg.graph.stride);
    if (T < 3 && !cfg.ssl.allow_spatial_only)
      throw ConfigError("subject " + ts.subject_id + " yields T = " + std::to_string(T) +
                        " snapshots; the temporal objective needs T >= 3 (lower graph.window/graph.stride or set "
                        "ssl.allow_spatial_only = true)");
  }

  PretrainResult res;
  for (int i : pool) res.ssl_subjects.push_back(subjects[static_cast<std::size_t>(i)].ts.subject_id);
  Checkpoint& ck = res.checkpoint;
  ck.config = cfg;
  ck.model = Model(cfg.model, tc.seed);
  ck.optimizer = make_adam_state(ck.model.params());
  Model& model = ck.model;

  const int n = static_cast<int>(pool.size());
  const int bs = std::min(tc.batch_size, n);
  const long batches = (n + bs - 1) / bs;
  const long total = static_cast<long>(tc.pretrain_epochs) * batches;

  std::ofstream log;
  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    log.open(opts.out_dir / "loss.csv");
    if (!log) throw ConfigError("cannot write " + (opts.out_dir / "loss.csv").string());
    log << loss_log_header() << '\n';
  }

  std::vector<DynamicGraph> graphs(static_cast<std::size_t>(n));
  for (int epoch = 0; epoch < tc.pretrain_epochs; ++epoch) {
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    {
      Rng rng = derive_rng(tc.seed, {1, static_cast<std::uint64_t>(epoch)});
      std::shuffle(order.begin(), order.end(), rng);
    }
    if (tc.resample == Resample::Epoch)
      parallel_for(n, [&](int k) {
        Rng rng = derive_rng(tc.seed, {2, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(k)});
        graphs[static_cast<std::size_t>(k)] = subject_graph(subjects[static_cast<std::size_t>(pool[k])].ts, cfg, &rng);
      });

    double epoch_sum = 0.0;
    for (long b = 0; b < batches; ++b) {
      const int lo = static_cast<int>(b) * bs, hi = std::min(n, lo + bs);
      const int m = hi - lo;
      std::vector<Grads> grads(static_cast<std::size_t>(m));
      std::vector<LossBreakdown> losses(static_cast<std::size_t>(m));
      parallel_for(m, [&](int j) {
        const int k = order[static_cast<std::size_t>(lo + j)];
        const auto ek = static_cast<std::uint64_t>(epoch), kk = static_cast<std::uint64_t>(k);
        if (tc.resample == Resample::Batch) {
          Rng rng = derive_rng(tc.seed, {3, ek, kk});
          graphs[static_cast<std::size_t>(k)] = subject_graph(subjects[static_cast<std::size_t>(pool[k])].ts, cfg, &rng);
        }
        Rng rng = derive_rng(tc.seed, {4, ek, kk});
        grads[static_cast<std::size_t>(j)] = model.params().zeros_like();
        losses[static_cast<std::size_t>(j)] =
            stmae_step(model, graphs[static_cast<std::size_t>(k)], cfg.ssl, rng, &grads[static_cast<std::size_t>(j)]);
      });

      PretrainLogRow row;
      row.epoch = epoch;
      row.step = ck.global_step;
      Grads sum = model.params().zeros_like();
      for (int j = 0; j < m; ++j) {
        const auto& l = losses[static_cast<std::size_t>(j)];
        if (!finite(l)) {
          json dump;
          dump["epoch"] = epoch;
          dump["step"] = ck.global_step;
          dump["subjects"] = json::array();
          for (int q = 0; q < m; ++q)
            dump["subjects"].push_back(
                subjects[static_cast<std::size_t>(pool[order[static_cast<std::size_t>(lo + q)]])].ts.subject_id);
          std::string where;
          if (!opts.out_dir.empty()) {
            std::ofstream(opts.out_dir / "nan_batch.json") << dump.dump(2) << '\n';
            where = "; batch written to " + (opts.out_dir / "nan_batch.json").string();
          }
          throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(ck.global_step) + where + "; batch: " + dump["subjects"].dump());
        }
        row.l_sp_node += l.l_sp_node / m;
        row.l_sp_edge += l.l_sp_edge / m;
        row.l_tp_node += l.l_tp_node / m;
        row.l_tp_edge += l.l_tp_edge / m;
        row.l_total += l.l_total / m;
        add_into(sum, grads[static_cast<std::size_t>(j)]);
      }
      for (auto& g : sum) g /= static_cast<double>(m);

      row.lr = tc.schedule == Schedule::Cosine ? cosine_lr(ck.global_step, total, tc.lr)
                                               : onecycle_lr(ck.global_step, total, tc);
      adam_update(model.params(), sum, ck.optimizer, row.lr, tc);
      if (!model.params().all_finite())
        throw NumericError("parameters became non-finite at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(ck.global_step));
      ++ck.global_step;
      epoch_sum += row.l_total * m;
      res.log.push_back(row);
      if (log.is_open()) log << format_log_row(row) << '\n' << std::flush;
      if (opts.on_step) opts.on_step(row);
    }
    res.epoch_loss.push_back(epoch_sum / n);
    ck.epoch = epoch + 1;
    if (!opts.out_dir.empty()) save_checkpoint(opts.out_dir / "checkpoint.bin", ck);
  }
  return res;
}

// ---------------------------------------------------------------- fine-tuning

namespace {

double label_value(const Subject& s, HeadKind task) {
  return task == HeadKind::Classify ? static_cast<double>(*s.labels.cls) : *s.labels.target;
}

std::vector<int> label_subset(std::span<const Subject> subjects, const std::vector<int>& train, HeadKind task,
                              double frac, Rng& rng) {
  if (frac >= 1.0) return train;
  std::vector<std::vector<int>> strata;
  if (task == HeadKind::Classify) {
    strata.resize(2);
    for (int i : train) strata[static_cast<std::size_t>(*subjects[static_cast<std::size_t>(i)].labels.cls)].push_back(i);
  } else {
    strata.push_back(train);
  }
  std::vector<int> out;
  for (auto& s : strata) {
    if (s.empty()) continue;
    std::shuffle(s.begin(), s.end(), rng);
    const auto keep = static_cast<std::size_t>(std::max(1L, std::lround(frac * static_cast<double>(s.size()))));
    out.insert(out.end(), s.begin(), s.begin() + static_cast<std::ptrdiff_t>(std::min(keep, s.size())));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

FinetuneResult finetune(std::span<const Subject> subjects, const Model* pretrained, HeadKind task,
                        const FoldSplit& split, const RunConfig& cfg_in, const FinetuneOptions& opts) {
  RunConfig cfg = cfg_in;
  cfg.model.N = common_roi_count(subjects);
  cfg.model.head = task;
  cfg.validate();
  const auto& tc = cfg.train;

  std::vector<std::string> missing;
  for (const auto& s : subjects) {
    const bool ok = task == HeadKind::Classify ? s.labels.cls.has_value() : s.labels.target.has_value();
    if (!ok) missing.push_back(s.ts.subject_id);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& id : missing) list += (list.empty() ? "" : ", ") + id;
    throw ConfigError(std::string("missing ") + (task == HeadKind::Classify ? "class" : "target") +
                      " labels for subjects: " + list);
  }
  std::vector<int> fold_of(subjects.size());
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    const auto it = split.assignments.find(subjects[i].ts.subject_id);
    if (it == split.assignments.end()) throw ConfigError("subject " + subjects[i].ts.subject_id + " has no fold");
    fold_of[i] = it->second;
  }
  if (pretrained) {
    const auto& pc = pretrained->config();
    if (pc.N != cfg.model.N || pc.D != cfg.model.D || pc.n_layers != cfg.model.n_layers ||
        pc.time_encoder != cfg.model.time_encoder)
      throw ConfigError("pretrained encoder shape (N=" + std::to_string(pc.N) + ", D=" + std::to_string(pc.D) +
                        ", layers=" + std::to_string(pc.n_layers) + ") does not match the fine-tuning model");
  }

  // Held-out graphs are built once from the full series.
  std::vector<DynamicGraph> full(subjects.size());
  parallel_for(static_cast<int>(subjects.size()), [&](int i) {
    full[static_cast<std::size_t>(i)] = subject_graph(subjects[static_cast<std::size_t>(i)].ts, cfg, nullptr);
  });

  FinetuneResult res;
  for (int f = 0; f < split.k; ++f) {
    std::vector<int> train_all, test;
    for (std::size_t i = 0; i < subjects.size(); ++i) (fold_of[i] == f ? test : train_all).push_back(static_cast<int>(i));
    if (test.empty()) throw ConfigError("fold " + std::to_string(f) + " is empty");
    Rng lrng = derive_rng(tc.seed, {0xF1, static_cast<std::uint64_t>(f)});
    const std::vector<int> train = label_subset(subjects, train_all, task, tc.label_fraction, lrng);
    {
      std::set<int> tset(train.begin(), train.end());
      for (int i : test)
        if (tset.count(i)) throw Error(ErrorKind::Runtime, "split hygiene violated: subject " +
                                                               subjects[static_cast<std::size_t>(i)].ts.subject_id +
                                                               " is in both train and evaluation sets");
    }
    std::vector<std::string> ids;
    for (int i : train) ids.push_back(subjects[static_cast<std::size_t>(i)].ts.subject_id);
    res.train_sets.push_back(ids);

    Model model(cfg.model, tc.seed + 0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(f + 1));
    if (pretrained) model.load_encoder_from(*pretrained);
    std::vector<bool> frozen(model.params().size(), false);
    if (tc.freeze_encoder)
      for (std::size_t i = 0; i < frozen.size(); ++i) frozen[i] = is_encoder_param(model.params().name(static_cast<int>(i)));
    AdamState opt = make_adam_state(model.params());

    const int n = static_cast<int>(train.size());
    const int bs = std::min(tc.batch_size, n);
    const long batches = (n + bs - 1) / bs;
    const long total = static_cast<long>(tc.finetune_epochs) * batches;
    long step = 0;
    for (int epoch = 0; epoch < tc.finetune_epochs; ++epoch) {
      std::vector<int> order = train;
      Rng orng = derive_rng(tc.seed, {0xF2, static_cast<std::uint64_t>(f), static_cast<std::uint64_t>(epoch)});
      std::shuffle(order.begin(), order.end(), orng);
      double epoch_loss = 0.0;
      for (long b = 0; b < batches; ++b) {
        const int lo = static_cast<int>(b) * bs, hi = std::min(n, lo + bs);
        const int m = hi - lo;
        std::vector<Grads> grads(static_cast<std::size_t>(m));
        std::vector<double> losses(static_cast<std::size_t>(m));
        parallel_for(m, [&](int j) {
          const int i = order[static_cast<std::size_t>(lo + j)];
          const auto& s = subjects[static_cast<std::size_t>(i)];
          DynamicGraph seg_graph;
          const DynamicGraph* g = &full[static_cast<std::size_t>(i)];
          if (tc.segment_length > 0) {
            Rng srng = derive_rng(tc.seed, {0xF3, static_cast<std::uint64_t>(f), static_cast<std::uint64_t>(epoch),
                                            static_cast<std::uint64_t>(i)});
            seg_graph = subject_graph(s.ts, cfg, &srng);
            g = &seg_graph;
          }
          auto& gr = grads[static_cast<std::size_t>(j)];
          gr = model.params().zeros_like();
          ad::Tape tape;
          Forward fw(model, tape, &gr);
          const ad::Var out = fw.predict(*g);
          const double y = label_value(s, task);
          const ad::Var loss = task == HeadKind::Classify ? ad::bce_with_logit(out, y) : ad::squared_error(out, y);
          losses[static_cast<std::size_t>(j)] = loss.scalar();
          tape.backward(loss);
        });
        Grads sum = model.params().zeros_like();
        double batch_loss = 0.0;
        for (int j = 0; j < m; ++j) {
          if (!std::isfinite(losses[static_cast<std::size_t>(j)]))
            throw NumericError("non-finite fine-tuning loss in fold " + std::to_string(f) + ", epoch " +
                               std::to_string(epoch));
          add_into(sum, grads[static_cast<std::size_t>(j)]);
          batch_loss += losses[static_cast<std::size_t>(j)];
        }
        for (auto& g : sum) g /= static_cast<double>(m);
        adam_update(model.params(), sum, opt, onecycle_lr(step, total, tc), tc, &frozen);
        ++step;
        epoch_loss += batch_loss;
      }
      if (opts.on_epoch) opts.on_epoch(f, epoch, epoch_loss / n);
    }

    MetricReport rep;
    rep.task = task == HeadKind::Classify ? "classify" : "regress";
    rep.fold = f;
    rep.n = static_cast<int>(test.size());
    std::vector<double> scores(test.size()), values(test.size());
    std::vector<int> labels(test.size());
    for (std::size_t q = 0; q < test.size(); ++q) {
      const auto& s = subjects[static_cast<std::size_t>(test[q])];
      ad::Tape tape;
      Forward fw(model, tape);
      const double out = fw.predict(full[static_cast<std::size_t>(test[q])]).scalar();
      scores[q] = task == HeadKind::Classify ? 1.0 / (1.0 + std::exp(-out)) : out;
      values[q] = label_value(s, task);
      labels[q] = task == HeadKind::Classify ? *s.labels.cls : 0;
      res.predictions.push_back({s.ts.subject_id, f, scores[q], values[q]});
    }
    if (task == HeadKind::Classify) {
      const long pos = std::count(labels.begin(), labels.end(), 1);
      if (pos > 0 && pos < static_cast<long>(labels.size())) rep.auroc = auroc(scores, labels);
      rep.accuracy = accuracy_from_probs(scores, labels);
    } else {
      rep.mae = mae(scores, values);
    }
    res.folds.push_back(rep);
  }
  std::tie(res.mean, res.sd) = aggregate(res.folds);

  if (!opts.out_dir.empty()) {
    std::filesystem::create_directories(opts.out_dir);
    std::ofstream mcsv(opts.out_dir / "metrics.csv");
    mcsv << "fold,metric,value\n" << std::setprecision(10);
    auto emit = [&](const std::string& fold, const MetricReport& r) {
      if (r.auroc) mcsv << fold << ",auroc," << *r.auroc << '\n';
      if (r.accuracy) mcsv << fold << ",accuracy," << *r.accuracy << '\n';
      if (r.mae) mcsv << fold << ",mae," << *r.mae << '\n';
    };
    for (const auto& r : res.folds) emit(std::to_string(r.fold), r);
    emit("mean", res.mean);
    emit("std", res.sd);
    std::ofstream pcsv(opts.out_dir / "predictions.csv");
    pcsv << "subject_id,fold,score,label\n" << std::setprecision(10);
    for (const auto& p : res.predictions) pcsv << p.subject_id << ',' << p.fold << ',' << p.score << ',' << p.label << '\n';
  }
  return res;
}

// ---------------------------------------------------------------- gradient check

GradCheckReport grad_check(const RunConfig& cfg_in, std::uint64_t seed, const GradCheckOptions& opts) {
  RunConfig cfg = cfg_in;
  cfg.model.N = opts.n_rois;
  cfg.graph.window = 4;
  cfg.graph.stride = 2;
  // Finite differences see the path through the node targets, so check the undetached loss.
  cfg.ssl.detach_target = false;
  cfg.validate();
  const int t_max = cfg.graph.window + cfg.graph.stride * (opts.snapshots - 1);

  Rng drng = derive_rng(seed, {0xCC});
  RoiTimeSeries ts;
  ts.subject_id = "grad-check";
  ts.P.resize(opts.n_rois, t_max);
  for (Eigen::Index r = 0; r < ts.P.rows(); ++r)
    for (Eigen::Index c = 0; c < ts.P.cols(); ++c) ts.P(r, c) = standard_normal(drng);
  const DynamicGraph g = build_dynamic_graph(ts, cfg.graph.window, cfg.graph.stride, cfg.graph.frac);

  Model model(cfg.model, seed);
  // Move every tensor off its structured initial value (zero biases, eps = 0).
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    Mat& p = model.params().value(static_cast<int>(i));
    for (Eigen::Index k = 0; k < p.size(); ++k) p.data()[k] += 0.1 * (2.0 * uniform01(drng) - 1.0);
  }

  auto loss_at = [&](Grads* grads) {
    Rng rng = derive_rng(seed, {0xCD});
    return stmae_step(model, g, cfg.ssl, rng, grads).l_total;
  };
  Grads analytic = model.params().zeros_like();
  loss_at(&analytic);

  GradCheckReport rep;
  rep.tolerance = opts.tolerance;
  std::vector<std::string> group_order;
  std::map<std::string, std::vector<int>> members;
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    const std::string grp = param_group(model.params().name(static_cast<int>(i)));
    if (!members.count(grp)) group_order.push_back(grp);
    members[grp].push_back(static_cast<int>(i));
  }

  Rng pick = derive_rng(seed, {0xCE});
  for (const auto& grp : group_order) {
    // Enumerate every scalar in the group, then sample without replacement.
    std::vector<std::tuple<int, Eigen::Index, Eigen::Index>> scalars;
    for (int pi : members[grp]) {
      const Mat& p = model.params().value(pi);
      for (Eigen::Index r = 0; r < p.rows(); ++r)
        for (Eigen::Index c = 0; c < p.cols(); ++c) scalars.emplace_back(pi, r, c);
    }
    const int k = std::min<int>(opts.samples_per_group, static_cast<int>(scalars.size()));
    for (int i = 0; i < k; ++i)
      std::swap(scalars[static_cast<std::size_t>(i)],
                scalars[static_cast<std::size_t>(uniform_int(pick, i, static_cast<int>(scalars.size()) - 1))]);

    GradCheckGroup gr;
    gr.group = grp;
    for (int i = 0; i < k; ++i) {
      const auto [pi, r, c] = scalars[static_cast<std::size_t>(i)];
      double& x = model.params().value(pi)(r, c);
      const double x0 = x;
      x = x0 + opts.h;
      const double up = loss_at(nullptr);
      x = x0 - opts.h;
      const double dn = loss_at(nullptr);
      x = x0;
      GradCheckEntry e;
      e.name = model.params().name(pi);
      e.row = static_cast<int>(r);
      e.col = static_cast<int>(c);
      e.analytic = analytic[static_cast<std::size_t>(pi)](r, c);
      e.numeric = (up - dn) / (2.0 * opts.h);
      const double denom = std::max(std::abs(e.analytic), std::abs(e.numeric));
      if (denom < opts.zero_threshold) {
        e.zero = true;
        ++gr.zero_flagged;
      } else {
        e.rel_err = std::abs(e.analytic - e.numeric) / denom;
        gr.max_rel_err = std::max(gr.max_rel_err, e.rel_err);
      }
      ++gr.checked;
      rep.entries.push_back(e);
    }
    rep.max_rel_err = std::max(rep.max_rel_err, gr.max_rel_err);
    rep.groups.push_back(gr);
  }
  return rep;
}

}  // namespace stmae
