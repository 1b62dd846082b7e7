// SPDX-License-Identifier: Apache-2.0
#include "stmae/ingest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

namespace stmae {

namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

}  // namespace

RoiTimeSeries load_timeseries(const fs::path& path) {
  const std::string text = read_file(path);
  std::vector<std::string_view> lines = split(text, '\n');
  while (!lines.empty() && lines.back().empty()) lines.pop_back();

  std::vector<std::vector<double>> rows;
  rows.reserve(lines.size());
  for (std::size_t r = 0; r < lines.size(); ++r) {
    std::string_view line = lines[r];
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    const auto cells = split(line, ',');
    std::vector<double> row(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto cell = cells[c];
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc() || ptr != cell.data() + cell.size() || cell.empty() || !std::isfinite(v)) {
        throw FormatError(path.string() + ": parse error at row " + std::to_string(r + 1) + ", column " +
                          std::to_string(c + 1) + ": '" + std::string(cell) + "' is not a finite number");
      }
      row[c] = v;
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw FormatError(path.string() + ": ragged row " + std::to_string(r + 1) + " has " +
                        std::to_string(row.size()) + " columns, expected " +
                        std::to_string(rows.front().size()));
    }
    rows.push_back(std::move(row));
  }
  if (rows.size() < 2 || rows.front().size() < 2) {
    throw FormatError(path.string() + ": need at least 2 ROIs and 2 timepoints");
  }

  RoiTimeSeries ts;
  ts.subject_id = path.stem().string();
  ts.P.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c) ts.P(r, c) = rows[r][c];
  return ts;
}

std::string format_timeseries(const Mat& P) {
  std::string out;
  out.reserve(static_cast<std::size_t>(P.size()) * 12);
  char buf[64];
  for (Eigen::Index r = 0; r < P.rows(); ++r) {
    for (Eigen::Index c = 0; c < P.cols(); ++c) {
      if (c) out.push_back(',');
      const auto res = std::to_chars(buf, buf + sizeof buf, P(r, c));
      out.append(buf, res.ptr);
    }
    out.push_back('\n');
  }
  return out;
}

void save_timeseries(const fs::path& path, const RoiTimeSeries& ts) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << format_timeseries(ts.P);
}

fs::path DatasetManifest::resolve(const ManifestEntry& e) const {
  const fs::path p(e.path);
  return p.is_absolute() ? p : base_dir / p;
}

DatasetManifest load_manifest(const fs::path& path) {
  DatasetManifest m;
  m.base_dir = path.parent_path();
  const std::string text = read_file(path);
  std::set<std::string> seen;
  std::size_t lineno = 0;
  for (auto line : split(text, '\n')) {
    ++lineno;
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(path.string() + ": line " + std::to_string(lineno) + ": " + ex.what());
    }
    if (!j.contains("subject_id") || !j.contains("path"))
      throw FormatError(path.string() + ": line " + std::to_string(lineno) + ": missing subject_id or path");
    ManifestEntry e;
    e.subject_id = j.at("subject_id").get<std::string>();
    e.path = j.at("path").get<std::string>();
    if (j.contains("labels")) {
      const auto& lab = j.at("labels");
      if (lab.contains("class")) {
        const int c = lab.at("class").get<int>();
        if (c != 0 && c != 1) throw FormatError(e.subject_id + ": class label must be 0 or 1");
        e.labels.cls = c;
      }
      if (lab.contains("target")) e.labels.target = lab.at("target").get<double>();
    }
    if (!seen.insert(e.subject_id).second) throw FormatError("duplicate subject_id " + e.subject_id);
    m.entries.push_back(std::move(e));
  }
  return m;
}

void save_manifest(const fs::path& path, const DatasetManifest& manifest) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  for (const auto& e : manifest.entries) {
    nlohmann::ordered_json j;
    j["subject_id"] = e.subject_id;
    j["path"] = e.path;
    nlohmann::ordered_json labels = nlohmann::ordered_json::object();
    if (e.labels.cls) labels["class"] = *e.labels.cls;
    if (e.labels.target) labels["target"] = *e.labels.target;
    j["labels"] = labels;
    out << j.dump() << '\n';
  }
}

std::vector<Subject> load_dataset(const DatasetManifest& manifest) {
  std::vector<Subject> out;
  out.reserve(manifest.entries.size());
  for (const auto& e : manifest.entries) {
    const fs::path p = manifest.resolve(e);
    if (!fs::exists(p)) throw FormatError("subject " + e.subject_id + ": missing file " + p.string());
    Subject s{load_timeseries(p), e.labels};
    s.ts.subject_id = e.subject_id;
    if (!out.empty() && s.ts.n_rois() != out.front().ts.n_rois())
      throw FormatError("subject " + e.subject_id + " has " + std::to_string(s.ts.n_rois()) +
                        " ROIs, expected " + std::to_string(out.front().ts.n_rois()));
    out.push_back(std::move(s));
  }
  if (out.empty()) throw FormatError("manifest lists no subjects");
  return out;
}

std::vector<Subject> synth_subjects(int n_subjects, int n_rois, int n_timepoints, std::uint64_t seed,
                                    const SynthSpec& spec) {
  if (n_subjects < 2) throw ConfigError("synth: need at least 2 subjects");
  if (n_rois < 4) throw ConfigError("synth: need at least 4 ROIs");
  if (n_timepoints < 2 * spec.window)
    throw ConfigError("synth: need at least " + std::to_string(2 * spec.window) + " timepoints");
  if (spec.communities < 1 || spec.communities > n_rois)
    throw ConfigError("synth: community count must be in [1, n_rois]");
  if (spec.smooth_width < 1) throw ConfigError("synth: smooth_width must be >= 1");

  // Balanced classes, shuffled once from a dedicated stream.
  std::vector<int> classes(static_cast<std::size_t>(n_subjects));
  for (int i = 0; i < n_subjects; ++i) classes[static_cast<std::size_t>(i)] = i % 2;
  Rng class_rng = derive_rng(seed, {0xC1A55ull});
  std::shuffle(classes.begin(), classes.end(), class_rng);

  const int C = spec.communities;
  const int W = spec.smooth_width;
  std::vector<Subject> out;
  out.reserve(static_cast<std::size_t>(n_subjects));
  for (int s = 0; s < n_subjects; ++s) {
    Rng rng = derive_rng(seed, {static_cast<std::uint64_t>(s)});
    const int y = classes[static_cast<std::size_t>(s)];
    const double target = uniform01(rng);
    const double coupling = spec.contrast * y + spec.target_coupling * target;

    Mat latent(C, n_timepoints);
    for (int c = 0; c < C; ++c) {
      std::vector<double> raw(static_cast<std::size_t>(n_timepoints + W - 1));
      for (auto& v : raw) v = standard_normal(rng);
      for (int t = 0; t < n_timepoints; ++t) {
        double acc = 0.0;
        for (int w = 0; w < W; ++w) acc += raw[static_cast<std::size_t>(t + w)];
        latent(c, t) = acc / W;
      }
    }

    Subject subj;
    char id[32];
    std::snprintf(id, sizeof id, "sub-%04d", s);
    subj.ts.subject_id = id;
    subj.ts.P.resize(n_rois, n_timepoints);
    for (int i = 0; i < n_rois; ++i) {
      const int c = static_cast<int>(static_cast<long>(i) * C / n_rois);
      const int c_next = (c + 1) % C;
      for (int t = 0; t < n_timepoints; ++t)
        subj.ts.P(i, t) = latent(c, t) + coupling * latent(c_next, t) + spec.noise * standard_normal(rng);
    }
    subj.labels.cls = y;
    subj.labels.target = target;
    out.push_back(std::move(subj));
  }
  return out;
}

DatasetManifest synth_dataset(int n_subjects, int n_rois, int n_timepoints, std::uint64_t seed,
                              const SynthSpec& spec, const fs::path& out_dir) {
  auto subjects = synth_subjects(n_subjects, n_rois, n_timepoints, seed, spec);
  fs::create_directories(out_dir);
  DatasetManifest m;
  m.base_dir = out_dir;
  for (const auto& s : subjects) {
    const std::string file = s.ts.subject_id + ".csv";
    save_timeseries(out_dir / file, s.ts);
    m.entries.push_back({s.ts.subject_id, file, s.labels});
  }
  save_manifest(out_dir / "manifest.jsonl", m);
  return m;
}

std::vector<std::string> FoldSplit::fold_members(int fold) const {
  std::vector<std::string> out;
  for (const auto& [id, f] : assignments)
    if (f == fold) out.push_back(id);
  return out;
}

FoldSplit split_folds(const std::vector<std::string>& subject_ids,
                      const std::vector<std::optional<int>>& classes, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("split_folds: k must be >= 2");
  if (static_cast<std::size_t>(k) > subject_ids.size())
    throw ConfigError("split_folds: k = " + std::to_string(k) + " exceeds subject count " +
                      std::to_string(subject_ids.size()));
  if (classes.size() != subject_ids.size()) throw ConfigError("split_folds: label/id length mismatch");

  const bool stratify = std::all_of(classes.begin(), classes.end(), [](const auto& c) { return c.has_value(); });
  std::map<int, std::vector<std::size_t>> strata;
  for (std::size_t i = 0; i < subject_ids.size(); ++i) strata[stratify ? *classes[i] : 0].push_back(i);

  Rng rng = derive_rng(seed, {0xF01Dull});
  FoldSplit split;
  split.k = k;
  // Dealing round-robin with a counter carried across strata keeps both the
  // fold sizes and the per-fold class counts within one of each other.
  int next = 0;
  for (auto& [cls, members] : strata) {
    std::shuffle(members.begin(), members.end(), rng);
    for (auto idx : members) {
      if (!split.assignments.emplace(subject_ids[idx], next).second)
        throw ConfigError("split_folds: duplicate subject id " + subject_ids[idx]);
      next = (next + 1) % k;
    }
  }
  return split;
}

FoldSplit split_folds(const DatasetManifest& manifest, int k, std::uint64_t seed) {
  std::vector<std::string> ids;
  std::vector<std::optional<int>> classes;
  for (const auto& e : manifest.entries) {
    ids.push_back(e.subject_id);
    classes.push_back(e.labels.cls);
  }
  return split_folds(ids, classes, k, seed);
}

Segment sample_segment(const RoiTimeSeries& ts, int length, Rng& rng) {
  if (length < 1) throw ConfigError("sample_segment: length must be positive");
  if (length > ts.n_timepoints())
    throw ConfigError("sample_segment: segment length " + std::to_string(length) + " exceeds " +
                      std::to_string(ts.n_timepoints()) + " timepoints of subject " + ts.subject_id +
                      "; pad the series or skip the subject");
  const int offset = uniform_int(rng, 0, ts.n_timepoints() - length);
  Segment seg;
  seg.offset = offset;
  seg.ts.subject_id = ts.subject_id;
  seg.ts.P = ts.P.middleCols(offset, length);
  return seg;
}

}  // namespace stmae
