// SPDX-License-Identifier: Apache-2.0
#include "stmae/dynfc.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

namespace stmae {

Mat pearson_fc(const Mat& window, int* degenerate) {
  const Eigen::Index N = window.rows();
  const Eigen::Index W = window.cols();
  if (W < 2) throw ConfigError("pearson_fc: window needs at least 2 samples");

  Mat centered = window.colwise() - window.rowwise().mean();
  Vec norms = centered.rowwise().norm();
  int flat = 0;
  for (Eigen::Index i = 0; i < N; ++i) {
    if (norms(i) > 0.0) {
      centered.row(i) /= norms(i);
    } else {
      centered.row(i).setZero();
      ++flat;
    }
  }
  Mat C = centered * centered.transpose();
  for (Eigen::Index i = 0; i < N; ++i) {
    for (Eigen::Index j = i + 1; j < N; ++j) {
      const double v = std::clamp(C(i, j), -1.0, 1.0);
      C(i, j) = v;
      C(j, i) = v;
    }
    C(i, i) = 1.0;
  }
  if (degenerate) *degenerate = flat;
  return C;
}

Thresholded threshold_topk(const Mat& C, double frac) {
  if (!(frac > 0.0 && frac < 1.0)) throw ConfigError("threshold_topk: frac must lie in (0, 1)");
  if (C.rows() != C.cols()) throw ConfigError("threshold_topk: matrix must be square");
  const long N = C.rows();
  const long total = N * N;
  const long k = std::lround(frac * static_cast<double>(total));

  Thresholded out;
  out.A = Mat::Zero(N, N);
  if (k <= N) {
    out.empty = true;
    return out;
  }
  std::vector<long> order(static_cast<std::size_t>(total));
  std::iota(order.begin(), order.end(), 0L);
  // Row-major flat index, so ascending index == ascending (row, col).
  auto value = [&](long idx) { return C(idx / N, idx % N); };
  auto before = [&](long a, long b) {
    const double va = value(a), vb = value(b);
    if (va != vb) return va > vb;
    return a < b;
  };
  std::nth_element(order.begin(), order.begin() + (k - 1), order.end(), before);
  for (long n = 0; n < k; ++n) {
    const long idx = order[static_cast<std::size_t>(n)];
    const long i = idx / N, j = idx % N;
    if (i == j) continue;
    out.A(i, j) = 1.0;
    out.A(j, i) = 1.0;
  }
  out.empty = edge_count(out.A) == 0;
  return out;
}

int snapshot_count(int t_max, int window, int stride) {
  if (window < 2) throw ConfigError("window must be >= 2");
  if (stride < 1) throw ConfigError("stride must be >= 1");
  if (window > t_max)
    throw ConfigError("window " + std::to_string(window) + " exceeds series length " + std::to_string(t_max));
  return (t_max - window) / stride + 1;
}

DynamicGraph build_dynamic_graph(const RoiTimeSeries& ts, int window, int stride, double frac) {
  const int T = snapshot_count(ts.n_timepoints(), window, stride);
  DynamicGraph g;
  g.subject_id = ts.subject_id;
  g.window = window;
  g.stride = stride;
  g.frac = frac;
  g.N = ts.n_rois();
  g.snapshots.reserve(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    const Mat block = ts.P.middleCols(static_cast<Eigen::Index>(t) * stride, window);
    GraphSnapshot snap;
    snap.t = t + 1;
    int flat = 0;
    snap.C = pearson_fc(block, &flat);
    g.degenerate_rois += flat;
    auto th = threshold_topk(snap.C, frac);
    if (th.empty) ++g.empty_snapshots;
    snap.A = std::move(th.A);
    snap.mean = block.rowwise().mean();
    g.snapshots.push_back(std::move(snap));
  }
  return g;
}

long edge_count(const Mat& A) {
  long e = 0;
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = i + 1; j < A.cols(); ++j) e += A(i, j) != 0.0;
  return e;
}

std::pair<long, long> triangles_and_wedges(const Mat& A) {
  const Eigen::Index N = A.rows();
  // Adjacency as 64-bit neighbour sets; triangles via common-neighbour popcounts.
  const std::size_t words = (static_cast<std::size_t>(N) + 63) / 64;
  std::vector<std::uint64_t> bits(static_cast<std::size_t>(N) * words, 0);
  std::vector<long> degree(static_cast<std::size_t>(N), 0);
  for (Eigen::Index i = 0; i < N; ++i)
    for (Eigen::Index j = 0; j < N; ++j)
      if (i != j && A(i, j) != 0.0) {
        bits[static_cast<std::size_t>(i) * words + static_cast<std::size_t>(j) / 64] |= 1ull << (j % 64);
        ++degree[static_cast<std::size_t>(i)];
      }
  long closed = 0;  // each triangle counted once per edge (3x)
  for (Eigen::Index i = 0; i < N; ++i)
    for (Eigen::Index j = i + 1; j < N; ++j) {
      if (A(i, j) == 0.0) continue;
      const std::uint64_t* a = &bits[static_cast<std::size_t>(i) * words];
      const std::uint64_t* b = &bits[static_cast<std::size_t>(j) * words];
      for (std::size_t w = 0; w < words; ++w) closed += std::popcount(a[w] & b[w]);
    }
  long wedges = 0;
  for (long d : degree) wedges += d * (d - 1) / 2;
  return {closed / 3, wedges};
}

GraphStats graph_stats(std::span<const DynamicGraph> graphs) {
  if (graphs.empty()) throw ConfigError("graph_stats: no graphs given");
  GraphStats s;
  double nodes = 0.0, edges = 0.0;
  long triangles = 0, wedges = 0;
  for (const auto& g : graphs) {
    for (const auto& snap : g.snapshots) {
      ++s.n_graphs;
      nodes += static_cast<double>(snap.A.rows());
      edges += static_cast<double>(edge_count(snap.A));
      for (Eigen::Index i = 0; i < snap.A.rows(); ++i) {
        const int d = static_cast<int>((snap.A.row(i).array() != 0.0).count()) - (snap.A(i, i) != 0.0);
        s.d_max = std::max(s.d_max, d);
      }
      const auto [tri, wed] = triangles_and_wedges(snap.A);
      if (wed == 0) ++s.zero_wedge_graphs;
      triangles += tri;
      wedges += wed;
    }
  }
  if (s.n_graphs == 0) throw ConfigError("graph_stats: graphs contain no snapshots");
  s.n_nodes_avg = nodes / static_cast<double>(s.n_graphs);
  s.n_edges_avg = edges / static_cast<double>(s.n_graphs);
  s.d_avg = 2.0 * s.n_edges_avg / s.n_nodes_avg;
  s.K = wedges > 0 ? 3.0 * static_cast<double>(triangles) / static_cast<double>(wedges) : 0.0;
  return s;
}

namespace {

static_assert(std::endian::native == std::endian::little, "graph cache assumes a little-endian host");

constexpr char kGraphMagic[4] = {'S', 'T', 'D', 'G'};
constexpr std::uint32_t kGraphVersion = 1;

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& in, const std::filesystem::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError(path.string() + ": truncated graph file");
  return v;
}

}  // namespace

void save_graph(const std::filesystem::path& path, const DynamicGraph& g) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(kGraphMagic, 4);
  put<std::uint32_t>(out, kGraphVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(g.N));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(g.T()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(g.window));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(g.stride));
  put<double>(out, g.frac);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(g.subject_id.size()));
  out.write(g.subject_id.data(), static_cast<std::streamsize>(g.subject_id.size()));

  const std::size_t pairs = static_cast<std::size_t>(g.N) * static_cast<std::size_t>(g.N - 1) / 2;
  std::vector<std::uint8_t> packed((pairs + 7) / 8);
  std::vector<float> corr(pairs);
  std::vector<float> mean(static_cast<std::size_t>(g.N));
  for (const auto& snap : g.snapshots) {
    std::fill(packed.begin(), packed.end(), 0);
    std::size_t p = 0;
    for (int i = 0; i < g.N; ++i)
      for (int j = i + 1; j < g.N; ++j, ++p) {
        if (snap.A(i, j) != 0.0) packed[p / 8] |= static_cast<std::uint8_t>(1u << (p % 8));
        corr[p] = static_cast<float>(snap.C(i, j));
      }
    for (int i = 0; i < g.N; ++i) mean[static_cast<std::size_t>(i)] = static_cast<float>(snap.mean(i));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(snap.t));
    out.write(reinterpret_cast<const char*>(packed.data()), static_cast<std::streamsize>(packed.size()));
    out.write(reinterpret_cast<const char*>(corr.data()), static_cast<std::streamsize>(corr.size() * sizeof(float)));
    out.write(reinterpret_cast<const char*>(mean.data()), static_cast<std::streamsize>(mean.size() * sizeof(float)));
  }
  if (!out) throw FormatError("write failed for " + path.string());
}

DynamicGraph load_graph(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kGraphMagic, 4) != 0)
    throw FormatError(path.string() + ": not a graph cache file");
  const auto version = get<std::uint32_t>(in, path);
  if (version != kGraphVersion) throw FormatError(path.string() + ": unsupported graph cache version");
  DynamicGraph g;
  g.N = static_cast<int>(get<std::uint32_t>(in, path));
  const auto T = get<std::uint32_t>(in, path);
  g.window = static_cast<int>(get<std::uint32_t>(in, path));
  g.stride = static_cast<int>(get<std::uint32_t>(in, path));
  g.frac = get<double>(in, path);
  const auto id_len = get<std::uint32_t>(in, path);
  g.subject_id.resize(id_len);
  if (!in.read(g.subject_id.data(), id_len)) throw FormatError(path.string() + ": truncated graph file");

  const std::size_t pairs = static_cast<std::size_t>(g.N) * static_cast<std::size_t>(g.N - 1) / 2;
  std::vector<std::uint8_t> packed((pairs + 7) / 8);
  std::vector<float> corr(pairs);
  std::vector<float> mean(static_cast<std::size_t>(g.N));
  for (std::uint32_t s = 0; s < T; ++s) {
    GraphSnapshot snap;
    snap.t = static_cast<int>(get<std::uint32_t>(in, path));
    if (!in.read(reinterpret_cast<char*>(packed.data()), static_cast<std::streamsize>(packed.size())) ||
        !in.read(reinterpret_cast<char*>(corr.data()), static_cast<std::streamsize>(corr.size() * sizeof(float))) ||
        !in.read(reinterpret_cast<char*>(mean.data()), static_cast<std::streamsize>(mean.size() * sizeof(float))))
      throw FormatError(path.string() + ": truncated graph file");
    snap.A = Mat::Zero(g.N, g.N);
    snap.C = Mat::Identity(g.N, g.N);
    snap.mean.resize(g.N);
    std::size_t p = 0;
    for (int i = 0; i < g.N; ++i)
      for (int j = i + 1; j < g.N; ++j, ++p) {
        const double a = (packed[p / 8] >> (p % 8)) & 1u;
        snap.A(i, j) = snap.A(j, i) = a;
        snap.C(i, j) = snap.C(j, i) = corr[p];
      }
    for (int i = 0; i < g.N; ++i) snap.mean(i) = mean[static_cast<std::size_t>(i)];
    g.snapshots.push_back(std::move(snap));
  }
  return g;
}

}  // namespace stmae
