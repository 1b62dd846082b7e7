// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "stmae/dynfc.hpp"
#include "test_util.hpp"

using namespace stmae;

namespace {

Mat random_corr(int n, std::mt19937_64& gen) {
  std::uniform_real_distribution<double> u(-0.99, 0.99);
  Mat C(n, n);
  for (int i = 0; i < n; ++i) {
    C(i, i) = 1.0;
    for (int j = i + 1; j < n; ++j) C(i, j) = C(j, i) = u(gen);
  }
  return C;
}

RoiTimeSeries random_series(int n, int t, std::mt19937_64& gen) {
  std::normal_distribution<double> nd;
  RoiTimeSeries ts;
  ts.subject_id = "r";
  ts.P.resize(n, t);
  for (Eigen::Index i = 0; i < ts.P.size(); ++i) ts.P.data()[i] = nd(gen);
  return ts;
}

void check_adjacency(const Mat& A) {
  CHECK(A == A.transpose());
  CHECK(A.diagonal().isZero());
  CHECK((A.array() * (1.0 - A.array())).isZero());
}

}  // namespace

TEST_CASE("pearson_fc closed forms") {
  Mat P(2, 6);
  P.row(0) << 1, 4, 2, 8, 5, 7;
  P.row(1) = 2.0 * P.row(0).array() + 3.0;
  CHECK(pearson_fc(P)(0, 1) == doctest::Approx(1.0).epsilon(1e-14));
  P.row(1) = -P.row(0);
  CHECK(pearson_fc(P)(0, 1) == doctest::Approx(-1.0).epsilon(1e-14));
}

TEST_CASE("pearson_fc matches a two-pass oracle on integer series") {
  std::mt19937_64 gen(4);
  for (int trial = 0; trial < 30; ++trial) {
    Mat P(3, 4);
    for (Eigen::Index i = 0; i < P.size(); ++i) P.data()[i] = static_cast<double>(static_cast<int>(gen() % 21) - 10);
    bool flat = false;
    for (int r = 0; r < 3; ++r) flat |= P.row(r).maxCoeff() == P.row(r).minCoeff();
    if (flat) continue;
    const Mat C = pearson_fc(P);
    CHECK((C - oracle::pearson(P)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(C == C.transpose());
  }
}

TEST_CASE("pearson_fc is invariant to positive affine maps per ROI") {
  std::mt19937_64 gen(8);
  std::uniform_real_distribution<double> scale(0.1, 10.0), shift(-50.0, 50.0);
  for (int trial = 0; trial < 20; ++trial) {
    const auto ts = random_series(6, 30, gen);
    Mat Q = ts.P;
    for (int r = 0; r < Q.rows(); ++r) Q.row(r) = (scale(gen) * Q.row(r).array() + shift(gen)).matrix();
    CHECK((pearson_fc(ts.P) - pearson_fc(Q)).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("zero-variance ROIs are counted and uncorrelated") {
  Mat P(3, 5);
  P << 1, 2, 3, 4, 6, 2, 2, 2, 2, 2, 5, 3, 1, 0, 2;
  int degenerate = 0;
  const Mat C = pearson_fc(P, &degenerate);
  CHECK(degenerate == 1);
  CHECK(C(1, 0) == 0.0);
  CHECK(C(1, 2) == 0.0);
  CHECK(C(1, 1) == 1.0);
}

TEST_CASE("threshold_topk tie-break on the identity") {
  const auto t = threshold_topk(Mat::Identity(4, 4), 0.3);
  Mat expect = Mat::Zero(4, 4);
  expect(0, 1) = expect(1, 0) = 1;
  CHECK(t.A == expect);
  CHECK_FALSE(t.empty);
}

TEST_CASE("threshold_topk flags empty results") {
  const auto t = threshold_topk(Mat::Identity(10, 10), 0.05);  // k = 5 <= N
  CHECK(t.empty);
  CHECK(t.A.isZero());
}

TEST_CASE("threshold_topk matches the sort-and-select oracle") {
  std::mt19937_64 gen(12);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 3 + static_cast<int>(gen() % 8);
    const double frac = 0.15 + 0.7 * static_cast<double>(gen() % 1000) / 1000.0;
    Mat C = random_corr(n, gen);
    if (trial % 4 == 0)  // quantised values force ties
      C = (C * 4).array().round() / 4;
    C.diagonal().setOnes();
    const auto t = threshold_topk(C, frac);
    CHECK(t.A == oracle::topk(C, frac));
    check_adjacency(t.A);
  }
}

TEST_CASE("edge count is ceil((k - N) / 2) for unit-diagonal input") {
  std::mt19937_64 gen(13);
  for (int trial = 0; trial < 40; ++trial) {
    const int n = 4 + static_cast<int>(gen() % 40);
    const double frac = 0.1 + 0.8 * static_cast<double>(gen() % 1000) / 1000.0;
    const long k = std::lround(frac * n * n);
    if (k <= n) continue;
    const auto t = threshold_topk(random_corr(n, gen), frac);
    CHECK(edge_count(t.A) == (k - n + 1) / 2);  // odd leftover pick is symmetrised
  }
}

TEST_CASE("snapshot count and window placement") {
  std::mt19937_64 gen(5);
  const auto ts = random_series(5, 200, gen);
  const auto g = build_dynamic_graph(ts, 50, 16, 0.3);
  CHECK(g.T() == 10);
  for (int t = 1; t <= g.T(); ++t) {
    const auto& s = g.snapshots[static_cast<std::size_t>(t - 1)];
    CHECK(s.t == t);
    const Mat expect = pearson_fc(ts.P.middleCols((t - 1) * 16, 50));
    CHECK((s.C - expect).cwiseAbs().maxCoeff() == 0.0);
    check_adjacency(s.A);
  }
  CHECK(build_dynamic_graph(random_series(3, 40, gen), 40, 7, 0.3).T() == 1);
  CHECK_THROWS_AS(build_dynamic_graph(random_series(3, 40, gen), 41, 7, 0.3), ConfigError);

  for (int trial = 0; trial < 200; ++trial) {
    const int tmax = 2 + static_cast<int>(gen() % 300);
    const int w = 2 + static_cast<int>(gen() % (tmax - 1));
    const int s = 1 + static_cast<int>(gen() % 40);
    CHECK(snapshot_count(tmax, w, s) == (tmax - w) / s + 1);
  }
}

TEST_CASE("stationary halves agree in expectation") {
  std::mt19937_64 gen(21);
  const auto ts = random_series(64, 2000, gen);
  const auto g = build_dynamic_graph(ts, 100, 100, 0.3);
  Mat first = Mat::Zero(64, 64), second = Mat::Zero(64, 64);
  const int half = g.T() / 2;
  for (int t = 0; t < g.T(); ++t) (t < half ? first : second) += g.snapshots[static_cast<std::size_t>(t)].C;
  first /= half;
  second /= g.T() - half;
  // Each half averages 10 windows of 100 samples: per-entry sd of the
  // difference is about 0.045.
  const Mat d = first - second;
  CHECK(d.cwiseAbs().sum() / (64.0 * 63.0) < 0.05);
  CHECK(std::abs(d.sum()) / (64.0 * 63.0) < 0.01);
}

TEST_CASE("transitivity closed forms") {
  DynamicGraph tri;
  tri.N = 3;
  GraphSnapshot s;
  s.A = Mat::Ones(3, 3) - Mat::Identity(3, 3);
  tri.snapshots.push_back(s);
  CHECK(graph_stats(std::span(&tri, 1)).K == 1.0);

  DynamicGraph star;
  star.N = 5;
  s.A = Mat::Zero(5, 5);
  for (int i = 1; i < 5; ++i) s.A(0, i) = s.A(i, 0) = 1;
  star.snapshots.push_back(s);
  const auto st = graph_stats(std::span(&star, 1));
  CHECK(st.K == 0.0);
  CHECK(st.d_max == 4);
}

TEST_CASE("triangles and wedges match enumeration on random graphs") {
  std::mt19937_64 gen(31);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 3 + static_cast<int>(gen() % 8);
    Mat A = Mat::Zero(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j)
        if (gen() % 2) A(i, j) = A(j, i) = 1;
    const auto [tri, wedges] = triangles_and_wedges(A);
    const auto [closed, w2] = oracle::closed_and_wedges(A);
    CHECK(tri == oracle::triangles(A));
    CHECK(3 * tri == closed);
    CHECK(wedges == w2);
  }
}

TEST_CASE("graph_stats invariants") {
  std::mt19937_64 gen(41);
  std::vector<DynamicGraph> gs;
  for (int i = 0; i < 5; ++i) gs.push_back(build_dynamic_graph(random_series(12, 120, gen), 30, 10, 0.3));
  const auto st = graph_stats(gs);
  CHECK(st.n_graphs == 5 * 10);
  CHECK(st.n_nodes_avg == 12.0);
  CHECK(st.d_avg == doctest::Approx(2.0 * st.n_edges_avg / st.n_nodes_avg).epsilon(1e-12));
  CHECK(st.K >= 0.0);
  CHECK(st.K <= 1.0);
  CHECK(st.n_edges_avg == (std::lround(0.3 * 144) - 12 + 1) / 2);
}

TEST_CASE("graph cache round trip") {
  std::mt19937_64 gen(51);
  const auto g = build_dynamic_graph(random_series(9, 80, gen), 20, 7, 0.3);
  TempDir dir;
  save_graph(dir.path() / "g.stdg", g);
  const auto back = load_graph(dir.path() / "g.stdg");
  CHECK(back.subject_id == g.subject_id);
  CHECK(back.window == 20);
  CHECK(back.stride == 7);
  CHECK(back.frac == 0.3);
  REQUIRE(back.T() == g.T());
  for (int t = 0; t < g.T(); ++t) {
    const auto& a = g.snapshots[static_cast<std::size_t>(t)];
    const auto& b = back.snapshots[static_cast<std::size_t>(t)];
    CHECK(a.A == b.A);
    CHECK((a.C - b.C).cwiseAbs().maxCoeff() < 1e-6);  // stored as f32
  }
  dir.write("bad.stdg", "nope");
  CHECK_THROWS_AS(load_graph(dir.path() / "bad.stdg"), FormatError);
}
