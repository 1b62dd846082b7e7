// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <functional>
#include <numeric>
#include <random>

#include "stmae/autodiff.hpp"
#include "stmae/model.hpp"

using namespace stmae;

namespace {

Mat randn(Eigen::Index r, Eigen::Index c, std::mt19937_64& gen, double sd = 1.0) {
  std::normal_distribution<double> nd(0.0, sd);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(gen);
  return m;
}

using ScalarFn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

/// Central-difference check of every input entry; returns the max relative error.
double fd_check(const ScalarFn& f, std::vector<Mat> inputs, double h = 1e-6) {
  std::vector<Mat> grads;
  for (const auto& m : inputs) grads.push_back(Mat::Zero(m.rows(), m.cols()));
  {
    ad::Tape tape;
    std::vector<ad::Var> leaves;
    for (std::size_t i = 0; i < inputs.size(); ++i) leaves.push_back(tape.leaf(inputs[i], &grads[i]));
    tape.backward(f(tape, leaves));
  }
  auto eval = [&](const std::vector<Mat>& in) {
    ad::Tape tape;
    std::vector<ad::Var> leaves;
    for (const auto& m : in) leaves.push_back(tape.constant(m));
    return f(tape, leaves).scalar();
  };
  double worst = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    for (Eigen::Index k = 0; k < inputs[i].size(); ++k) {
      auto plus = inputs, minus = inputs;
      plus[i].data()[k] += h;
      minus[i].data()[k] -= h;
      const double num = (eval(plus) - eval(minus)) / (2 * h);
      const double ana = grads[i].data()[k];
      worst = std::max(worst, std::abs(num - ana) / std::max(1.0, std::abs(num) + std::abs(ana)));
    }
  return worst;
}

ad::Var weighted_sum(ad::Tape& t, const ad::Var& x, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  return ad::sum_all(ad::hadamard(x, t.constant(randn(x.rows(), x.cols(), gen))));
}

ModelConfig small_config(int N = 5, int D = 4, int L = 2) {
  ModelConfig c;
  c.N = N;
  c.D = D;
  c.n_layers = L;
  return c;
}

Mat random_adjacency(int n, std::mt19937_64& gen) {
  Mat A = Mat::Zero(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      if (gen() % 2) A(i, j) = A(j, i) = 1;
  return A;
}

Mat permutation(const std::vector<int>& perm) {
  const auto n = static_cast<Eigen::Index>(perm.size());
  Mat P = Mat::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) P(i, perm[static_cast<std::size_t>(i)]) = 1;
  return P;
}

}  // namespace

TEST_CASE("autodiff: every op agrees with central differences") {
  std::mt19937_64 gen(3);
  const Mat a = randn(3, 4, gen), b = randn(4, 2, gen), c = randn(3, 4, gen);
  const Mat row = randn(1, 4, gen), s = randn(1, 1, gen);
  const std::vector<int> picked{0, 2};

  struct Case {
    const char* name;
    ScalarFn f;
    std::vector<Mat> in;
  };
  const std::vector<Case> cases{
      {"matmul", [](ad::Tape& t, const auto& v) { return weighted_sum(t, ad::matmul(v[0], v[1]), 1); }, {a, b}},
      {"add/sub", [](ad::Tape& t, const auto& v) { return weighted_sum(t, ad::sub(ad::add(v[0], v[1]), v[1]), 2); }, {a, c}},
      {"hadamard", [](ad::Tape& t, const auto& v) { return weighted_sum(t, ad::hadamard(v[0], v[1]), 3); }, {a, c}},
      {"scale", [](ad::Tape& t, const auto& v) { return weighted_sum(t, ad::add_scalar(ad::scale(v[0], -1.7), 2), 4); }, {a}},
      {"add_row", [](ad::Tape& t, const auto& v) { return weighted_sum(t, ad::add_row(v[0], v[1]), 5); }, {a, row}},
      {"mul_row", [](ad::Tape& t, const auto& v) { return weighted_sum(t, ad::mul_row(v[0], v[1]), 6); }, {a, row}},
      {"scale_by", [](ad::Tape& t, const auto& v) { return weighted_sum(t, ad::scale_by(v[0], v[1]), 7); }, {a, s}},
      {"transpose", [](ad::Tape& t, const auto& v) { return weighted_sum(t, ad::transpose(v[0]), 8); }, {a}},
      {"hcat", [](ad::Tape& t, const auto& v) { return weighted_sum(t, ad::hcat(v[0], v[1]), 9); }, {a, c}},
      {"tile/row_of", [](ad::Tape& t, const auto& v) { return weighted_sum(t, ad::tile_rows(ad::row_of(v[0], 1), 5), 10); }, {a}},
      {"mean_rows", [](ad::Tape& t, const auto& v) { return weighted_sum(t, ad::mean_rows(v[0]), 11); }, {a}},
      {"replace_rows",
       [&](ad::Tape& t, const auto& v) { return weighted_sum(t, ad::replace_rows(v[0], picked, v[1]), 12); },
       {a, row}},
      {"zero_rows", [&](ad::Tape& t, const auto& v) { return weighted_sum(t, ad::zero_rows(v[0], picked), 13); }, {a}},
      {"sigmoid", [](ad::Tape& t, const auto& v) { return weighted_sum(t, ad::sigmoid(v[0]), 14); }, {a}},
      {"tanh", [](ad::Tape& t, const auto& v) { return weighted_sum(t, ad::tanh(v[0]), 15); }, {a}},
      {"gelu", [](ad::Tape& t, const auto& v) { return weighted_sum(t, ad::gelu(v[0]), 16); }, {a}},
      {"layer_norm", [](ad::Tape& t, const auto& v) { return weighted_sum(t, ad::layer_norm_rows(v[0]), 17); }, {a}},
      {"sce", [&](ad::Tape&, const auto& v) { return ad::sce(v[0], v[1], picked, 2.0); }, {a, c}},
      {"mse_rows", [&](ad::Tape&, const auto& v) { return ad::mse_rows(v[0], v[1], picked); }, {a, c}},
      {"bce_offdiag",
       [](ad::Tape&, const auto& v) {
         Mat target = Mat::Zero(3, 3);
         target(0, 1) = target(1, 0) = target(2, 0) = 1;
         return ad::bce_offdiag(target, ad::sigmoid(v[0]));
       },
       {randn(3, 3, gen)}},
      {"mse_offdiag",
       [](ad::Tape&, const auto& v) { return ad::mse_offdiag(Mat::Identity(3, 3), ad::sigmoid(v[0])); },
       {randn(3, 3, gen)}},
      {"bce_with_logit", [](ad::Tape&, const auto& v) { return ad::bce_with_logit(v[0], 1.0); }, {s}},
      {"squared_error", [](ad::Tape&, const auto& v) { return ad::squared_error(v[0], 0.3); }, {s}},
  };
  for (const auto& cs : cases) {
    CAPTURE(cs.name);
    CHECK(fd_check(cs.f, cs.in) < 1e-6);
  }
}

TEST_CASE("autodiff: nodes unreachable from a sink get no adjoint") {
  ad::Tape tape;
  Mat g = Mat::Zero(1, 1);
  const ad::Var x = tape.leaf(Mat::Constant(1, 1, 2.0), &g);
  const ad::Var k = tape.constant(Mat::Constant(1, 1, 3.0));
  const ad::Var y = ad::hadamard(ad::sigmoid(k), x);
  CHECK_FALSE(tape.needs_grad(ad::sigmoid(k)));
  CHECK(tape.needs_grad(y));
  tape.backward(y);
  CHECK(g(0, 0) == doctest::Approx(1.0 / (1.0 + std::exp(-3.0))));
}

TEST_CASE("sce skips zero-norm rows and rejects an all-zero selection") {
  ad::Tape tape;
  Mat x(2, 2);
  x << 0, 0, 1, 0;
  Mat y(2, 2);
  y << 1, 1, -1, 0;
  int skipped = 0;
  const std::vector<int> both{0, 1};
  CHECK(ad::sce(tape.constant(x), tape.constant(y), both, 1.0, &skipped).scalar() == doctest::Approx(2.0));
  CHECK(skipped == 1);
  const std::vector<int> first{0};
  CHECK_THROWS(ad::sce(tape.constant(x), tape.constant(y), first, 1.0));
}

TEST_CASE("node features select rows of the input projection") {
  auto cfg = small_config(6, 3);
  Model m(cfg, 1);
  ad::Tape tape;
  Forward fw(m, tape);
  std::mt19937_64 gen(2);
  const Mat eta = randn(1, 3, gen);
  const Mat X = fw.node_features(tape.constant(eta)).value();
  const Mat& W = m.params().value("input.W");
  const Mat expect = W.topRows(6) + (eta * W.bottomRows(3)).replicate(6, 1);
  CHECK((X - expect).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("linear GIN with identity MLPs reduces to (A + I)^L X") {
  auto cfg = small_config(7, 4, 3);
  cfg.activation = Activation::Linear;
  cfg.gin_norm = NormKind::None;
  Model m(cfg, 4);
  for (int l = 0; l < 3; ++l) {
    const std::string pre = "gin." + std::to_string(l) + ".";
    m.params().value(pre + "w1") = Mat::Identity(4, 4);
    m.params().value(pre + "w2") = Mat::Identity(4, 4);
  }
  std::mt19937_64 gen(5);
  const Mat A = random_adjacency(7, gen);
  const Mat X = randn(7, 4, gen);
  ad::Tape tape;
  Forward fw(m, tape);
  const auto enc = fw.gin_encode(tape.constant(X), A);
  const Mat S = A + Mat::Identity(7, 7);
  CHECK((enc.layers[0].value() - S * X).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((enc.z().value() - S * S * S * X).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("GIN is permutation equivariant and readout permutation invariant") {
  std::mt19937_64 gen(7);
  for (int trial = 0; trial < 5; ++trial) {
    auto cfg = small_config(6, 4, 2);
    Model m(cfg, static_cast<std::uint64_t>(trial));
    const Mat A = random_adjacency(6, gen);
    const Mat X = randn(6, 4, gen);
    std::vector<int> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), gen);
    const Mat P = permutation(perm);

    ad::Tape tape;
    Forward fw(m, tape);
    const auto e1 = fw.gin_encode(tape.constant(X), A);
    const auto e2 = fw.gin_encode(tape.constant(P * X), P * A * P.transpose());
    CHECK((P * e1.z().value() - e2.z().value()).cwiseAbs().maxCoeff() < 1e-12);
    const Mat g1 = fw.readout(e1.layers).value(), g2 = fw.readout(e2.layers).value();
    CHECK(g1.cols() == 2 * 4);
    CHECK((g1 - g2).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("edge decoders") {
  auto cfg = small_config(4, 3);
  Model m(cfg, 2);
  ad::Tape tape;
  Forward fw(m, tape);
  const Mat zero = fw.decode_edges_same(tape.constant(Mat::Zero(4, 3))).value();
  CHECK((zero.array() - 0.5).abs().maxCoeff() == 0.0);

  std::mt19937_64 gen(3);
  const Mat Ha = randn(4, 3, gen), Hb = randn(4, 3, gen);
  const Mat same = fw.decode_edges_same(tape.constant(Ha)).value();
  CHECK(same == same.transpose());
  const Mat ab = fw.decode_edges_cross(tape.constant(Ha), tape.constant(Hb)).value();
  const Mat ba = fw.decode_edges_cross(tape.constant(Hb), tape.constant(Ha)).value();
  CHECK((ab - ab.transpose()).cwiseAbs().maxCoeff() < 1e-15);
  CHECK((ab - ba).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(ab.minCoeff() > 0.0);
  CHECK(ab.maxCoeff() < 1.0);
}

TEST_CASE("saturated readout gates give the node mean") {
  auto cfg = small_config(5, 3, 2);
  Model m(cfg, 6);
  for (int l = 0; l < 2; ++l) {
    const std::string pre = "readout." + std::to_string(l) + ".";
    m.params().value(pre + "w2").setZero();
    m.params().value(pre + "b2").setConstant(40.0);
  }
  std::mt19937_64 gen(8);
  const Mat H0 = randn(5, 3, gen), H1 = randn(5, 3, gen);
  ad::Tape tape;
  Forward fw(m, tape);
  const std::vector<ad::Var> layers{tape.constant(H0), tape.constant(H1)};
  const Mat g = fw.readout(layers).value();
  Mat expect(1, 6);
  expect << H0.colwise().mean(), H1.colwise().mean();
  CHECK((g - expect).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("head averages over time before the affine map") {
  auto cfg = small_config(5, 2, 2);
  Model m(cfg, 9);
  std::mt19937_64 gen(10);
  const Mat g = randn(1, 4, gen);
  ad::Tape tape;
  Forward fw(m, tape);
  const std::vector<ad::Var> one{tape.constant(g)};
  const std::vector<ad::Var> many(5, tape.constant(g));
  CHECK(fw.head(one).scalar() == doctest::Approx(fw.head(many).scalar()).epsilon(1e-14));

  m.params().value("head.w").setZero();
  m.params().value("head.b").setConstant(0.25);
  ad::Tape t2;
  Forward f2(m, t2);
  const std::vector<ad::Var> seq{t2.constant(randn(1, 4, gen)), t2.constant(randn(1, 4, gen))};
  CHECK(f2.head(seq).scalar() == 0.25);
}

TEST_CASE("GRU time encoder is causal and silent on zero input") {
  auto cfg = small_config(5, 4);
  Model m(cfg, 11);
  for (const char* b : {"time.in_b", "time.gru.bz", "time.gru.br", "time.gru.bn"}) m.params().value(b).setZero();
  std::mt19937_64 gen(12);
  std::vector<Vec> means;
  for (int t = 0; t < 6; ++t) means.push_back(randn(5, 1, gen));
  auto altered = means;
  altered[4] = randn(5, 1, gen);

  ad::Tape tape;
  Forward fw(m, tape);
  const auto e1 = fw.encode_time(means);
  const auto e2 = fw.encode_time(altered);
  for (int t = 0; t < 4; ++t) CHECK(e1[static_cast<std::size_t>(t)].value() == e2[static_cast<std::size_t>(t)].value());
  CHECK(e1[4].value() != e2[4].value());

  const std::vector<Vec> zeros(3, Vec::Zero(5));
  for (const auto& e : fw.encode_time(zeros)) CHECK(e.value().isZero());
}

TEST_CASE("positional time encoder enforces its table size") {
  auto cfg = small_config(5, 4);
  cfg.time_encoder = TimeEncoderKind::Positional;
  cfg.max_T = 3;
  Model m(cfg, 1);
  ad::Tape tape;
  Forward fw(m, tape);
  const std::vector<Vec> three(3, Vec::Zero(5)), four(4, Vec::Zero(5));
  const auto eta = fw.encode_time(three);
  CHECK(eta[2].value() == m.params().value("time.pos").row(2));
  CHECK_THROWS_AS(fw.encode_time(four), ConfigError);
}

TEST_CASE("model init is deterministic and encoder transfer copies only encoder tensors") {
  const auto cfg = small_config();
  Model a(cfg, 5), b(cfg, 5), c(cfg, 6);
  for (std::size_t i = 0; i < a.params().size(); ++i)
    CHECK(a.params().value(static_cast<int>(i)) == b.params().value(static_cast<int>(i)));
  c.load_encoder_from(a);
  for (std::size_t i = 0; i < a.params().size(); ++i) {
    const auto& name = a.params().name(static_cast<int>(i));
    CAPTURE(name);
    const bool same = a.params().value(static_cast<int>(i)) == c.params().value(static_cast<int>(i));
    if (is_encoder_param(name))
      CHECK(same);
    else if (!a.params().value(static_cast<int>(i)).isZero())
      CHECK_FALSE(same);
  }
  Model wide(small_config(5, 6), 1);
  CHECK_THROWS_AS(wide.load_encoder_from(a), ConfigError);
  CHECK(param_group("gin.0.w1") == "gin");
  CHECK_FALSE(is_encoder_param("readout.0.w1"));
}

TEST_CASE("full predict gradient agrees with central differences") {
  auto cfg = small_config(5, 3, 2);
  Model m(cfg, 13);
  std::mt19937_64 gen(14);
  DynamicGraph g;
  g.N = 5;
  for (int t = 0; t < 3; ++t) {
    GraphSnapshot s;
    s.t = t + 1;
    s.A = random_adjacency(5, gen);
    s.mean = randn(5, 1, gen);
    g.snapshots.push_back(s);
  }
  Grads grads;
  {
    ad::Tape tape;
    Forward fw(m, tape, &grads);
    tape.backward(ad::bce_with_logit(fw.predict(g), 1.0));
  }
  auto loss = [&](const Model& mm) {
    ad::Tape tape;
    Forward fw(mm, tape);
    return ad::bce_with_logit(fw.predict(g), 1.0).scalar();
  };
  double worst = 0;
  for (std::size_t i = 0; i < m.params().size(); ++i) {
    const auto& name = m.params().name(static_cast<int>(i));
    if (name.starts_with("ssl.") || name.starts_with("dec_") || name == "mask_token") {
      CHECK(grads[i].isZero());
      continue;
    }
    for (Eigen::Index k = 0; k < std::min<Eigen::Index>(6, m.params().value(static_cast<int>(i)).size()); ++k) {
      Model p = m, q = m;
      p.params().value(static_cast<int>(i)).data()[k] += 1e-6;
      q.params().value(static_cast<int>(i)).data()[k] -= 1e-6;
      const double num = (loss(p) - loss(q)) / 2e-6;
      worst = std::max(worst, std::abs(num - grads[i].data()[k]) / std::max(1.0, std::abs(num)));
    }
  }
  CHECK(worst < 1e-6);
}
