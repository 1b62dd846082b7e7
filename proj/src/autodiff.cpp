// SPDX-License-Identifier: Apache-2.0
#include "stmae/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace stmae::ad {

const Mat& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Mat value) {
  nodes_.push_back(Node{std::move(value), Mat(), nullptr, nullptr, false});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::leaf(Mat value, Mat* sink) {
  nodes_.push_back(Node{std::move(value), Mat(), nullptr, sink, sink != nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(Mat value, std::initializer_list<Var> parents, Backward backward) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(backward));
}

Var Tape::record(Mat value, std::span<const Var> parents, Backward backward) {
  bool needs = false;
  for (const auto& p : parents) needs = needs || nodes_[static_cast<std::size_t>(p.id())].needs_grad;
  nodes_.push_back(Node{std::move(value), Mat(), needs ? std::move(backward) : nullptr, nullptr, needs});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::accumulate(const Var& v, const Mat& g) {
  Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0)
    n.grad = g;
  else
    n.grad += g;
}

void Tape::backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) throw ConfigError("backward: root must be a scalar");
  accumulate(root, Mat::Constant(1, 1, 1.0));
  for (int i = root.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.grad.size() == 0) continue;
    if (n.sink) {
      if (n.sink->size() == 0) *n.sink = Mat::Zero(n.value.rows(), n.value.cols());
      *n.sink += n.grad;
    }
    if (n.backward) n.backward(*this, n.grad);
  }
}

namespace {

Tape& tape_of(const Var& a) { return *a.tape(); }

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_slope(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw ConfigError("matmul: inner dimensions differ");
  return tape_of(a).record(a.value() * b.value(), {a, b}, [a, b](Tape& t, const Mat& g) {
    if (t.needs_grad(a)) t.accumulate(a, g * b.value().transpose());
    if (t.needs_grad(b)) t.accumulate(b, a.value().transpose() * g);
  });
}

Var add(const Var& a, const Var& b) {
  return tape_of(a).record(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(const Var& a, const Var& b) {
  return tape_of(a).record(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    if (t.needs_grad(b)) t.accumulate(b, -g);
  });
}

Var hadamard(const Var& a, const Var& b) {
  return tape_of(a).record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape& t, const Mat& g) {
    if (t.needs_grad(a)) t.accumulate(a, g.cwiseProduct(b.value()));
    if (t.needs_grad(b)) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var scale(const Var& a, double s) {
  return tape_of(a).record(a.value() * s, {a}, [a, s](Tape& t, const Mat& g) { t.accumulate(a, g * s); });
}

Var add_scalar(const Var& a, double s) {
  return tape_of(a).record(a.value().array() + s, {a}, [a](Tape& t, const Mat& g) { t.accumulate(a, g); });
}

Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ConfigError("add_row: shape mismatch");
  Mat out = a.value().rowwise() + row.value().row(0);
  return tape_of(a).record(std::move(out), {a, row}, [a, row](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    if (t.needs_grad(row)) t.accumulate(row, g.colwise().sum());
  });
}

Var mul_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ConfigError("mul_row: shape mismatch");
  Mat out = a.value().array().rowwise() * row.value().row(0).array();
  return tape_of(a).record(std::move(out), {a, row}, [a, row](Tape& t, const Mat& g) {
    if (t.needs_grad(a)) t.accumulate(a, (g.array().rowwise() * row.value().row(0).array()).matrix());
    if (t.needs_grad(row)) t.accumulate(row, g.cwiseProduct(a.value()).colwise().sum());
  });
}

Var scale_by(const Var& a, const Var& s) {
  return tape_of(a).record(a.value() * s.scalar(), {a, s}, [a, s](Tape& t, const Mat& g) {
    if (t.needs_grad(a)) t.accumulate(a, g * s.scalar());
    if (t.needs_grad(s)) t.accumulate(s, Mat::Constant(1, 1, g.cwiseProduct(a.value()).sum()));
  });
}

Var transpose(const Var& a) {
  return tape_of(a).record(a.value().transpose(), {a},
                           [a](Tape& t, const Mat& g) { t.accumulate(a, g.transpose()); });
}

Var hcat(const Var& a, const Var& b) {
  if (a.rows() != b.rows()) throw ConfigError("hcat: row counts differ");
  Mat out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const Eigen::Index ca = a.cols(), cb = b.cols();
  return tape_of(a).record(std::move(out), {a, b}, [a, b, ca, cb](Tape& t, const Mat& g) {
    if (t.needs_grad(a)) t.accumulate(a, g.leftCols(ca));
    if (t.needs_grad(b)) t.accumulate(b, g.rightCols(cb));
  });
}

Var tile_rows(const Var& row, Eigen::Index n) {
  if (row.rows() != 1) throw ConfigError("tile_rows: expects a row vector");
  return tape_of(row).record(row.value().replicate(n, 1), {row},
                             [row](Tape& t, const Mat& g) { t.accumulate(row, g.colwise().sum()); });
}

Var row_of(const Var& a, Eigen::Index r) {
  return tape_of(a).record(a.value().row(r), {a}, [a, r](Tape& t, const Mat& g) {
    Mat full = Mat::Zero(a.rows(), a.cols());
    full.row(r) = g.row(0);
    t.accumulate(a, full);
  });
}

Var mean_rows(const Var& a) {
  const double n = static_cast<double>(a.rows());
  return tape_of(a).record(a.value().colwise().mean(), {a}, [a, n](Tape& t, const Mat& g) {
    t.accumulate(a, g.replicate(a.rows(), 1) / n);
  });
}

Var sum_all(const Var& a) {
  return tape_of(a).record(Mat::Constant(1, 1, a.value().sum()), {a}, [a](Tape& t, const Mat& g) {
    t.accumulate(a, Mat::Constant(a.rows(), a.cols(), g(0, 0)));
  });
}

Var replace_rows(const Var& a, std::span<const int> rows, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ConfigError("replace_rows: shape mismatch");
  Mat out = a.value();
  for (int r : rows) out.row(r) = row.value().row(0);
  std::vector<int> idx(rows.begin(), rows.end());
  return tape_of(a).record(std::move(out), {a, row}, [a, row, idx](Tape& t, const Mat& g) {
    if (t.needs_grad(a)) {
      Mat ga = g;
      for (int r : idx) ga.row(r).setZero();
      t.accumulate(a, ga);
    }
    if (t.needs_grad(row)) {
      Mat gr = Mat::Zero(1, g.cols());
      for (int r : idx) gr += g.row(r);
      t.accumulate(row, gr);
    }
  });
}

Var zero_rows(const Var& a, std::span<const int> rows) {
  Mat out = a.value();
  for (int r : rows) out.row(r).setZero();
  std::vector<int> idx(rows.begin(), rows.end());
  return tape_of(a).record(std::move(out), {a}, [a, idx](Tape& t, const Mat& g) {
    Mat ga = g;
    for (int r : idx) ga.row(r).setZero();
    t.accumulate(a, ga);
  });
}

Var sigmoid(const Var& a) {
  Mat out = a.value().unaryExpr([](double x) { return sigmoid_value(x); });
  Mat slope = out.cwiseProduct((1.0 - out.array()).matrix());
  return tape_of(a).record(std::move(out), {a},
                           [a, slope](Tape& t, const Mat& g) { t.accumulate(a, g.cwiseProduct(slope)); });
}

Var tanh(const Var& a) {
  Mat out = a.value().array().tanh().matrix();
  Mat slope = (1.0 - out.array().square()).matrix();
  return tape_of(a).record(std::move(out), {a},
                           [a, slope](Tape& t, const Mat& g) { t.accumulate(a, g.cwiseProduct(slope)); });
}

Var gelu(const Var& a) {
  return tape_of(a).record(a.value().unaryExpr([](double x) { return gelu_value(x); }), {a},
                           [a](Tape& t, const Mat& g) {
                             t.accumulate(a, g.cwiseProduct(a.value().unaryExpr([](double x) { return gelu_slope(x); })));
                           });
}

Var layer_norm_rows(const Var& a, double eps) {
  const Mat& x = a.value();
  const Eigen::Index n = x.cols();
  Mat centered = x.colwise() - x.rowwise().mean();
  Vec inv_std = ((centered.array().square().rowwise().sum() / static_cast<double>(n)) + eps).rsqrt().matrix();
  Mat y = inv_std.asDiagonal() * centered;
  Mat y_copy = y;
  return tape_of(a).record(std::move(y), {a}, [a, y_copy, inv_std, n](Tape& t, const Mat& g) {
    const double dn = static_cast<double>(n);
    Vec g_mean = g.rowwise().sum() / dn;
    Vec gy_mean = g.cwiseProduct(y_copy).rowwise().sum() / dn;
    Mat dx = (g.colwise() - g_mean) - (y_copy.array().colwise() * gy_mean.array()).matrix();
    t.accumulate(a, inv_std.asDiagonal() * dx);
  });
}

Var sce(const Var& x, const Var& y, std::span<const int> rows, double gamma, int* skipped) {
  if (x.rows() != y.rows() || x.cols() != y.cols()) throw ConfigError("sce: shape mismatch");
  static constexpr double kEps = 1e-12;
  const Mat& X = x.value();
  const Mat& Y = y.value();
  std::vector<int> used;
  int skip = 0;
  for (int r : rows) {
    if (X.row(r).norm() > 0.0)
      used.push_back(r);
    else
      ++skip;
  }
  if (skipped) *skipped = skip;
  if (used.empty()) throw ConfigError("sce: empty node subset");

  double total = 0.0;
  std::vector<double> cosines(used.size());
  for (std::size_t k = 0; k < used.size(); ++k) {
    const int r = used[k];
    const double nx = X.row(r).norm();
    const double ny = std::max(Y.row(r).norm(), kEps);
    // 1 - cos as half the squared distance of the unit rows: exact zero for parallel rows.
    const double d = Y.row(r).norm() > kEps ? 0.5 * (X.row(r) / nx - Y.row(r) / ny).squaredNorm()
                                            : 1.0 - X.row(r).dot(Y.row(r)) / (nx * ny);
    cosines[k] = 1.0 - d;
    total += std::pow(std::max(d, 0.0), gamma);
  }
  const double m = static_cast<double>(used.size());
  return tape_of(x).record(
      Mat::Constant(1, 1, total / m), {x, y}, [x, y, used, cosines, gamma, m](Tape& t, const Mat& g) {
        const Mat& X = x.value();
        const Mat& Y = y.value();
        Mat gx = Mat::Zero(X.rows(), X.cols());
        Mat gy = Mat::Zero(Y.rows(), Y.cols());
        for (std::size_t k = 0; k < used.size(); ++k) {
          const int r = used[k];
          const double c = cosines[k];
          const double nx = X.row(r).norm();
          const double ny_raw = Y.row(r).norm();
          const double ny = std::max(ny_raw, kEps);
          const double base = std::max(1.0 - c, 0.0);
          const double dfdc = gamma == 1.0 ? -1.0 : -gamma * std::pow(base, gamma - 1.0);
          const double w = g(0, 0) * dfdc / m;
          gx.row(r) = w * (Y.row(r) / (nx * ny) - c * X.row(r) / (nx * nx));
          if (ny_raw > kEps)
            gy.row(r) = w * (X.row(r) / (nx * ny) - c * Y.row(r) / (ny * ny));
          else
            gy.row(r) = w * X.row(r) / (nx * ny);
        }
        if (t.needs_grad(x)) t.accumulate(x, gx);
        if (t.needs_grad(y)) t.accumulate(y, gy);
      });
}

Var mse_rows(const Var& x, const Var& y, std::span<const int> rows) {
  if (x.rows() != y.rows() || x.cols() != y.cols()) throw ConfigError("mse_rows: shape mismatch");
  if (rows.empty()) throw ConfigError("mse_rows: empty node subset");
  std::vector<int> idx(rows.begin(), rows.end());
  const double m = static_cast<double>(idx.size() * static_cast<std::size_t>(x.cols()));
  double total = 0.0;
  for (int r : idx) total += (x.value().row(r) - y.value().row(r)).squaredNorm();
  return tape_of(x).record(Mat::Constant(1, 1, total / m), {x, y}, [x, y, idx, m](Tape& t, const Mat& g) {
    Mat gx = Mat::Zero(x.rows(), x.cols());
    for (int r : idx) gx.row(r) = (2.0 * g(0, 0) / m) * (x.value().row(r) - y.value().row(r));
    if (t.needs_grad(x)) t.accumulate(x, gx);
    if (t.needs_grad(y)) t.accumulate(y, -gx);
  });
}

Var bce_offdiag(const Mat& target, const Var& prob) {
  const Mat& P = prob.value();
  if (target.rows() != P.rows() || target.cols() != P.cols()) throw ConfigError("bce: shape mismatch");
  const Eigen::Index N = P.rows();
  const double m = static_cast<double>(N * (N - 1));
  if (m <= 0) throw ConfigError("bce: need at least two nodes");
  double total = 0.0;
  for (Eigen::Index i = 0; i < N; ++i)
    for (Eigen::Index j = 0; j < N; ++j) {
      if (i == j) continue;
      const double p = std::clamp(P(i, j), kProbClamp, 1.0 - kProbClamp);
      const double a = target(i, j);
      total -= a * std::log(p) + (1.0 - a) * std::log(1.0 - p);
    }
  return tape_of(prob).record(Mat::Constant(1, 1, total / m), {prob}, [prob, target, m](Tape& t, const Mat& g) {
    const Mat& P = prob.value();
    const Eigen::Index N = P.rows();
    Mat gp = Mat::Zero(N, N);
    for (Eigen::Index i = 0; i < N; ++i)
      for (Eigen::Index j = 0; j < N; ++j) {
        if (i == j) continue;
        const double p = P(i, j);
        if (p < kProbClamp || p > 1.0 - kProbClamp) continue;
        const double a = target(i, j);
        gp(i, j) = -g(0, 0) * (a / p - (1.0 - a) / (1.0 - p)) / m;
      }
    t.accumulate(prob, gp);
  });
}

Var mse_offdiag(const Mat& target, const Var& prob) {
  const Mat& P = prob.value();
  if (target.rows() != P.rows() || target.cols() != P.cols()) throw ConfigError("mse_offdiag: shape mismatch");
  const Eigen::Index N = P.rows();
  const double m = static_cast<double>(N * (N - 1));
  Mat diff = P - target;
  diff.diagonal().setZero();
  const double total = diff.squaredNorm();
  return tape_of(prob).record(Mat::Constant(1, 1, total / m), {prob},
                              [prob, diff, m](Tape& t, const Mat& g) { t.accumulate(prob, (2.0 * g(0, 0) / m) * diff); });
}

Var bce_with_logit(const Var& logit, double label) {
  const double z = logit.scalar();
  const double loss = std::max(z, 0.0) - label * z + std::log1p(std::exp(-std::abs(z)));
  return tape_of(logit).record(Mat::Constant(1, 1, loss), {logit}, [logit, label](Tape& t, const Mat& g) {
    t.accumulate(logit, Mat::Constant(1, 1, g(0, 0) * (sigmoid_value(logit.scalar()) - label)));
  });
}

Var squared_error(const Var& pred, double target) {
  const double d = pred.scalar() - target;
  return tape_of(pred).record(Mat::Constant(1, 1, d * d), {pred}, [pred, d](Tape& t, const Mat& g) {
    t.accumulate(pred, Mat::Constant(1, 1, 2.0 * d * g(0, 0)));
  });
}

}  // namespace stmae::ad
