// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>
#include <vector>

#include "stmae/common.hpp"

/// Minimal reverse-mode differentiation over dense matrices.
///
/// A Tape records every intermediate value together with a closure that
/// pushes the node's adjoint into its parents. Leaves created with a gradient
/// sink accumulate their adjoint into that matrix on backward(). Nodes that
/// cannot reach a sink are never visited during the backward sweep.
namespace stmae::ad {

class Tape;

class Var {
 public:
  Var() = default;

  const Mat& value() const;
  double scalar() const { return value()(0, 0); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Mat& grad)>;

  Var constant(Mat value);
  /// Leaf whose adjoint is added into `*sink` by backward(); sink may be null.
  Var leaf(Mat value, Mat* sink);

  /// Record an op result. `parents` decide whether the node needs an adjoint.
  Var record(Mat value, std::initializer_list<Var> parents, Backward backward);
  Var record(Mat value, std::span<const Var> parents, Backward backward);

  const Mat& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(const Var& v) const { return nodes_[static_cast<std::size_t>(v.id())].needs_grad; }

  /// Add `g` into the adjoint of `v` (no-op when v cannot reach a sink).
  void accumulate(const Var& v, const Mat& g);

  /// Seed d(root)/d(root) = 1 (root must be 1x1) and sweep in reverse.
  void backward(const Var& root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    Backward backward;
    Mat* sink = nullptr;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
};

// Elementwise / linear algebra
Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var hadamard(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var add_row(const Var& a, const Var& row);      // a + 1 * row (row broadcast)
Var mul_row(const Var& a, const Var& row);      // a .* (1 * row)
Var scale_by(const Var& a, const Var& scalar);  // a * s, s is 1x1
Var transpose(const Var& a);
Var hcat(const Var& a, const Var& b);
Var tile_rows(const Var& row, Eigen::Index n);
Var row_of(const Var& a, Eigen::Index r);
Var mean_rows(const Var& a);  // 1 x cols, average over rows
Var sum_all(const Var& a);    // 1 x 1
/// Rows listed in `rows` replaced by `row` (1 x cols); other rows pass through.
Var replace_rows(const Var& a, std::span<const int> rows, const Var& row);
/// Replace listed rows by zeros.
Var zero_rows(const Var& a, std::span<const int> rows);

// Nonlinearities
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var gelu(const Var& a);  // exact erf form
/// Row-wise standardization (no affine), eps added to the variance.
Var layer_norm_rows(const Var& a, double eps = 1e-5);

// Losses (all return 1x1)
/// Mean over `rows` of (1 - cos(x_v, y_v))^gamma. Rows where x has zero norm
/// are skipped and counted in *skipped. Throws if no rows remain.
Var sce(const Var& x, const Var& y, std::span<const int> rows, double gamma, int* skipped = nullptr);
/// Mean over the listed rows of the squared error, averaged over columns too.
Var mse_rows(const Var& x, const Var& y, std::span<const int> rows);
/// Mean over off-diagonal entries of the binary cross-entropy between a {0,1}
/// target and probabilities clamped to [1e-7, 1 - 1e-7].
Var bce_offdiag(const Mat& target, const Var& prob);
/// Mean over off-diagonal entries of (target - prob)^2.
Var mse_offdiag(const Mat& target, const Var& prob);
/// Logistic loss on a 1x1 logit.
Var bce_with_logit(const Var& logit, double label);
/// Squared error on a 1x1 prediction.
Var squared_error(const Var& pred, double target);

inline constexpr double kProbClamp = 1e-7;

}  // namespace stmae::ad
