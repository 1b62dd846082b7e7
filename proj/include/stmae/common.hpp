// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace stmae {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using RowVec = Eigen::RowVectorXd;

/// Caller-owned random stream. Every stochastic operation takes one explicitly.
using Rng = std::mt19937_64;

/// Broad failure category; maps one-to-one onto CLI exit codes and C API status values.
enum class ErrorKind { Usage = 1, Data = 2, Runtime = 3 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Malformed input file (ragged rows, bad cells, bad binary headers).
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(ErrorKind::Data, what) {}
};

/// Inconsistent or out-of-range configuration / arguments.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Data, what) {}
};

/// Non-finite values during training and similar runtime faults.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::Runtime, what) {}
};

/// Derive an independent stream from a base seed and a path of indices
/// (epoch, subject, ...). Pure function of its inputs.
Rng derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> path);

/// Uniform double in [0, 1) built from the top 53 bits of one draw.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Uniform integer in [lo, hi].
int uniform_int(Rng& rng, int lo, int hi);

/// Standard normal draw (Box-Muller, two uniforms per call).
double standard_normal(Rng& rng);

}  // namespace stmae
