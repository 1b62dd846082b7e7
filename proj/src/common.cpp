// SPDX-License-Identifier: Apache-2.0
#include "stmae/common.hpp"

#include <cmath>
#include <iterator>
#include <numbers>

namespace stmae {

Rng derive_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  std::seed_seq::result_type words[2 + 2 * 8] = {};
  std::size_t n = 0;
  words[n++] = static_cast<std::uint32_t>(seed);
  words[n++] = static_cast<std::uint32_t>(seed >> 32);
  for (auto p : path) {
    if (n + 2 > std::size(words)) break;
    words[n++] = static_cast<std::uint32_t>(p);
    words[n++] = static_cast<std::uint32_t>(p >> 32);
  }
  std::seed_seq seq(words, words + n);
  return Rng(seq);
}

int uniform_int(Rng& rng, int lo, int hi) {
  // Rejection sampling keeps this exact and platform-independent.
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  const std::uint64_t limit = Rng::max() - Rng::max() % span;
  std::uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return lo + static_cast<int>(r % span);
}

double standard_normal(Rng& rng) {
  double u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace stmae
