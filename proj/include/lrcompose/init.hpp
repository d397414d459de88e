// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>

#include "lrcompose/matrix.hpp"
#include "lrcompose/prng.hpp"

namespace lrcompose {

/// Half-width of the Kaiming-uniform interval with negative slope a = sqrt(5).
///
/// gain = sqrt(2 / (1 + a^2)) = sqrt(1/3), std = gain / sqrt(fan_in), and a
/// uniform with that std has half-width sqrt(3) * std = sqrt(1 / fan_in).
inline double kaiming_uniform_bound(std::size_t fan_in) {
  if (fan_in == 0) throw std::invalid_argument("kaiming_uniform_init: fan_in must be >= 1");
  return std::sqrt(1.0 / static_cast<double>(fan_in));
}

/// Entries i.i.d. uniform on the open interval (-bound, bound), row-major draw order.
inline Matrix kaiming_uniform_init(std::size_t rows, std::size_t cols, std::size_t fan_in,
                                   Prng& prng) {
  const double bound = kaiming_uniform_bound(fan_in);
  Matrix m(rows, cols);
  for (double& v : m.data()) v = bound * (2.0 * prng.uniform_open() - 1.0);
  return m;
}

}  // namespace lrcompose
