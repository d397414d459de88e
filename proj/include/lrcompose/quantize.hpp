// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "lrcompose/matrix.hpp"

namespace lrcompose {

/// Symmetric blockwise absmax int4 codes for a matrix.
///
/// The row-major values are cut into consecutive blocks of `block_size`
/// (the last block may be short). Each block stores absmax and one signed
/// code in [-7, 7] per element; dequantization is code * absmax / 7, so the
/// per-element error is at most absmax / 14. Codes are packed two per byte,
/// low nibble first, in two's complement.
struct QuantizedBlocks {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t block_size = 64;
  std::vector<std::uint8_t> packed_codes;
  std::vector<double> absmax;

  std::size_t count() const noexcept { return rows * cols; }

  std::int8_t code(std::size_t i) const {
    const std::uint8_t byte = packed_codes[i / 2];
    const std::uint8_t nib = (i % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
    return static_cast<std::int8_t>(nib >= 8 ? static_cast<int>(nib) - 16 : nib);
  }
};

inline QuantizedBlocks quantize_blockwise(const Matrix& m, std::size_t block_size = 64) {
  if (block_size == 0) throw std::invalid_argument("quantize_blockwise: block_size must be >= 1");
  QuantizedBlocks q;
  q.rows = m.rows();
  q.cols = m.cols();
  q.block_size = block_size;
  const std::size_t n = m.size();
  q.packed_codes.assign((n + 1) / 2, 0);
  q.absmax.reserve((n + block_size - 1) / block_size);
  const auto v = m.data();
  for (std::size_t start = 0; start < n; start += block_size) {
    const std::size_t end = std::min(n, start + block_size);
    double amax = 0.0;
    for (std::size_t i = start; i < end; ++i) amax = std::max(amax, std::abs(v[i]));
    q.absmax.push_back(amax);
    for (std::size_t i = start; i < end; ++i) {
      int c = 0;
      if (amax > 0.0) c = static_cast<int>(std::lround(v[i] / amax * 7.0));
      c = std::clamp(c, -7, 7);
      const auto nib = static_cast<std::uint8_t>(c & 0x0F);
      q.packed_codes[i / 2] |= (i % 2 == 0) ? nib : static_cast<std::uint8_t>(nib << 4);
    }
  }
  return q;
}

inline Matrix dequantize_blockwise(const QuantizedBlocks& q) {
  Matrix m(q.rows, q.cols);
  auto v = m.data();
  for (std::size_t i = 0; i < q.count(); ++i) {
    v[i] = static_cast<double>(q.code(i)) * q.absmax[i / q.block_size] / 7.0;
  }
  return m;
}

}  // namespace lrcompose
