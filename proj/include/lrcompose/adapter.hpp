// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

#include "lrcompose/init.hpp"
#include "lrcompose/matrix.hpp"
#include "lrcompose/prng.hpp"
#include "lrcompose/site.hpp"

namespace lrcompose {

/// Trainable low-rank pair attached at one site.
///
/// The delta it contributes is (alpha / rank) * A * Bᵀ with A of shape
/// (d_out x rank) and B of shape (d_in x rank). Both factors are stored tall;
/// the transpose happens inside delta application.
struct LowRankAdapter {
  std::string name;
  AttachmentSite site;
  std::size_t d_out = 0;
  std::size_t d_in = 0;
  std::size_t rank = 0;
  double alpha = 0.0;
  Matrix a;
  Matrix b;
  double dropout_p = 0.0;

  double scale() const { return alpha / static_cast<double>(rank); }

  void validate() const {
    if (rank == 0 || d_out == 0 || d_in == 0) {
      throw std::invalid_argument("adapter '" + name + "': rank and dims must be >= 1");
    }
    if (!(alpha > 0.0)) throw std::invalid_argument("adapter '" + name + "': alpha must be > 0");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) {
      throw std::invalid_argument("adapter '" + name + "': dropout must be in [0, 1)");
    }
    if (a.rows() != d_out || a.cols() != rank) {
      throw ShapeError("adapter '" + name + "': A is " + a.shape_string() + ", expected (" +
                       std::to_string(d_out) + "x" + std::to_string(rank) + ")");
    }
    if (b.rows() != d_in || b.cols() != rank) {
      throw ShapeError("adapter '" + name + "': B is " + b.shape_string() + ", expected (" +
                       std::to_string(d_in) + "x" + std::to_string(rank) + ")");
    }
  }
};

/// Fresh adapter: A Kaiming-uniform with fan_in = d_in, B zero, so the delta starts at 0.
inline LowRankAdapter init_adapter(std::string name, AttachmentSite site, std::size_t d_out,
                                   std::size_t d_in, std::size_t rank, double alpha,
                                   double dropout_p, Prng& prng) {
  if (rank == 0) throw std::invalid_argument("init_adapter: rank must be >= 1");
  if (d_out == 0 || d_in == 0) throw std::invalid_argument("init_adapter: dims must be >= 1");
  LowRankAdapter ad;
  ad.name = std::move(name);
  ad.site = site;
  ad.d_out = d_out;
  ad.d_in = d_in;
  ad.rank = rank;
  ad.alpha = alpha;
  ad.dropout_p = dropout_p;
  ad.a = kaiming_uniform_init(d_out, rank, d_in, prng);
  ad.b = Matrix(d_in, rank);
  ad.validate();
  return ad;
}

/// Inverted-dropout mask for a (rows x cols) input: each entry is 0 with
/// probability p and 1/(1-p) otherwise.
inline Matrix dropout_mask(std::size_t rows, std::size_t cols, double p, Prng& prng) {
  Matrix m(rows, cols);
  const double keep = 1.0 / (1.0 - p);
  for (double& v : m.data()) v = prng.bernoulli(p) ? 0.0 : keep;
  return m;
}

/// (alpha/r) * A * (Bᵀ x), never forming the d_out x d_in product.
///
/// With `training` set and a positive dropout rate, the adapter input gets an
/// inverted-dropout mask drawn from `prng` (required in that case).
inline Matrix delta_output(const LowRankAdapter& ad, const Matrix& x, bool training = false,
                           Prng* prng = nullptr) {
  if (x.rows() != ad.d_in) {
    throw ShapeError("delta_output: adapter '" + ad.name + "' expects " + std::to_string(ad.d_in) +
                     " input rows, got " + x.shape_string());
  }
  Matrix hidden;
  if (training && ad.dropout_p > 0.0) {
    if (prng == nullptr) throw std::invalid_argument("delta_output: dropout needs a prng");
    hidden = matmul_tn(ad.b, hadamard(x, dropout_mask(x.rows(), x.cols(), ad.dropout_p, *prng)));
  } else {
    hidden = matmul_tn(ad.b, x);
  }
  Matrix out = matmul(ad.a, hidden);
  out *= ad.scale();
  return out;
}

/// A * Bᵀ (unscaled).
inline Matrix materialize_delta(const LowRankAdapter& ad) { return matmul_nt(ad.a, ad.b); }

}  // namespace lrcompose
