// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "lrcompose/adapter.hpp"
#include "lrcompose/matrix.hpp"

namespace lrcompose {

/// How the adapters stacked at one site are combined.
enum class CompositionStrategy {
  /// h = W0 x + sum_i (alpha_i/r_i) A_i B_iᵀ x
  OutputSum,
  /// h = W0 x + (1/N) sum_i (alpha_i/r_i) A_i B_iᵀ x
  OutputAverage,
  /// Average A and B separately, apply the merged pair once. This is what
  /// "weight averaging" does in practice.
  WeightAverageFactors,
  /// Dense (1/N) sum_i A_i B_iᵀ. Reference oracle only: the result is not low rank.
  WeightAverageProducts,
};

inline constexpr std::string_view to_string(CompositionStrategy s) {
  switch (s) {
    case CompositionStrategy::OutputSum: return "output-sum";
    case CompositionStrategy::OutputAverage: return "output-average";
    case CompositionStrategy::WeightAverageFactors: return "weight-average-factors";
    case CompositionStrategy::WeightAverageProducts: return "weight-average-products";
  }
  return "?";
}

inline CompositionStrategy parse_strategy(std::string_view s) {
  for (auto c : {CompositionStrategy::OutputSum, CompositionStrategy::OutputAverage,
                 CompositionStrategy::WeightAverageFactors,
                 CompositionStrategy::WeightAverageProducts}) {
    if (to_string(c) == s) return c;
  }
  throw std::invalid_argument("unknown composition strategy '" + std::string(s) + "'");
}

inline constexpr bool is_reference_oracle(CompositionStrategy s) {
  return s == CompositionStrategy::WeightAverageProducts;
}

inline constexpr bool is_weight_strategy(CompositionStrategy s) {
  return s == CompositionStrategy::WeightAverageFactors ||
         s == CompositionStrategy::WeightAverageProducts;
}

/// Raised when adapters cannot be combined under the requested rule.
class CompositionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline void require_shared_dims(std::span<const LowRankAdapter> ads, const char* op) {
  if (ads.empty()) throw CompositionError(std::string(op) + ": empty adapter list");
  for (const auto& ad : ads) {
    if (ad.d_out != ads[0].d_out || ad.d_in != ads[0].d_in) {
      throw ShapeError(std::string(op) + ": adapter '" + ad.name + "' is (" +
                       std::to_string(ad.d_out) + "x" + std::to_string(ad.d_in) + "), '" +
                       ads[0].name + "' is (" + std::to_string(ads[0].d_out) + "x" +
                       std::to_string(ads[0].d_in) + ")");
    }
  }
}

inline void require_shared_factors(std::span<const LowRankAdapter> ads, const char* op) {
  require_shared_dims(ads, op);
  for (const auto& ad : ads) {
    if (ad.rank != ads[0].rank || ad.alpha != ads[0].alpha) {
      throw CompositionError(std::string(op) + ": incompatible factors: '" + ad.name +
                             "' has r=" + std::to_string(ad.rank) +
                             " alpha=" + std::to_string(ad.alpha) + ", '" + ads[0].name +
                             "' has r=" + std::to_string(ads[0].rank) +
                             " alpha=" + std::to_string(ads[0].alpha));
    }
  }
}

}  // namespace detail

/// sum_i (alpha_i/r_i) A_i (B_iᵀ x). Each adapter keeps its own scale.
inline Matrix compose_output_sum(std::span<const LowRankAdapter> ads, const Matrix& x) {
  detail::require_shared_dims(ads, "compose_output_sum");
  Matrix out = delta_output(ads[0], x);
  for (std::size_t i = 1; i < ads.size(); ++i) out += delta_output(ads[i], x);
  return out;
}

inline Matrix compose_output_average(std::span<const LowRankAdapter> ads, const Matrix& x) {
  Matrix out = compose_output_sum(ads, x);
  out *= 1.0 / static_cast<double>(ads.size());
  return out;
}

/// Adapter with A_avg = mean(A_i), B_avg = mean(B_i). Its product expands to
/// (1/N²)(sum_i A_i B_iᵀ + sum_{i≠j} A_i B_jᵀ).
inline LowRankAdapter merge_factors_average(std::span<const LowRankAdapter> ads) {
  detail::require_shared_factors(ads, "merge_factors_average");
  LowRankAdapter merged = ads[0];
  for (std::size_t i = 1; i < ads.size(); ++i) {
    merged.name += "+" + ads[i].name;
    merged.a += ads[i].a;
    merged.b += ads[i].b;
  }
  const double inv = 1.0 / static_cast<double>(ads.size());
  merged.a *= inv;
  merged.b *= inv;
  return merged;
}

/// Dense (1/N) sum_i A_i B_iᵀ (unscaled by alpha/r). Rank can reach N*r.
inline Matrix merge_products_average(std::span<const LowRankAdapter> ads) {
  detail::require_shared_factors(ads, "merge_products_average");
  Matrix out = materialize_delta(ads[0]);
  for (std::size_t i = 1; i < ads.size(); ++i) out += materialize_delta(ads[i]);
  out *= 1.0 / static_cast<double>(ads.size());
  return out;
}

struct CrossTerms {
  Matrix diagonal;  ///< sum_i A_i B_iᵀ
  Matrix cross;     ///< sum_{i≠j} A_i B_jᵀ
  std::size_t diagonal_terms = 0;
  std::size_t cross_terms = 0;
};

/// Splits (sum A_i)(sum B_j)ᵀ into its N matched and N²-N mismatched products.
inline CrossTerms cross_term_decomposition(std::span<const LowRankAdapter> ads) {
  detail::require_shared_dims(ads, "cross_term_decomposition");
  for (const auto& ad : ads) {
    if (ad.rank != ads[0].rank) {
      throw CompositionError("cross_term_decomposition: incompatible factors: rank " +
                             std::to_string(ad.rank) + " vs " + std::to_string(ads[0].rank));
    }
  }
  CrossTerms out{Matrix(ads[0].d_out, ads[0].d_in), Matrix(ads[0].d_out, ads[0].d_in), 0, 0};
  for (std::size_t i = 0; i < ads.size(); ++i) {
    for (std::size_t j = 0; j < ads.size(); ++j) {
      const Matrix term = matmul_nt(ads[i].a, ads[j].b);
      if (i == j) {
        out.diagonal += term;
        ++out.diagonal_terms;
      } else {
        out.cross += term;
        ++out.cross_terms;
      }
    }
  }
  return out;
}

/// Adapters stacked at one site plus the rule that combines them.
///
/// Construction validates compatibility for the chosen strategy and caches
/// the merged factors (or dense product average) for weight strategies.
/// Input adapters are copied, never mutated.
class ComposedSite {
 public:
  ComposedSite(AttachmentSite site, std::vector<LowRankAdapter> adapters,
               CompositionStrategy strategy = CompositionStrategy::OutputSum)
      : site_(site), adapters_(std::move(adapters)), strategy_(strategy) {
    rebuild();
  }

  AttachmentSite site() const noexcept { return site_; }
  CompositionStrategy strategy() const noexcept { return strategy_; }
  const std::vector<LowRankAdapter>& adapters() const noexcept { return adapters_; }
  std::size_t size() const noexcept { return adapters_.size(); }
  bool empty() const noexcept { return adapters_.empty(); }

  void set_strategy(CompositionStrategy s) {
    const CompositionStrategy old = strategy_;
    strategy_ = s;
    try {
      rebuild();
    } catch (...) {
      strategy_ = old;
      rebuild();
      throw;
    }
  }

  void push_back(LowRankAdapter ad) {
    adapters_.push_back(std::move(ad));
    try {
      rebuild();
    } catch (...) {
      adapters_.pop_back();
      rebuild();
      throw;
    }
  }

  /// Removes the adapter named `name`; returns false when absent.
  bool erase(std::string_view name) {
    for (auto it = adapters_.begin(); it != adapters_.end(); ++it) {
      if (it->name == name) {
        adapters_.erase(it);
        rebuild();
        return true;
      }
    }
    return false;
  }

  /// Adapter contribution at this site for input x (without W0 x).
  Matrix delta(const Matrix& x) const {
    if (adapters_.empty()) throw CompositionError("ComposedSite::delta: no adapters at " + site_.to_string());
    switch (strategy_) {
      case CompositionStrategy::OutputSum: return compose_output_sum(adapters_, x);
      case CompositionStrategy::OutputAverage: return compose_output_average(adapters_, x);
      case CompositionStrategy::WeightAverageFactors: return delta_output(*merged_, x);
      case CompositionStrategy::WeightAverageProducts: {
        Matrix out = matmul(*dense_, x);
        out *= adapters_[0].scale();
        return out;
      }
    }
    return {};
  }

  /// Number of adapter delta applications one call to delta() performs.
  std::size_t applications() const noexcept {
    return is_weight_strategy(strategy_) ? (adapters_.empty() ? 0 : 1) : adapters_.size();
  }

  const std::optional<LowRankAdapter>& merged_factors() const noexcept { return merged_; }

 private:
  void rebuild() {
    merged_.reset();
    dense_.reset();
    for (const auto& ad : adapters_) {
      ad.validate();
      if (ad.site != site_) {
        throw CompositionError("adapter '" + ad.name + "' belongs to " + ad.site.to_string() +
                               ", not " + site_.to_string());
      }
    }
    if (adapters_.empty()) return;
    if (strategy_ == CompositionStrategy::WeightAverageFactors) {
      merged_ = merge_factors_average(adapters_);
    } else if (strategy_ == CompositionStrategy::WeightAverageProducts) {
      dense_ = merge_products_average(adapters_);
    } else {
      detail::require_shared_dims(adapters_, "ComposedSite");
    }
  }

  AttachmentSite site_;
  std::vector<LowRankAdapter> adapters_;
  CompositionStrategy strategy_;
  std::optional<LowRankAdapter> merged_;
  std::optional<Matrix> dense_;
};

/// W0 x + composed delta.
inline Matrix composed_forward(const Matrix& w0, const ComposedSite& composed, const Matrix& x) {
  if (composed.empty()) throw CompositionError("composed_forward: no adapters");
  const auto& first = composed.adapters().front();
  if (w0.rows() != first.d_out || w0.cols() != first.d_in) {
    throw ShapeError("composed_forward: W0 " + w0.shape_string() + " vs adapter (" +
                     std::to_string(first.d_out) + "x" + std::to_string(first.d_in) + ")");
  }
  Matrix h = matmul(w0, x);
  h += composed.delta(x);
  return h;
}

}  // namespace lrcompose
