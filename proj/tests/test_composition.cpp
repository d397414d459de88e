// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <vector>

#include "lrcompose/composition.hpp"
#include "test_support.hpp"

using namespace lrcompose;
using lrcompose::testing::naive_matmul;
using lrcompose::testing::naive_transpose;
using lrcompose::testing::random_adapter;
using lrcompose::testing::random_matrix;

namespace {

constexpr std::array kStrategies = {
    CompositionStrategy::OutputSum, CompositionStrategy::OutputAverage,
    CompositionStrategy::WeightAverageFactors, CompositionStrategy::WeightAverageProducts};

std::vector<LowRankAdapter> random_family(std::size_t n, std::size_t d_out, std::size_t d_in,
                                          std::size_t r, Prng& prng, double alpha = 8.0) {
  std::vector<LowRankAdapter> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(random_adapter("m" + std::to_string(i), d_out, d_in, r, alpha, prng));
  return out;
}

LowRankAdapter scalar(const std::string& name, double a, double b) {
  LowRankAdapter ad;
  ad.name = name;
  ad.d_out = ad.d_in = ad.rank = 1;
  ad.alpha = 0.25;  // alpha / r = 0.25
  ad.a = Matrix(1, 1, a);
  ad.b = Matrix(1, 1, b);
  return ad;
}

/// Dense oracle: sum over all (i, j) of A_i B_jᵀ, enumerated with naive loops.
Matrix dense_pair_sum(const std::vector<LowRankAdapter>& ads, bool diagonal_only, bool cross_only) {
  Matrix out(ads[0].d_out, ads[0].d_in);
  for (std::size_t i = 0; i < ads.size(); ++i)
    for (std::size_t j = 0; j < ads.size(); ++j) {
      if (diagonal_only && i != j) continue;
      if (cross_only && i == j) continue;
      out += naive_matmul(ads[i].a, naive_transpose(ads[j].b));
    }
  return out;
}

double rel(const Matrix& got, const Matrix& want) {
  return max_abs_diff(got, want) / std::max(1e-12, max_abs(want));
}

}  // namespace

TEST(OutputSum, IdenticalAdaptersScaleByN) {
  Prng prng(1);
  const auto one = random_adapter("x", 6, 5, 2, 8.0, prng);
  const Matrix x = random_matrix(5, 3, prng);
  const Matrix single = delta_output(one, x);
  for (std::size_t n : {1, 2, 3, 7}) {
    std::vector<LowRankAdapter> ads(n, one);
    EXPECT_LE(rel(compose_output_sum(ads, x), single * static_cast<double>(n)), 1e-14);
  }
  std::vector<LowRankAdapter> just_one{one};
  EXPECT_EQ(compose_output_sum(just_one, x), single);
}

TEST(OutputSum, MatchesDenseOracleWithHeterogeneousScales) {
  Prng prng(2);
  std::vector<LowRankAdapter> ads = {random_adapter("a", 6, 4, 2, 8.0, prng),
                                     random_adapter("b", 6, 4, 3, 3.0, prng)};
  const Matrix x = random_matrix(4, 5, prng);
  Matrix dense(6, 5);
  for (const auto& ad : ads)
    dense += naive_matmul(naive_matmul(ad.a, naive_transpose(ad.b)), x) * ad.scale();
  EXPECT_LE(rel(compose_output_sum(ads, x), dense), 1e-10);
}

TEST(OutputSum, RejectsEmptyAndShapeMismatch) {
  Prng prng(3);
  std::vector<LowRankAdapter> none;
  EXPECT_THROW(compose_output_sum(none, Matrix(4, 1)), CompositionError);
  std::vector<LowRankAdapter> mixed = {random_adapter("a", 4, 4, 1, 1.0, prng),
                                       random_adapter("b", 5, 4, 1, 1.0, prng)};
  EXPECT_THROW(compose_output_sum(mixed, Matrix(4, 1)), ShapeError);
}

TEST(OutputAverage, IsSumOverN) {
  Prng prng(4);
  for (std::size_t n = 1; n <= 5; ++n) {
    const auto ads = random_family(n, 5, 6, 2, prng);
    const Matrix x = random_matrix(6, 3, prng);
    const Matrix avg = compose_output_average(ads, x);
    const Matrix sum = compose_output_sum(ads, x);
    EXPECT_LE(max_abs_diff(avg, sum * (1.0 / n)), 1e-12);
    if (n == 1) {
      EXPECT_EQ(avg, delta_output(ads[0], x));
    }
  }
}

TEST(OutputAverage, OpposedAdaptersCancel) {
  Prng prng(5);
  auto a1 = random_adapter("p", 4, 4, 2, 2.0, prng);
  auto a2 = a1;
  a2.name = "n";
  a2.b *= -1.0;
  std::vector<LowRankAdapter> ads{a1, a2};
  EXPECT_LE(max_abs(compose_output_average(ads, random_matrix(4, 3, prng))), 1e-15);
}

TEST(MergeFactors, IdenticalAdaptersUnchanged) {
  Prng prng(6);
  const auto one = random_adapter("x", 5, 5, 2, 4.0, prng);
  std::vector<LowRankAdapter> ads(3, one);
  EXPECT_LE(rel(materialize_delta(merge_factors_average(ads)), materialize_delta(one)), 1e-14);
  EXPECT_LE(rel(merge_products_average(ads), materialize_delta(one)), 1e-14);
}

TEST(MergeFactors, ScalarWitnessSixVersusSeven) {
  std::vector<LowRankAdapter> ads = {scalar("a", 1.0, 2.0), scalar("b", 3.0, 4.0)};
  const auto merged = merge_factors_average(ads);
  EXPECT_DOUBLE_EQ(merged.a(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(merged.b(0, 0), 3.0);
  EXPECT_DOUBLE_EQ(materialize_delta(merged)(0, 0), 6.0);
  // (1/4)(1*2 + 3*4 + 1*4 + 3*2) = (1/4)(2 + 12 + 4 + 6)
  const auto terms = cross_term_decomposition(ads);
  EXPECT_DOUBLE_EQ((terms.diagonal(0, 0) + terms.cross(0, 0)) / 4.0, 6.0);
  EXPECT_DOUBLE_EQ(merge_products_average(ads)(0, 0), 7.0);
}

TEST(MergeFactors, MatchesCrossTermFormula) {
  Prng prng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto ads = random_family(3, 8, 8, 2, prng);
    const Matrix expect = (dense_pair_sum(ads, false, false)) * (1.0 / 9.0);
    EXPECT_LE(rel(materialize_delta(merge_factors_average(ads)), expect), 1e-9);
  }
}

TEST(MergeFactors, RejectsIncompatibleFactors) {
  Prng prng(8);
  std::vector<LowRankAdapter> ranks = {random_adapter("a", 4, 4, 2, 4.0, prng),
                                       random_adapter("b", 4, 4, 3, 4.0, prng)};
  std::vector<LowRankAdapter> alphas = {random_adapter("a", 4, 4, 2, 4.0, prng),
                                        random_adapter("b", 4, 4, 2, 8.0, prng)};
  for (auto* set : {&ranks, &alphas}) {
    try {
      merge_factors_average(*set);
      FAIL();
    } catch (const CompositionError& e) {
      EXPECT_NE(std::string(e.what()).find("incompatible factors"), std::string::npos);
    }
    EXPECT_THROW(merge_products_average(*set), CompositionError);
  }
}

TEST(MergeFactors, DoesNotMutateInputs) {
  Prng prng(9);
  const auto ads = random_family(3, 4, 4, 2, prng);
  const auto copy = ads;
  (void)merge_factors_average(ads);
  (void)merge_products_average(ads);
  for (std::size_t i = 0; i < ads.size(); ++i) {
    EXPECT_EQ(ads[i].a, copy[i].a);
    EXPECT_EQ(ads[i].b, copy[i].b);
  }
}

TEST(MergeProducts, SharedBCollapsesToFactors) {
  Prng prng(10);
  auto ads = random_family(4, 6, 5, 2, prng);
  for (auto& ad : ads) ad.b = ads[0].b;
  EXPECT_LE(rel(materialize_delta(merge_factors_average(ads)), merge_products_average(ads)), 1e-10);
}

TEST(CrossTerms, SingleAdapterHasNoCross) {
  Prng prng(11);
  const auto ads = random_family(1, 4, 3, 2, prng);
  const auto t = cross_term_decomposition(ads);
  EXPECT_EQ(t.cross, Matrix(4, 3));
  EXPECT_EQ(t.diagonal_terms, 1u);
  EXPECT_EQ(t.cross_terms, 0u);
}

TEST(CrossTerms, TermCountsAndIdentity) {
  Prng prng(12);
  for (std::size_t n = 2; n <= 5; ++n) {
    const auto ads = random_family(n, 1 + prng.below(16), 1 + prng.below(16),
                                   1 + prng.below(4), prng);
    const auto t = cross_term_decomposition(ads);
    EXPECT_EQ(t.diagonal_terms, n);
    EXPECT_EQ(t.cross_terms, n * n - n);
    Matrix sum_a = ads[0].a, sum_b = ads[0].b;
    for (std::size_t i = 1; i < n; ++i) {
      sum_a += ads[i].a;
      sum_b += ads[i].b;
    }
    const Matrix lhs = naive_matmul(sum_a, naive_transpose(sum_b));
    EXPECT_LE(rel(t.diagonal + t.cross, lhs), 1e-9);
    EXPECT_LE(rel(t.diagonal, dense_pair_sum(ads, true, false)), 1e-12);
    EXPECT_LE(rel(t.cross, dense_pair_sum(ads, false, true)), 1e-12);
  }
}

TEST(CrossTerms, OneOverNSquaredVersusOneOverN) {
  Prng prng(13);
  for (std::size_t n : {2, 3, 5}) {
    const auto ads = random_family(n, 7, 6, 3, prng);
    const auto t = cross_term_decomposition(ads);
    const double inv = 1.0 / static_cast<double>(n);
    EXPECT_LE(rel(materialize_delta(merge_factors_average(ads)), (t.diagonal + t.cross) * (inv * inv)),
              1e-9);
    EXPECT_LE(rel(merge_products_average(ads), t.diagonal * inv), 1e-12);
  }
}

TEST(RankBounds, FactorsAtMostRProductsAtMostNR) {
  Prng prng(14);
  for (std::size_t n : {2, 3}) {
    const auto ads = random_family(n, 12, 12, 2, prng);
    EXPECT_LE(numerical_rank(materialize_delta(merge_factors_average(ads))), 2u);
    const auto prod_rank = numerical_rank(merge_products_average(ads));
    EXPECT_LE(prod_rank, 2 * n);
    EXPECT_GT(prod_rank, 2u);
  }
}

TEST(ComposedSite, PermutationInvariance) {
  Prng prng(15);
  for (int trial = 0; trial < 10; ++trial) {
    auto ads = random_family(4, 6, 6, 2, prng);
    const Matrix x = random_matrix(6, 3, prng);
    auto shuffled = ads;
    std::reverse(shuffled.begin(), shuffled.end());
    std::swap(shuffled[0], shuffled[2]);
    for (auto s : kStrategies) {
      const ComposedSite a({0, SiteKind::q}, ads, s), b({0, SiteKind::q}, shuffled, s);
      const Matrix da = a.delta(x), db = b.delta(x);
      EXPECT_LE(max_abs_diff(da, db) / std::max(1.0, max_abs(da)), 1e-12) << to_string(s);
    }
  }
}

TEST(ComposedSite, SingleAdapterAllStrategiesAgree) {
  Prng prng(16);
  const auto ad = random_adapter("one", 5, 4, 2, 4.0, prng);
  const Matrix w0 = random_matrix(5, 4, prng), x = random_matrix(4, 2, prng);
  const Matrix expect = naive_matmul(w0, x) + delta_output(ad, x);
  for (auto s : kStrategies) {
    const ComposedSite c({0, SiteKind::q}, {ad}, s);
    EXPECT_LE(max_abs_diff(composed_forward(w0, c, x), expect), 1e-12) << to_string(s);
  }
}

TEST(ComposedSite, AverageIsSumOverNAfterRemovingBase) {
  Prng prng(17);
  const auto ads = random_family(3, 5, 5, 2, prng);
  const Matrix w0 = random_matrix(5, 5, prng), x = random_matrix(5, 4, prng);
  const Matrix base = matmul(w0, x);
  const ComposedSite sum({0, SiteKind::q}, ads, CompositionStrategy::OutputSum);
  const ComposedSite avg({0, SiteKind::q}, ads, CompositionStrategy::OutputAverage);
  const Matrix ds = composed_forward(w0, sum, x) - base;
  const Matrix da = composed_forward(w0, avg, x) - base;
  EXPECT_LE(max_abs_diff(da, ds * (1.0 / 3.0)), 1e-12);
}

TEST(ComposedSite, ScalarWitnessForward) {
  std::vector<LowRankAdapter> ads = {scalar("a", 1.0, 2.0), scalar("b", 3.0, 4.0)};
  const Matrix w0(1, 1, 0.0), x(1, 1, 2.0);
  const ComposedSite factors({0, SiteKind::q}, ads, CompositionStrategy::WeightAverageFactors);
  const ComposedSite outputs({0, SiteKind::q}, ads, CompositionStrategy::OutputAverage);
  EXPECT_DOUBLE_EQ(composed_forward(w0, factors, x)(0, 0), 6.0 * 0.25 * 2.0);
  EXPECT_DOUBLE_EQ(composed_forward(w0, outputs, x)(0, 0), 7.0 * 0.25 * 2.0);
}

TEST(ComposedSite, RejectsEmptyAndIncompatible) {
  EXPECT_THROW(composed_forward(Matrix(1, 1), ComposedSite({0, SiteKind::q}, {}), Matrix(1, 1)),
               CompositionError);
  Prng prng(18);
  std::vector<LowRankAdapter> mixed = {random_adapter("a", 4, 4, 2, 4.0, prng),
                                       random_adapter("b", 4, 4, 2, 2.0, prng)};
  ComposedSite ok({0, SiteKind::q}, mixed, CompositionStrategy::OutputSum);
  EXPECT_THROW(ok.set_strategy(CompositionStrategy::WeightAverageFactors), CompositionError);
  EXPECT_EQ(ok.strategy(), CompositionStrategy::OutputSum);
  EXPECT_THROW(ComposedSite({0, SiteKind::q}, mixed, CompositionStrategy::WeightAverageProducts),
               CompositionError);
  EXPECT_THROW(composed_forward(Matrix(3, 4), ok, Matrix(4, 1)), ShapeError);
}

TEST(ComposedSite, ApplicationsCount) {
  Prng prng(19);
  const auto ads = random_family(3, 4, 4, 2, prng);
  EXPECT_EQ(ComposedSite({0, SiteKind::q}, ads, CompositionStrategy::OutputSum).applications(), 3u);
  EXPECT_EQ(ComposedSite({0, SiteKind::q}, ads, CompositionStrategy::OutputAverage).applications(),
            3u);
  EXPECT_EQ(
      ComposedSite({0, SiteKind::q}, ads, CompositionStrategy::WeightAverageFactors).applications(),
      1u);
}

TEST(Strategy, NamesRoundTrip) {
  for (auto s : kStrategies) EXPECT_EQ(parse_strategy(to_string(s)), s);
  EXPECT_TRUE(is_reference_oracle(CompositionStrategy::WeightAverageProducts));
  EXPECT_FALSE(is_reference_oracle(CompositionStrategy::WeightAverageFactors));
  EXPECT_THROW(parse_strategy("mean"), std::invalid_argument);
}
