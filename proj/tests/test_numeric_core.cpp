// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "lrcompose/init.hpp"
#include "lrcompose/matrix.hpp"
#include "lrcompose/prng.hpp"
#include "lrcompose/tape.hpp"
#include "test_support.hpp"

using namespace lrcompose;
using lrcompose::testing::finite_difference;
using lrcompose::testing::max_entry_rel_error;
using lrcompose::testing::naive_matmul;
using lrcompose::testing::random_matrix;

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Matrix m = Matrix::from_rows({{1, 2, 3}, {4, 5, 6}, {7, 8, 9}});
  EXPECT_EQ(matmul(Matrix::identity(3), m), m);
  EXPECT_EQ(matmul(m, Matrix::identity(3)), m);
}

TEST(Matmul, HandArithmetic) {
  const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
  const Matrix b = Matrix::from_rows({{0}, {1}});
  EXPECT_EQ(matmul(a, b), Matrix::from_rows({{2}, {4}}));
}

TEST(Matmul, MatchesTripleLoop) {
  Prng prng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = random_matrix(8, 4, prng);
    const Matrix b = random_matrix(4, 8, prng);
    EXPECT_LE(max_rel_diff(matmul(a, b), naive_matmul(a, b), 1e-300), 1e-12);
  }
}

TEST(Matmul, TransposedVariantsAgree) {
  Prng prng(12);
  const Matrix a = random_matrix(5, 3, prng);
  const Matrix b = random_matrix(5, 4, prng);
  const Matrix c = random_matrix(6, 3, prng);
  EXPECT_LE(max_abs_diff(matmul_tn(a, b), naive_matmul(lrcompose::testing::naive_transpose(a), b)),
            1e-14);
  EXPECT_LE(max_abs_diff(matmul_nt(a, c), naive_matmul(a, lrcompose::testing::naive_transpose(c))),
            1e-14);
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  try {
    matmul(Matrix(2, 3), Matrix(2, 3));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(2x3)"), std::string::npos) << msg;
  }
}

TEST(Matmul, Associativity) {
  Prng prng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = 1 + prng.below(16), n = 1 + prng.below(16), p = 1 + prng.below(16),
               q = 1 + prng.below(16);
    const Matrix a = random_matrix(m, n, prng), b = random_matrix(n, p, prng),
                 c = random_matrix(p, q, prng);
    const Matrix left = matmul(matmul(a, b), c);
    const Matrix right = matmul(a, matmul(b, c));
    EXPECT_LE(max_abs_diff(left, right) / std::max(1.0, max_abs(left)), 1e-9);
  }
}

TEST(Matrix, ValuesLengthChecked) {
  EXPECT_THROW(Matrix(2, 2, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(Matrix, NumericalRank) {
  EXPECT_EQ(numerical_rank(Matrix::identity(4)), 4u);
  EXPECT_EQ(numerical_rank(Matrix::from_rows({{1, 2}, {2, 4}})), 1u);
  EXPECT_EQ(numerical_rank(Matrix(3, 3)), 0u);
}

// ---- PRNG ------------------------------------------------------------------

TEST(Prng, GoldenStreamForSeed8989) {
  // Frozen from an independent Python implementation of splitmix64 + xoshiro256**.
  constexpr std::array<std::uint64_t, 5> golden = {
      0xFB4A59C5EA5E7E17ULL, 0xA1E42EEFB924620AULL, 0xCB2C04CAC079DCC2ULL,
      0xEAA39E386FAD42C3ULL, 0x95C072E229E0EC61ULL};
  Prng prng(8989);
  for (std::uint64_t expected : golden) EXPECT_EQ(prng.next_u64(), expected);
}

TEST(Prng, SameSeedSameStream) {
  Prng a(8989), b(8989), c(8990);
  bool differs = false;
  for (int i = 0; i < 1000; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs |= x != c.next_u64();
  }
  EXPECT_TRUE(differs);
}

TEST(Prng, DeriveDependsOnTag) {
  auto a = Prng::derive(1, "alpha"), b = Prng::derive(1, "alpha"), c = Prng::derive(1, "beta");
  const auto x = a.next_u64();
  EXPECT_EQ(x, b.next_u64());
  EXPECT_NE(x, c.next_u64());
}

TEST(Prng, BelowStaysInRange) {
  Prng prng(3);
  std::array<int, 7> hist{};
  for (int i = 0; i < 7000; ++i) ++hist[prng.below(7)];
  for (int h : hist) EXPECT_GT(h, 800);
  EXPECT_THROW(prng.below(0), std::invalid_argument);
}

TEST(Prng, ShuffleIsPermutation) {
  Prng prng(4);
  std::vector<int> v(50);
  for (int i = 0; i < 50; ++i) v[i] = i;
  prng.shuffle(std::span<int>(v));
  std::vector<int> sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
  EXPECT_NE(v, sorted);
}

// ---- Kaiming init -------------------------------------------------------------

TEST(Kaiming, BoundFormula) {
  EXPECT_DOUBLE_EQ(kaiming_uniform_bound(1), 1.0);
  EXPECT_DOUBLE_EQ(kaiming_uniform_bound(4), 0.5);
  // gain sqrt(2/(1+a^2)) with a = sqrt(5), times sqrt(3/fan_in)
  const double a = std::sqrt(5.0);
  for (std::size_t fan_in : {1, 3, 16, 64}) {
    const double gain = std::sqrt(2.0 / (1.0 + a * a));
    EXPECT_NEAR(kaiming_uniform_bound(fan_in), gain * std::sqrt(3.0 / fan_in), 1e-15);
  }
  EXPECT_THROW(kaiming_uniform_bound(0), std::invalid_argument);
}

TEST(Kaiming, FanInOneInsideOpenUnitInterval) {
  Prng prng(1);
  const Matrix m = kaiming_uniform_init(50, 50, 1, prng);
  for (double v : m.data()) {
    EXPECT_GT(v, -1.0);
    EXPECT_LT(v, 1.0);
  }
}

TEST(Kaiming, FanInFourBoundAndMean) {
  Prng prng(2);
  const Matrix m = kaiming_uniform_init(1000, 100, 4, prng);
  double total = 0.0;
  for (double v : m.data()) {
    ASSERT_GT(v, -0.5);
    ASSERT_LT(v, 0.5);
    total += v;
  }
  EXPECT_NEAR(total / static_cast<double>(m.size()), 0.0, 0.01);
}

TEST(Kaiming, BoundHoldsForManySeeds) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Prng prng(seed);
    const std::size_t fan_in = 1 + seed % 17;
    const double bound = kaiming_uniform_bound(fan_in);
    const Matrix m = kaiming_uniform_init(4, 4, fan_in, prng);
    for (double v : m.data()) ASSERT_LT(std::abs(v), bound);
  }
}

TEST(Kaiming, DeterministicAndGolden) {
  Prng a(8989), b(8989);
  EXPECT_EQ(kaiming_uniform_init(6, 5, 3, a), kaiming_uniform_init(6, 5, 3, b));
  Prng c(8989);
  // Python oracle: 0.5 * (2 * ((x >> 11) + 0.5) * 2^-53 - 1) for the first draw.
  EXPECT_DOUBLE_EQ(kaiming_uniform_init(1, 1, 4, c)(0, 0), 0.4816032512848043);
}

// ---- Tape -----------------------------------------------------------------------

TEST(Tape, LinearClosedForm) {
  Prng prng(5);
  GradientTape t;
  const Matrix w = random_matrix(3, 4, prng);
  const Matrix x = random_matrix(4, 2, prng);
  const Var wv = t.parameter(w);
  const Var loss = t.sum(t.matmul(wv, t.constant(x)));
  const Gradients g = t.backward(loss);
  // d/dW sum(W x) = ones(3x2) * xᵀ: every row equals the row sums of x.
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(g[wv](i, j), x(j, 0) + x(j, 1), 1e-10);
}

TEST(Tape, UnreachableLeafGetsZero) {
  GradientTape t;
  const Var used = t.parameter(Matrix(2, 2, 1.0));
  const Var unused = t.parameter(Matrix(3, 1, 7.0));
  const Gradients g = t.backward(t.sum(used));
  ASSERT_TRUE(g.contains(unused));
  EXPECT_EQ(g[unused], Matrix(3, 1));
}

TEST(Tape, NonScalarLossRejected) {
  GradientTape t;
  const Var p = t.parameter(Matrix(2, 2, 1.0));
  EXPECT_THROW(t.backward(p), std::invalid_argument);
}

TEST(Tape, FanOutAccumulates) {
  GradientTape t;
  const Var p = t.parameter(Matrix(1, 1, 3.0));
  // loss = p + 2p + p*p -> d/dp = 3 + 2p = 9
  const Var loss = t.add(t.add(p, t.scale(p, 2.0)), t.hadamard(p, p));
  EXPECT_NEAR(t.backward(loss)[p](0, 0), 9.0, 1e-12);
}

TEST(Tape, NonFiniteValueRejected) {
  GradientTape t;
  EXPECT_THROW(t.constant(Matrix(1, 1, std::nan(""))), NumericError);
}

namespace {

/// Builds loss = sum(W ⊙ f(X)) for a fixed random weighting W, so the
/// upstream gradient into f is not uniform.
using UnaryOp = std::function<Var(GradientTape&, Var)>;

void expect_unary_gradient(const UnaryOp& op, const Matrix& x0, const Matrix& weight,
                           double tol = 1e-3) {
  auto loss_of = [&](const Matrix& x) {
    GradientTape t(false);
    const Var y = op(t, t.constant(x));
    return t.value(t.sum(t.hadamard(y, t.constant(weight)))).data()[0];
  };
  GradientTape t;
  const Var xv = t.parameter(x0);
  const Var loss = t.sum(t.hadamard(op(t, xv), t.constant(weight)));
  const Matrix analytic = t.backward(loss)[xv];
  const Matrix numeric = finite_difference(loss_of, x0, 1e-4);
  EXPECT_LE(max_entry_rel_error(analytic, numeric, 1e-6), tol);
}

}  // namespace

class PrimitiveGradient : public ::testing::Test {
 protected:
  Prng prng{77};
};

TEST_F(PrimitiveGradient, MatmulBothSides) {
  const Matrix b = random_matrix(4, 3, prng);
  const Matrix a = random_matrix(2, 4, prng);
  expect_unary_gradient([&](GradientTape& t, Var x) { return t.matmul(x, t.constant(b)); },
                        random_matrix(2, 4, prng), random_matrix(2, 3, prng));
  expect_unary_gradient([&](GradientTape& t, Var x) { return t.matmul(t.constant(a), x); },
                        random_matrix(4, 3, prng), random_matrix(2, 3, prng));
}

TEST_F(PrimitiveGradient, AddScaleTranspose) {
  const Matrix c = random_matrix(3, 2, prng);
  expect_unary_gradient([&](GradientTape& t, Var x) { return t.add(x, t.constant(c)); },
                        random_matrix(3, 2, prng), random_matrix(3, 2, prng));
  expect_unary_gradient([](GradientTape& t, Var x) { return t.scale(x, -2.5); },
                        random_matrix(3, 2, prng), random_matrix(3, 2, prng));
  expect_unary_gradient([](GradientTape& t, Var x) { return t.transpose(x); },
                        random_matrix(3, 2, prng), random_matrix(2, 3, prng));
}

TEST_F(PrimitiveGradient, HadamardAndSilu) {
  const Matrix c = random_matrix(3, 3, prng);
  expect_unary_gradient([&](GradientTape& t, Var x) { return t.hadamard(x, t.constant(c)); },
                        random_matrix(3, 3, prng), random_matrix(3, 3, prng));
  expect_unary_gradient([](GradientTape& t, Var x) { return t.hadamard(x, x); },
                        random_matrix(3, 3, prng), random_matrix(3, 3, prng));
  expect_unary_gradient([](GradientTape& t, Var x) { return t.silu(x); },
                        random_matrix(3, 3, prng, -3, 3), random_matrix(3, 3, prng));
}

TEST_F(PrimitiveGradient, SoftmaxRows) {
  expect_unary_gradient([](GradientTape& t, Var x) { return t.softmax_rows(x, false); },
                        random_matrix(4, 5, prng, -2, 2), random_matrix(4, 5, prng));
  expect_unary_gradient([](GradientTape& t, Var x) { return t.softmax_rows(x, true); },
                        random_matrix(4, 4, prng, -2, 2), random_matrix(4, 4, prng));
}

TEST_F(PrimitiveGradient, LayerNorm) {
  expect_unary_gradient([](GradientTape& t, Var x) { return t.layer_norm(x); },
                        random_matrix(6, 3, prng, -2, 2), random_matrix(6, 3, prng));
}

TEST_F(PrimitiveGradient, EmbeddingWithRepeatedIds) {
  const std::vector<int> ids = {2, 0, 2, 3};
  expect_unary_gradient([&](GradientTape& t, Var x) { return t.embedding(x, ids); },
                        random_matrix(3, 5, prng), random_matrix(3, 4, prng));
}

TEST_F(PrimitiveGradient, SliceAndConcat) {
  expect_unary_gradient([](GradientTape& t, Var x) { return t.slice_rows(x, 1, 2); },
                        random_matrix(4, 3, prng), random_matrix(2, 3, prng));
  expect_unary_gradient(
      [](GradientTape& t, Var x) {
        const std::array<Var, 3> parts = {t.slice_rows(x, 2, 2), x, t.scale(x, 3.0)};
        return t.concat_rows(parts);
      },
      random_matrix(4, 3, prng), random_matrix(10, 3, prng));
}

TEST_F(PrimitiveGradient, CrossEntropyMeanSumAndMasked) {
  const std::vector<int> targets = {1, -1, 4, 0};
  const Matrix ones(1, 1, 1.0);
  for (Reduction red : {Reduction::Mean, Reduction::Sum}) {
    expect_unary_gradient(
        [&](GradientTape& t, Var x) { return t.cross_entropy(x, targets, red); },
        random_matrix(5, 4, prng, -3, 3), ones);
  }
}

TEST(CrossEntropy, ValueMatchesHandComputation) {
  GradientTape t(false);
  const Matrix z = Matrix::from_rows({{0.0, 1.0}, {1.0, 1.0}});
  const std::vector<int> targets = {1, -1};
  const double ce = t.value(t.cross_entropy(t.constant(z), targets)).data()[0];
  EXPECT_NEAR(ce, std::log(1.0 + std::exp(-1.0)), 1e-14);
}

TEST(Softmax, CausalMasksFuture) {
  GradientTape t(false);
  const Matrix p = t.value(t.softmax_rows(t.constant(Matrix(3, 3, 0.5)), true));
  EXPECT_DOUBLE_EQ(p(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(p(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(p(1, 0), 0.5);
  EXPECT_DOUBLE_EQ(p(1, 2), 0.0);
  EXPECT_NEAR(p(2, 2), 1.0 / 3.0, 1e-15);
}

TEST(Tape, NonRecordingMatchesRecordingValues) {
  Prng prng(9);
  const Matrix x = random_matrix(4, 3, prng);
  GradientTape rec, inf(false);
  auto run = [&](GradientTape& t) {
    const Var v = t.constant(x);
    return t.value(t.layer_norm(t.silu(t.matmul(t.transpose(v), v))));
  };
  EXPECT_EQ(run(rec), run(inf));
}
