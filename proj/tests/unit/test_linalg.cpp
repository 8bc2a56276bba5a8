#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "nhgd/linalg.hpp"
#include "nhgd/rng.hpp"
#include "test_support.hpp"

using namespace nhgd;
using nhgd::testing::random_spd;
using nhgd::testing::random_spd_with_condition;
using nhgd::testing::random_vector;

namespace {

DenseVector unit(DenseVector v) {
  v *= 1.0 / norm2(v);
  return v;
}

DenseMatrix damped_seed(const DenseVector& g, double eps) {
  DenseMatrix m = outer_product(g, g);
  for (std::size_t i = 0; i < m.rows(); ++i) m(i, i) += eps;
  return m;
}

}  // namespace

TEST(SmAverage, ZeroGradientRescales) {
  const DenseMatrix a = sm_avg_inverse_update(DenseMatrix::identity(2), DenseVector{0.0, 0.0}, 1);
  EXPECT_EQ(a, 2.0 * DenseMatrix::identity(2));
}

TEST(SmAverage, ScalarHandComputation) {
  const DenseMatrix a = sm_avg_inverse_update(DenseMatrix::from_rows({{1.0}}), DenseVector{1.0}, 1);
  EXPECT_NEAR(a(0, 0), 1.0, 1e-15);
}

TEST(SmAverage, FiftyUnitGradientsMatchDirectInverse) {
  Rng rng(11);
  const double eps = 1e-3;
  const std::size_t d = 5;
  DenseVector g0 = unit(random_vector(rng, d));
  DenseMatrix a = direct_inverse(damped_seed(g0, eps));
  DenseMatrix sum = damped_seed(g0, eps);
  for (std::int64_t t = 1; t < 50; ++t) {
    const DenseVector g = unit(random_vector(rng, d));
    sm_avg_inverse_update_in_place(a, g, t);
    sum += outer_product(g, g);
  }
  const DenseMatrix expected = direct_inverse((1.0 / 50.0) * sum);
  EXPECT_LE(max_abs_diff(a, expected), 1e-10);
}

TEST(SmAverage, RandomStreamsStayExactSymmetricAndDefinite) {
  Rng rng(12);
  const double eps = 1e-3;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = 1 + trial % 10;
    const std::int64_t steps = 20 + 9 * trial;
    DenseVector g0 = random_vector(rng, d);
    DenseMatrix a = direct_inverse(damped_seed(g0, eps));
    DenseMatrix sum = damped_seed(g0, eps);
    for (std::int64_t t = 1; t < steps; ++t) {
      const DenseVector g = random_vector(rng, d);
      sm_avg_inverse_update_in_place(a, g, t);
      sum += outer_product(g, g);
      ASSERT_EQ(max_asymmetry(a), 0.0);
      ASSERT_TRUE(is_positive_definite(a));
    }
    const DenseMatrix expected = direct_inverse((1.0 / static_cast<double>(steps)) * sum);
    EXPECT_LE(spectral_norm_estimate(a - expected), 1e-8) << "d=" << d << " T=" << steps;
  }
}

TEST(SmAverage, RejectsBadInput) {
  const DenseMatrix i2 = DenseMatrix::identity(2);
  EXPECT_THROW(sm_avg_inverse_update(i2, DenseVector{1.0, 0.0}, 0), Error);
  EXPECT_THROW(sm_avg_inverse_update(i2, DenseVector{std::nan(""), 0.0}, 1), NumericalError);
  EXPECT_THROW(sm_avg_inverse_update(i2, DenseVector{1.0}, 1), DimensionError);
  // A = -I makes the implied matrix indefinite: 1 + g^T A g / t = 1 - 4 < 0
  EXPECT_THROW(sm_avg_inverse_update(-1.0 * i2, DenseVector{2.0, 0.0}, 1), NumericalError);
  DenseMatrix bad = i2;
  bad(0, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(sm_avg_inverse_update(bad, DenseVector{1.0, 1.0}, 1), NumericalError);
}

TEST(SmSmoothed, BetaOneIsIdentityMap) {
  Rng rng(13);
  const DenseMatrix a = random_spd_with_condition(rng, 4, 10.0);
  const DenseMatrix out = sm_smoothed_inverse_update(a, random_vector(rng, 4), 1.0);
  EXPECT_LE(max_abs_diff(out, a), 1e-15);
}

TEST(SmSmoothed, ScalarHandComputation) {
  const DenseMatrix a = sm_smoothed_inverse_update(DenseMatrix::from_rows({{1.0}}), DenseVector{1.0}, 0.5);
  EXPECT_NEAR(a(0, 0), 1.0, 1e-15);
}

TEST(SmSmoothed, TwoHundredGradientsMatchEmaInverse) {
  Rng rng(14);
  const std::size_t d = 8;
  const double beta = 0.9;
  DenseMatrix a = DenseMatrix::identity(d);
  DenseMatrix ema = DenseMatrix::identity(d);
  for (int t = 0; t < 200; ++t) {
    const DenseVector g = random_vector(rng, d);
    sm_smoothed_inverse_update_in_place(a, g, beta);
    ema = beta * ema + (1.0 - beta) * outer_product(g, g);
  }
  EXPECT_LE(max_abs_diff(a, direct_inverse(ema)), 1e-9);
}

TEST(SmSmoothed, InverseOfUpdateIsConvexCombination) {
  Rng rng(15);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t d = 1 + trial % 10;
    const double beta = 0.05 + 0.9 * (trial % 7) / 6.0;
    const DenseMatrix a = random_spd_with_condition(rng, d, 20.0);
    const DenseVector g = random_vector(rng, d);
    const DenseMatrix out = sm_smoothed_inverse_update(a, g, beta);
    const DenseMatrix expected = beta * direct_inverse(a) + (1.0 - beta) * outer_product(g, g);
    EXPECT_LE(max_abs_diff(direct_inverse(out), expected), 1e-9 * std::max(1.0, frobenius_norm(expected)));
    EXPECT_EQ(max_asymmetry(out), 0.0);
    EXPECT_TRUE(is_positive_definite(out));
  }
}

TEST(SmSmoothed, RejectsBetaOutsideRange) {
  const DenseMatrix i2 = DenseMatrix::identity(2);
  EXPECT_THROW(sm_smoothed_inverse_update(i2, DenseVector{1.0, 0.0}, 0.0), Error);
  EXPECT_THROW(sm_smoothed_inverse_update(i2, DenseVector{1.0, 0.0}, 1.5), Error);
}

TEST(DirectInverse, Examples) {
  EXPECT_EQ(direct_inverse(DenseMatrix::identity(3)), DenseMatrix::identity(3));
  const DenseMatrix inv = direct_inverse(DenseMatrix::diagonal(DenseVector{2.0, 4.0}));
  EXPECT_LE(max_abs_diff(inv, DenseMatrix::diagonal(DenseVector{0.5, 0.25})), 1e-15);
}

TEST(DirectInverse, RandomSpdResidual) {
  Rng rng(16);
  const DenseMatrix m = random_spd_with_condition(rng, 10, 100.0);
  const DenseMatrix r = matmul(m, direct_inverse(m)) - DenseMatrix::identity(10);
  EXPECT_LE(frobenius_norm(r), 1e-10);
}

TEST(DirectInverse, RejectsSingular) {
  EXPECT_THROW(direct_inverse(DenseMatrix::from_rows({{1.0, 2.0}, {2.0, 4.0}})), NumericalError);
  EXPECT_THROW(direct_inverse(DenseMatrix(2, 3)), DimensionError);
}

TEST(Basics, Examples) {
  EXPECT_NEAR(spectral_norm_estimate(DenseMatrix::diagonal(DenseVector{3.0, 1.0}), 100), 3.0, 0.03);
  EXPECT_EQ(matvec(DenseMatrix::identity(2), DenseVector{1.0, 2.0}), (DenseVector{1.0, 2.0}));
  EXPECT_EQ(outer_product(DenseVector{1.0, 0.0}, DenseVector{0.0, 1.0}), DenseMatrix::from_rows({{0.0, 1.0}, {0.0, 0.0}}));
  DenseVector y{1.0, 1.0};
  axpy(2.0, DenseVector{1.0, -1.0}, y);
  EXPECT_EQ(y, (DenseVector{3.0, -1.0}));
  EXPECT_DOUBLE_EQ(norm2(DenseVector{3.0, 4.0}), 5.0);
}

TEST(Basics, SpectralNormWithinOnePercent) {
  Rng rng(17);
  for (int trial = 0; trial < 10; ++trial) {
    const DenseMatrix m = random_spd(rng, {5.0, 2.0, 1.0, 0.5});
    EXPECT_NEAR(spectral_norm_estimate(m, 100), 5.0, 0.05);
  }
}

TEST(Basics, MatmulAndTransposeAgree) {
  Rng rng(18);
  const DenseMatrix a = nhgd::testing::random_matrix(rng, 3, 4);
  const DenseVector x = random_vector(rng, 3);
  EXPECT_LE(max_abs_diff(matvec_transposed(a, x), matvec(a.transpose(), x)), 1e-14);
  EXPECT_LE(max_abs_diff(matmul(a.transpose(), DenseMatrix::identity(3)), a.transpose()), 0.0);
}

TEST(Basics, DimensionMismatch) {
  EXPECT_THROW(matvec(DenseMatrix(2, 3), DenseVector(2)), DimensionError);
  EXPECT_THROW(matmul(DenseMatrix(2, 3), DenseMatrix(2, 3)), DimensionError);
  EXPECT_THROW(dot(DenseVector(2), DenseVector(3)), DimensionError);
  EXPECT_THROW(DenseMatrix(2, 2, std::vector<double>{1.0}), DimensionError);
}
