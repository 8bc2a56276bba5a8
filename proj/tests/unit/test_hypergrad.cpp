#include <cmath>

#include <gtest/gtest.h>

#include "nhgd/hypergrad.hpp"
#include "nhgd/tasks.hpp"
#include "test_support.hpp"

using namespace nhgd;
using nhgd::testing::random_matrix;
using nhgd::testing::random_spd_with_condition;
using nhgd::testing::random_vector;

namespace {

HvpOperator dense(const DenseMatrix& h) {
  return [h](const DenseVector& x) { return matvec(h, x); };
}

double rel(const DenseVector& a, const DenseVector& b) { return norm2(a - b) / norm2(b); }

}  // namespace

TEST(AssembleNhgd, ZeroOuterThetaGradient) {
  Rng rng(1);
  const DenseVector gv = random_vector(rng, 3);
  const auto out = assemble_nhgd(gv, DenseVector(4), random_matrix(rng, 4, 3), random_matrix(rng, 4, 4));
  EXPECT_EQ(out.grad, gv);
}

TEST(AssembleNhgd, GaussianExactCurvatureGivesAnalytic) {
  auto task = make_random_gaussian_task(4, 3, 2);
  Rng rng(2);
  const DenseVector v = random_vector(rng, 3);
  const DenseVector opt = *task->analytic_inner_opt(v);
  const auto out = assemble_nhgd(task->outer_grad_v(v, opt), task->outer_grad_theta(v, opt),
                                 task->inner_cross_partial_full(v, opt), DenseMatrix::identity(4));
  const DenseVector expected = *task->analytic_hypergradient(v);
  EXPECT_LE(rel(out.grad, expected), 1e-12);
}

TEST(AssembleNhgd, MatchesDenseProduct) {
  Rng rng(3);
  const DenseVector gv = random_vector(rng, 3), gt = random_vector(rng, 4);
  const DenseMatrix l = random_matrix(rng, 4, 3), a = random_matrix(rng, 4, 4);
  const DenseVector brute = gv - matvec(matmul(l.transpose(), a), gt);
  EXPECT_LE(max_abs_diff(assemble_nhgd(gv, gt, l, a).grad, brute), 1e-12);
}

TEST(AssembleNhgd, DimensionMismatch) {
  EXPECT_THROW(assemble_nhgd(DenseVector(3), DenseVector(4), DenseMatrix(4, 2), DenseMatrix(4, 4)), DimensionError);
  EXPECT_THROW(assemble_implicit(DenseVector(3), DenseMatrix(4, 3), DenseVector(2)), DimensionError);
}

TEST(AssembleImplicit, ExamplesAndIdentity) {
  Rng rng(4);
  const DenseVector gv = random_vector(rng, 3), gt = random_vector(rng, 4);
  const DenseMatrix c = random_matrix(rng, 4, 3), a = random_matrix(rng, 4, 4);
  EXPECT_EQ(assemble_implicit(gv, c, DenseVector(4)).grad, gv);
  EXPECT_LE(max_abs_diff(assemble_implicit(gv, c, matvec(a, gt)).grad, assemble_nhgd(gv, gt, c, a).grad), 1e-12);

  auto task = make_random_gaussian_task(5, 2, 4);
  const DenseVector v{0.4, -0.3};
  const DenseVector opt = *task->analytic_inner_opt(v);
  const DenseVector x = spd_solve(task->inner_hessian_full(v, opt), task->outer_grad_theta(v, opt));
  const auto out = assemble_implicit(task->outer_grad_v(v, opt), task->inner_cross_partial_full(v, opt), x);
  EXPECT_LE(rel(out.grad, *task->analytic_hypergradient(v)), 1e-10);
}

TEST(Neumann, Examples) {
  const DenseVector b{0.3, -2.0};
  EXPECT_EQ(neumann_solve(dense(DenseMatrix::identity(2)), b, 0, 1.0).x, b);
  const auto out = neumann_solve(dense(DenseMatrix::diagonal(DenseVector{1.0, 2.0})), DenseVector{1.0, 1.0}, 200, 0.4);
  EXPECT_NEAR(out.x[0], 1.0, 1e-6);
  EXPECT_NEAR(out.x[1], 0.5, 1e-6);
}

TEST(Neumann, CountsOperatorCalls) {
  int calls = 0;
  const HvpOperator h = [&](const DenseVector& x) {
    ++calls;
    return x;
  };
  neumann_solve(h, DenseVector{1.0}, 7, 0.5);
  EXPECT_EQ(calls, 7);
}

TEST(Neumann, DivergenceDetected) {
  int calls = 0;
  const HvpOperator h = [&](const DenseVector& x) {
    ++calls;
    return x;
  };
  EXPECT_THROW(neumann_solve(h, DenseVector{1.0, 1.0}, 1000, 3.0), NumericalError);
  EXPECT_LE(calls, 50);
  EXPECT_THROW(neumann_solve(h, DenseVector{1.0}, -1, 1.0), Error);
  EXPECT_THROW(neumann_solve(h, DenseVector{1.0}, 1, 0.0), Error);
}

TEST(Cg, Examples) {
  const DenseVector b{1.0, -2.0, 3.0};
  const auto id = cg_solve(dense(DenseMatrix::identity(3)), b, 10, 1e-14);
  EXPECT_EQ(id.diagnostics.solver_iters, 1);
  EXPECT_LE(max_abs_diff(id.x, b), 1e-15);

  const auto diag = cg_solve(dense(DenseMatrix::diagonal(DenseVector{1, 2, 3, 4, 5})), DenseVector(5, 1.0), 5, 0.0);
  EXPECT_LE(diag.diagnostics.solver_iters, 5);
  EXPECT_LE(max_abs_diff(diag.x, DenseVector{1.0, 0.5, 1.0 / 3, 0.25, 0.2}), 1e-12);
}

TEST(Cg, RandomSpdResidual) {
  Rng rng(5);
  const DenseMatrix h = random_spd_with_condition(rng, 20, 50.0);
  const DenseVector b = random_vector(rng, 20);
  const auto out = cg_solve(dense(h), b, 200, 1e-10);
  EXPECT_LE(norm2(matvec(h, out.x) - b) / norm2(b), 1e-10);
}

TEST(Cg, RejectsIndefiniteOperator) {
  EXPECT_THROW(cg_solve(dense(DenseMatrix::diagonal(DenseVector{1.0, -1.0})), DenseVector{0.0, 1.0}, 10, 1e-12),
               NumericalError);
}

TEST(Amigo, Examples) {
  Rng rng(6);
  const DenseMatrix h = random_spd_with_condition(rng, 4, 5.0);
  const DenseVector b = random_vector(rng, 4);
  const DenseVector exact = spd_solve(h, b);
  EXPECT_LE(max_abs_diff(amigo_solve(dense(h), b, 10, 0.1, exact).x, exact), 1e-14);
  EXPECT_EQ(amigo_solve(dense(DenseMatrix::identity(2)), DenseVector{1.0, 2.0}, 1, 1.0, DenseVector(2)).x,
            (DenseVector{1.0, 2.0}));
  const auto out =
      amigo_solve(dense(DenseMatrix::diagonal(DenseVector{1.0, 2.0})), DenseVector{1.0, 1.0}, 300, 0.4, DenseVector(2));
  EXPECT_NEAR(out.x[0], 1.0, 1e-6);
  EXPECT_NEAR(out.x[1], 0.5, 1e-6);
}

TEST(Amigo, Divergence) {
  EXPECT_THROW(amigo_solve(dense(DenseMatrix::identity(2)), DenseVector{1.0, 1.0}, 200, 3.0, DenseVector(2)),
               NumericalError);
}

TEST(Solvers, CrossAgreementOnRandomSystems) {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t d = 3 + 3 * static_cast<std::size_t>(trial) % 28;
    const double cond = 2.0 + 98.0 * trial / 9.0;
    const DenseMatrix h = random_spd_with_condition(rng, d, cond);
    const DenseVector b = random_vector(rng, d);
    const double lmax = cond;  // eigenvalues span [1, cond]
    const DenseVector cg = cg_solve(dense(h), b, 1000, 1e-10).x;
    const DenseVector ne = neumann_solve(dense(h), b, 2000, 1.0 / lmax).x;
    const DenseVector am = amigo_solve(dense(h), b, 5000, 1.0 / lmax, DenseVector(d)).x;
    EXPECT_LE(rel(cg, ne), 1e-5) << "d=" << d << " cond=" << cond;
    EXPECT_LE(rel(cg, am), 1e-5) << "d=" << d << " cond=" << cond;
    EXPECT_LE(rel(ne, am), 1e-5) << "d=" << d << " cond=" << cond;
  }
}
