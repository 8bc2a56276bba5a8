#include <cmath>
#include <fstream>

#include <gtest/gtest.h>

#include "nhgd/oracles.hpp"
#include "nhgd/softmax_tasks.hpp"
#include "test_support.hpp"

using namespace nhgd;

namespace {

std::unique_ptr<DataCleaningTask> small_cleaning(std::uint64_t seed = 3) {
  DataCleaningParams p;
  p.n_train = 40;
  p.d_feat = 3;
  p.n_classes = 2;
  p.lambda_reg = 0.05;
  p.rng_seed = seed;
  p.val_fraction = 0.25;
  p.test_fraction = 0.25;
  return make_data_cleaning_task(p);
}

DenseVector interior_weights(const BilevelTask& task, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.1, 0.9);
  DenseVector v(task.metadata().d_outer);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = u(rng);
  return v;
}

InnerSolveOptions tight() {
  InnerSolveOptions o;
  o.kind = InnerSolverKind::newton;
  o.tol = 1e-13;
  return o;
}

}  // namespace

TEST(LoglogSlope, PowerLaws) {
  std::vector<std::pair<double, double>> xy;
  for (double x : {1.0, 10.0, 100.0, 1000.0}) xy.emplace_back(x, 3.0 / x);
  const SlopeFit fit = fit_loglog_slope(xy);
  EXPECT_NEAR(fit.slope, -1.0, 1e-12);
  EXPECT_NEAR(std::exp(fit.intercept), 3.0, 1e-10);
  EXPECT_NEAR(fit.r2, 1.0, 1e-12);
  EXPECT_NEAR(fit.ci95, 0.0, 1e-10);

  xy.clear();
  for (double x : {2.0, 4.0, 8.0, 16.0, 32.0}) xy.emplace_back(x, x * x * (1.0 + 0.01 * std::sin(x)));
  const SlopeFit noisy = fit_loglog_slope(xy);
  EXPECT_NEAR(noisy.slope, 2.0, 0.02);
  EXPECT_GT(noisy.ci95, 0.0);
  EXPECT_LT(noisy.r2, 1.0);
}

TEST(LoglogSlope, Rejections) {
  EXPECT_THROW(fit_loglog_slope({{1.0, 1.0}, {2.0, 2.0}}), Error);
  EXPECT_THROW(fit_loglog_slope({{1.0, 1.0}, {2.0, 0.0}, {3.0, 1.0}}), Error);
  EXPECT_THROW(fit_loglog_slope({{1.0, 1.0}, {1.0, 2.0}, {1.0, 3.0}}), Error);
}

TEST(InnerSolver, GaussianMatchesClosedForm) {
  auto task = make_random_gaussian_task(6, 3, 1);
  const DenseVector v{0.2, -0.4, 1.0};
  for (auto kind : {InnerSolverKind::gradient, InnerSolverKind::newton}) {
    InnerSolveOptions o;
    o.kind = kind;
    const InnerSolveResult r = solve_inner_deterministic(*task, v, o);
    EXPECT_LE(max_abs_diff(r.theta, *task->analytic_inner_opt(v)), 1e-9);
    EXPECT_LE(r.grad_norm, 1e-10);
  }
}

TEST(InnerSolver, SoftmaxGradientAndNewtonAgree) {
  auto task = small_cleaning();
  const DenseVector v = interior_weights(*task, 1);
  InnerSolveOptions g;
  g.tol = 1e-11;
  const DenseVector a = solve_inner_deterministic(*task, v, g).theta;
  const DenseVector b = solve_inner_deterministic(*task, v, tight()).theta;
  EXPECT_LE(max_abs_diff(a, b), 1e-8);
  EXPECT_LE(norm2(task->inner_grad_full(v, b)), 1e-12);
}

TEST(InnerSolver, IterationCapThrows) {
  auto task = small_cleaning();
  InnerSolveOptions o;
  o.max_iters = 1;
  o.tol = 1e-14;
  EXPECT_THROW(solve_inner_deterministic(*task, task->initial_outer(), o), NumericalError);
}

TEST(FiniteDifference, GaussianAgreesWithClosedForm) {
  auto task = make_random_gaussian_task(5, 4, 2);
  const DenseVector v{0.3, 0.1, -0.2, 0.5};
  const DenseVector fd = fd_hypergradient(*task, v, 1e-4, tight());
  const DenseVector ref = *task->analytic_hypergradient(v);
  EXPECT_LE(norm2(fd - ref) / norm2(ref), 1e-6);
}

TEST(FiniteDifference, DataCleaningAgreesWithImplicitFormula) {
  auto task = small_cleaning();
  for (std::uint64_t s = 0; s < 3; ++s) {
    const DenseVector v = interior_weights(*task, 10 + s);
    const DenseVector theta = solve_inner_deterministic(*task, v, tight()).theta;
    const DenseVector exact = exact_hypergradient(*task, v, theta);
    const DenseVector fd = fd_hypergradient(*task, v, 1e-4, tight());
    EXPECT_LE(norm2(fd - exact) / norm2(exact), 1e-6);
  }
}

TEST(FiniteDifference, CentralDifferenceIsSecondOrder) {
  auto task = small_cleaning(5);
  const DenseVector v = interior_weights(*task, 3);
  const DenseVector exact = exact_hypergradient(*task, v, solve_inner_deterministic(*task, v, tight()).theta);
  // weights stay inside (0, 1) for these steps, so Phi is smooth along every axis
  const auto sweep = fd_step_sweep(*task, v, exact, {4e-2, 2e-2, 1e-2, 5e-3}, tight());
  std::vector<std::pair<double, double>> xy;
  for (const auto& p : sweep) xy.emplace_back(p.h, p.error);
  EXPECT_NEAR(fit_loglog_slope(xy).slope, 2.0, 0.25);
}

TEST(ExactDescent, GaussianDecreasesMonotonically) {
  auto task = make_random_gaussian_task(4, 2, 7);
  const ExactDescentResult r = exact_hypergradient_descent(*task, task->initial_outer(), 0.5, 30, tight());
  ASSERT_EQ(r.outer_losses.size(), 30u);
  for (std::size_t k = 1; k < r.outer_losses.size(); ++k) EXPECT_LE(r.outer_losses[k], r.outer_losses[k - 1] + 1e-15);
  EXPECT_LT(norm2(*task->analytic_hypergradient(r.final_v)),
            0.5 * norm2(*task->analytic_hypergradient(task->initial_outer())));
}

TEST(Golden, DataCleaningFiniteDifference) {
  const auto path = std::filesystem::path(NHGD_TEST_DATA_DIR) / "golden" / "data_cleaning_fd.json";
  std::ifstream in(path);
  ASSERT_TRUE(in) << "missing " << path;
  const nlohmann::json golden = nlohmann::json::parse(in);
  auto task = make_task_from_json(golden.at("task"));
  const DenseVector v(golden.at("v").get<std::vector<double>>());
  const DenseVector expected(golden.at("hypergradient").get<std::vector<double>>());
  const DenseVector theta = solve_inner_deterministic(*task, v, tight()).theta;
  const DenseVector exact = exact_hypergradient(*task, v, theta);
  EXPECT_LE(norm2(exact - expected) / norm2(expected), 1e-6);
}
