#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "nhgd/inner_loop.hpp"
#include "test_support.hpp"

using namespace nhgd;

namespace {

std::unique_ptr<BilevelTask> gaussian(std::size_t d2, std::size_t d1, std::uint64_t seed) {
  return make_random_gaussian_task(d2, d1, seed);
}

double median(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const std::size_t n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

}  // namespace

TEST(Schedule, DiminishingFormula) {
  const StepSchedule s(DiminishingStep{2.0, 2.0});
  EXPECT_DOUBLE_EQ(s.rate(0), 0.25);
  EXPECT_DOUBLE_EQ(s.rate(8), 0.125);
  for (int t = 0; t < 100; ++t) EXPECT_LT(s.rate(t + 1), s.rate(t));
}

TEST(Schedule, ConstantAndValidation) {
  EXPECT_DOUBLE_EQ(StepSchedule(ConstantStep{0.01}).rate(123), 0.01);
  EXPECT_THROW(StepSchedule(ConstantStep{0.0}), Error);
  EXPECT_THROW(StepSchedule(DiminishingStep{2.0, 1.0}), Error);
  EXPECT_THROW(StepSchedule(DiminishingStep{0.0, 1.0}), Error);
}

TEST(SgdStep, ZeroGradientKeepsTheta) {
  InnerState s{DenseVector{0.5, -0.25}, 3, 10.0};
  const InnerState out = sgd_step(s, DenseVector{0.0, 0.0}, StepSchedule(ConstantStep{0.1}));
  EXPECT_EQ(out.theta, s.theta);
  EXPECT_EQ(out.t, 4);
}

TEST(SgdStep, RadialProjection) {
  InnerState s{DenseVector{0.5, 0.0}, 0, 1.0};
  // 0.5 - 1.0 * (-1.5) = 2 -> projected to 1
  const InnerState out = sgd_step(s, DenseVector{-1.5, 0.0}, StepSchedule(ConstantStep{1.0}));
  EXPECT_EQ(out.theta, (DenseVector{1.0, 0.0}));
}

TEST(SgdStep, RejectsNonFiniteGradient) {
  InnerState s{DenseVector{0.0}, 0, 1.0};
  EXPECT_THROW(sgd_step(s, DenseVector{std::nan("")}, StepSchedule(ConstantStep{1.0})), NumericalError);
  EXPECT_THROW(sgd_step(s, DenseVector{1.0, 2.0}, StepSchedule(ConstantStep{1.0})), DimensionError);
}

TEST(RunInner, SingleStepSingleCallback) {
  auto task = gaussian(3, 2, 1);
  int calls = 0;
  InnerRunOptions opts;
  opts.steps = 1;
  opts.compute_cross = true;
  const InnerObserver obs = [&](std::int64_t t, const DenseVector& g, const DenseMatrix* b) {
    EXPECT_EQ(t, 0);
    EXPECT_EQ(g.size(), 3u);
    ASSERT_NE(b, nullptr);
    EXPECT_EQ(b->rows(), 3u);
    ++calls;
  };
  run_inner(*task, DenseVector(2), InnerState{DenseVector(3), 0, 1e6}, StepSchedule(ConstantStep{0.1}), opts,
            RngFactory(5), {obs});
  EXPECT_EQ(calls, 1);
}

TEST(RunInner, ObserverSeesPreUpdateDerivatives) {
  auto task = gaussian(3, 2, 2);
  const DenseVector v{0.3, -0.7};
  const StepSchedule sched(DiminishingStep{1.0, 2.0});
  const RngFactory rngs(17);
  InnerRunOptions opts;
  opts.steps = 25;
  opts.batch_size = 4;
  opts.outer_index = 3;
  std::vector<DenseVector> seen;
  run_inner(*task, v, InnerState{DenseVector(3, 1.0), 0, 1e6}, sched, opts, rngs,
            {[&](std::int64_t, const DenseVector& g, const DenseMatrix*) { seen.push_back(g); }});
  // replay by hand
  DenseVector theta(3, 1.0);
  for (std::int64_t t = 0; t < 25; ++t) {
    Rng rng = rngs.stream(Stream::inner, 3, static_cast<std::uint64_t>(t));
    const DenseVector g = task->inner_grad_theta(v, theta, task->sample(rng, 4));
    EXPECT_EQ(g, seen[static_cast<std::size_t>(t)]);
    axpy(-sched.rate(t), g, theta);
  }
}

TEST(RunInner, DeterministicAndProjected) {
  auto task = gaussian(4, 2, 3);
  InnerRunOptions opts;
  opts.steps = 200;
  opts.batch_size = 2;
  const double radius = 0.5;
  std::vector<double> norms;
  auto run = [&] {
    return run_inner(*task, DenseVector{2.0, -1.0}, InnerState{DenseVector(4), 0, radius},
                     StepSchedule(ConstantStep{0.3}), opts, RngFactory(9),
                     {[&](std::int64_t, const DenseVector&, const DenseMatrix*) {}});
  };
  const InnerState a = run();
  const InnerState b = run();
  EXPECT_EQ(a.theta, b.theta);
  EXPECT_EQ(a.t, 200);
  // projection holds after every step
  InnerState s{DenseVector(4), 0, radius};
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    sgd_step_in_place(s, nhgd::testing::random_vector(rng, 4, 5.0), StepSchedule(ConstantStep{0.3}));
    ASSERT_LE(norm2(s.theta), radius * (1.0 + 1e-15));
  }
}

TEST(RunInner, ErrorFollowsOneOverTEnvelope) {
  auto task = gaussian(2, 2, 4);
  const DenseVector v{0.5, 0.5};
  const DenseVector opt = *task->analytic_inner_opt(v);
  const StepSchedule sched(DiminishingStep{1.0, 1.0});
  auto median_error = [&](std::int64_t steps) {
    std::vector<double> errs;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      InnerRunOptions opts;
      opts.steps = steps;
      const InnerState s = run_inner(*task, v, InnerState{DenseVector(2), 0, 1e6}, sched, opts, RngFactory(seed));
      const double e = norm2(s.theta - opt);
      errs.push_back(e * e);
    }
    return median(errs);
  };
  const double c = median_error(1000) * 1000.0;  // fitted envelope constant
  EXPECT_LE(median_error(10000), 10.0 * c / 10000.0);
}

TEST(RunInner, RejectsZeroSteps) {
  auto task = gaussian(2, 2, 5);
  InnerRunOptions opts;
  opts.steps = 0;
  EXPECT_THROW(run_inner(*task, DenseVector(2), InnerState{DenseVector(2), 0, 1.0}, StepSchedule{}, opts, RngFactory(1)),
               Error);
}
