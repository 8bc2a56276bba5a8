#include <cmath>

#include <gtest/gtest.h>

#include "nhgd/drivers.hpp"
#include "nhgd/oracles.hpp"
#include "test_support.hpp"

using namespace nhgd;

namespace {

MethodConfig base_config(Method m) {
  MethodConfig c;
  c.method = m;
  c.alpha = 0.5;
  c.inner_t = 20;
  c.batch_size = 4;
  c.schedule = StepSchedule(ConstantStep{0.3});
  c.k_outer = 40;
  c.seed = 11;
  c.record_wall_time = false;
  c.efim.per_sample_scaling = true;  // minibatch gradients have covariance H / b
  return c;
}

std::vector<Method> all_methods() {
  return {NhgdMethod{},
          NeumannMethod{10, 0.5},
          CgMethod{10, 1e-10},
          AmigoMethod{10, 0.5},
          StocBiOMethod{5, 0.5, 1e-2, 2},
          TtsaMethod{5, 0.5, 0.0, 0.0},
          SobaMethod{0.5, 0.0, 0.0}};
}

/// Phi minimum for the Gaussian task, from exact hypergradient descent.
double gaussian_min(const BilevelTask& task) {
  InnerSolveOptions o;
  o.kind = InnerSolverKind::newton;
  const auto r = exact_hypergradient_descent(task, task.initial_outer(), 0.5, 400, o);
  return r.outer_losses.back();
}

}  // namespace

TEST(Drivers, MethodNames) {
  EXPECT_EQ(method_name(NhgdMethod{}), "NHGD");
  EXPECT_EQ(method_name(NeumannMethod{10, 0.1}), "Neumann10");
  EXPECT_EQ(method_name(CgMethod{5, 1e-10}), "CG5");
  MethodConfig c;
  c.label = "mine";
  EXPECT_EQ(c.display_label(), "mine");
}

TEST(Drivers, ScheduleHelpers) {
  const StocBiOMethod m{10, 0.01, 1e-4, 100};
  EXPECT_EQ(stocbio_batch_size(m, 0), 1000u);
  EXPECT_EQ(stocbio_batch_size(m, 5), static_cast<std::size_t>(std::ceil(1000.0 * std::pow(1.0 - 1e-6, 5))));
  EXPECT_EQ(ttsa_neumann_iterations(10, 0), 10);
  EXPECT_EQ(ttsa_neumann_iterations(10, 3), 20);
}

TEST(Drivers, ValidateRejectsBadConfigs) {
  MethodConfig c = base_config(NhgdMethod{});
  c.alpha = 0.0;
  EXPECT_THROW(c.validate(), Error);
  c = base_config(NhgdMethod{});
  c.inner_t = 0;
  EXPECT_THROW(c.validate(), Error);
  c = base_config(NeumannMethod{-1, 0.1});
  EXPECT_THROW(c.validate(), Error);
  c = base_config(NhgdMethod{});
  c.k_outer = -1;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Drivers, ZeroOuterIterations) {
  auto task = make_random_gaussian_task(3, 2, 1);
  for (const Method& m : all_methods()) {
    MethodConfig c = base_config(m);
    c.k_outer = 0;
    const RunResult r = run_method(*task, c);
    EXPECT_TRUE(r.records.empty());
    EXPECT_EQ(r.final_v, task->initial_outer());
  }
}

TEST(Drivers, SameSeedSameRecords) {
  auto task = make_random_gaussian_task(4, 3, 2);
  for (const Method& m : all_methods()) {
    MethodConfig c = base_config(m);
    c.k_outer = 8;
    const RunResult a = run_method(*task, c);
    const RunResult b = run_method(*task, c);
    ASSERT_EQ(a.records.size(), b.records.size());
    for (std::size_t i = 0; i < a.records.size(); ++i) {
      EXPECT_EQ(max_record_difference(a.records[i], b.records[i]), 0.0) << method_name(m);
      EXPECT_EQ(a.records[i].wall_nanos, 0);
    }
    EXPECT_EQ(a.final_v, b.final_v);
  }
}

TEST(Drivers, EvalEverySubsamplesRecords) {
  auto task = make_random_gaussian_task(3, 2, 3);
  MethodConfig c = base_config(NhgdMethod{});
  c.k_outer = 10;
  c.eval_every = 4;
  const RunResult r = run_nhgd(*task, c);
  std::vector<std::int64_t> ks;
  for (const auto& rec : r.records) ks.push_back(rec.k);
  EXPECT_EQ(ks, (std::vector<std::int64_t>{0, 4, 8, 9}));
}

TEST(Drivers, SamplesUsedIsCumulative) {
  auto task = make_random_gaussian_task(3, 2, 4);
  MethodConfig c = base_config(NhgdMethod{});
  c.k_outer = 5;
  const RunResult r = run_nhgd(*task, c);
  for (std::size_t i = 0; i < r.records.size(); ++i) {
    // T minibatches per outer step, plus m endpoint batches when that mode is on
    EXPECT_EQ(r.records[i].samples_used, static_cast<std::int64_t>((i + 1) * 20 * 4));
  }
}

TEST(Drivers, EveryMethodReducesGaussianObjective) {
  auto task = make_random_gaussian_task(4, 3, 5, 0.5);
  const double phi_min = gaussian_min(*task);
  InnerSolveOptions o;
  o.kind = InnerSolverKind::newton;
  const double phi0 = outer_objective(*task, task->initial_outer(), o);
  for (const Method& m : all_methods()) {
    MethodConfig c = base_config(m);
    // single-loop methods take one inner step per outer step, so give them more outer steps
    c.k_outer = std::holds_alternative<SobaMethod>(m) ? 2000 : 200;
    const RunResult r = run_method(*task, c);
    const double gap = outer_objective(*task, r.final_v, o) - phi_min;
    EXPECT_LE(gap, 0.05 * (phi0 - phi_min)) << method_name(m);
  }
}

TEST(Drivers, NhgdTracksEstimatorErrors) {
  auto task = make_random_gaussian_task(3, 2, 6);
  MethodConfig c = base_config(NhgdMethod{});
  c.track_errors = true;
  c.inner_t = 400;
  c.k_outer = 5;
  const RunResult r = run_nhgd(*task, c);
  for (const auto& rec : r.records) {
    ASSERT_TRUE(rec.efim_err.has_value());
    ASSERT_TRUE(rec.crosspartial_err.has_value());
    EXPECT_LE(*rec.crosspartial_err, 1e-12);  // the cross partial is constant, B
    EXPECT_LT(*rec.efim_err, 1.0);
  }
}

TEST(Drivers, EndpointModeAccountsSamples) {
  auto task = make_random_gaussian_task(3, 2, 7);
  MethodConfig c = base_config(NhgdMethod{});
  c.cross_partial.mode = CrossPartialMode::endpoint;
  c.cross_partial.m = 3;
  c.k_outer = 4;
  const RunResult r = run_nhgd(*task, c);
  EXPECT_EQ(r.records.back().samples_used, 4 * (20 + 3) * 4);
}

TEST(Drivers, HooksSeeEveryOuterIteration) {
  auto task = make_random_gaussian_task(3, 2, 8);
  MethodConfig c = base_config(NhgdMethod{});
  c.k_outer = 6;
  std::vector<std::int64_t> ks;
  DenseVector last_v;
  RunHooks hooks;
  hooks.on_outer = [&](std::int64_t k, const DenseVector& v, const DenseVector&, const DenseVector& hg) {
    ks.push_back(k);
    last_v = v - c.alpha * hg;
  };
  const RunResult r = run_nhgd(*task, c, hooks);
  EXPECT_EQ(ks.size(), 6u);
  EXPECT_LE(max_abs_diff(last_v, r.final_v), 1e-15);
}
