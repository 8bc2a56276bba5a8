#include "nhgd/inner_loop.hpp"

#include <cmath>

#include <fmt/core.h>

namespace nhgd {

StepSchedule::StepSchedule(ConstantStep c) : variant_(c) {
  if (!(c.eta > 0.0)) throw Error(fmt::format("constant step must be positive, got {}", c.eta));
}

StepSchedule::StepSchedule(DiminishingStep d) : variant_(d) {
  if (!(d.mu > 0.0)) throw Error("diminishing schedule needs mu > 0");
  if (!(d.lip >= d.mu)) throw Error(fmt::format("diminishing schedule needs lip >= mu ({} < {})", d.lip, d.mu));
}

double StepSchedule::rate(std::int64_t t) const {
  if (const auto* c = std::get_if<ConstantStep>(&variant_)) return c->eta;
  const auto& d = std::get<DiminishingStep>(variant_);
  const double q = 8.0 * d.lip * d.lip / (d.mu * d.mu);
  return 4.0 / (d.mu * (static_cast<double>(t) + q));
}

void project_to_ball(DenseVector& theta, double radius) {
  const double n = norm2(theta);
  if (n > radius) theta *= radius / n;
}

void sgd_step_in_place(InnerState& state, const DenseVector& grad, const StepSchedule& schedule) {
  if (grad.size() != state.theta.size()) {
    throw DimensionError(fmt::format("sgd_step: gradient has {} entries, theta {}", grad.size(), state.theta.size()));
  }
  if (!grad.all_finite()) throw NumericalError(fmt::format("sgd_step: non-finite gradient at t = {}", state.t));
  axpy(-schedule.rate(state.t), grad, state.theta);
  project_to_ball(state.theta, state.radius);
  ++state.t;
}

InnerState sgd_step(InnerState state, const DenseVector& grad, const StepSchedule& schedule) {
  sgd_step_in_place(state, grad, schedule);
  return state;
}

InnerState run_inner(const BilevelTask& task, const DenseVector& v, InnerState init, const StepSchedule& schedule,
                     const InnerRunOptions& options, const RngFactory& rngs,
                     const std::vector<InnerObserver>& observers) {
  if (options.steps < 1) throw Error("run_inner: T must be at least 1");
  if (options.batch_size < 1) throw Error("run_inner: batch size must be at least 1");
  InnerState state = std::move(init);
  DenseMatrix cross;
  // streams are indexed by the global step count, so a run split into chunks matches an unsplit one
  for (std::int64_t i = 0; i < options.steps; ++i) {
    const std::int64_t t = state.t;
    Rng rng = rngs.stream(Stream::inner, options.outer_index, static_cast<std::uint64_t>(t));
    const SampleBatch batch = task.sample(rng, options.batch_size);
    const DenseVector g = task.inner_grad_theta(v, state.theta, batch);
    if (options.compute_cross) cross = task.inner_cross_partial(v, state.theta, batch);
    for (const auto& obs : observers) obs(t, g, options.compute_cross ? &cross : nullptr);
    sgd_step_in_place(state, g, schedule);
  }
  return state;
}

}  // namespace nhgd
