#pragma once

#include <cstdint>
#include <functional>
#include <variant>
#include <vector>

#include "nhgd/tasks.hpp"

namespace nhgd {

struct ConstantStep {
  double eta = 0.01;
};

/// eta_t = 4 / (mu (t + 8 L^2 / mu^2))
struct DiminishingStep {
  double mu = 1.0;
  double lip = 1.0;
};

class StepSchedule {
 public:
  StepSchedule() = default;
  StepSchedule(ConstantStep c);
  StepSchedule(DiminishingStep d);

  double rate(std::int64_t t) const;
  bool is_constant() const { return std::holds_alternative<ConstantStep>(variant_); }
  const std::variant<ConstantStep, DiminishingStep>& variant() const { return variant_; }

 private:
  std::variant<ConstantStep, DiminishingStep> variant_{ConstantStep{}};
};

struct InnerState {
  DenseVector theta;
  std::int64_t t = 0;
  double radius = 1e6;
};

/// Radial projection onto {|theta| <= radius}.
void project_to_ball(DenseVector& theta, double radius);

InnerState sgd_step(InnerState state, const DenseVector& grad, const StepSchedule& schedule);
void sgd_step_in_place(InnerState& state, const DenseVector& grad, const StepSchedule& schedule);

/// Called with the derivatives at theta_t before the step consumes them.
/// `cross` is null unless run_inner was asked to compute cross-partials.
using InnerObserver = std::function<void(std::int64_t t, const DenseVector& g, const DenseMatrix* cross)>;

struct InnerRunOptions {
  std::int64_t steps = 1;
  std::size_t batch_size = 1;
  bool compute_cross = false;
  std::uint64_t outer_index = 0;  // k, selects the sample stream
};

/// T projected SGD steps from `init`. Step t (counted from init.t) draws its batch from
/// rngs.stream(Stream::inner, k, t).
InnerState run_inner(const BilevelTask& task, const DenseVector& v, InnerState init, const StepSchedule& schedule,
                     const InnerRunOptions& options, const RngFactory& rngs,
                     const std::vector<InnerObserver>& observers = {});

}  // namespace nhgd
