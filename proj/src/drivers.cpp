#include "nhgd/drivers.hpp"

#include <chrono>
#include <cmath>

#include <fmt/core.h>

namespace nhgd {

namespace {

using Clock = std::chrono::steady_clock;

std::int64_t nanos_between(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(b - a).count();
}

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

void emit(const RunHooks& hooks, const std::string& event) {
  if (hooks.on_event) hooks.on_event(event);
}

double decayed(double base, std::int64_t k, double exponent) {
  return exponent == 0.0 ? base : base * std::pow(1.0 + static_cast<double>(k), -exponent);
}

}  // namespace

std::string method_name(const Method& method) {
  return std::visit(Overloaded{[](const NhgdMethod&) { return std::string("NHGD"); },
                               [](const NeumannMethod& m) { return fmt::format("Neumann{}", m.k); },
                               [](const CgMethod& m) { return fmt::format("CG{}", m.k); },
                               [](const AmigoMethod&) { return std::string("AmIGO"); },
                               [](const StocBiOMethod&) { return std::string("stocBiO"); },
                               [](const TtsaMethod&) { return std::string("TTSA"); },
                               [](const SobaMethod&) { return std::string("SOBA"); }},
                    method);
}

void MethodConfig::validate() const {
  if (!(alpha > 0.0)) throw Error(fmt::format("alpha must be positive, got {}", alpha));
  if (inner_t < 1) throw Error("inner_T must be at least 1");
  if (batch_size < 1) throw Error("batch_size must be at least 1");
  if (k_outer < 0) throw Error("K_outer must be nonnegative");
  if (eval_every < 1) throw Error("eval_every must be at least 1");
  if (cross_partial.m < 1) throw Error("cross-partial m must be at least 1");
  std::visit(Overloaded{[](const NhgdMethod&) {},
                        [](const NeumannMethod& m) {
                          if (m.k < 0 || !(m.phi > 0.0)) throw Error("Neumann needs K >= 0 and phi > 0");
                        },
                        [](const CgMethod& m) {
                          if (m.k < 0 || !(m.tol >= 0.0)) throw Error("CG needs K >= 0 and tol >= 0");
                        },
                        [](const AmigoMethod& m) {
                          if (m.k < 0 || !(m.step > 0.0)) throw Error("AmIGO needs K >= 0 and step > 0");
                        },
                        [](const StocBiOMethod& m) {
                          if (m.k < 0 || !(m.phi > 0.0) || m.b < 1 || !(m.mu_s >= 0.0) || m.phi * m.mu_s >= 1.0)
                            throw Error("stocBiO needs K >= 0, phi > 0, B >= 1 and 0 <= phi mu_s < 1");
                        },
                        [](const TtsaMethod& m) {
                          if (m.k < 1 || !(m.phi > 0.0)) throw Error("TTSA needs K >= 1 and phi > 0");
                        },
                        [](const SobaMethod& m) {
                          if (!(m.aux_step > 0.0)) throw Error("SOBA needs aux_step > 0");
                        }},
             method);
}

double max_record_difference(const RunRecord& a, const RunRecord& b) {
  auto diff = [](double x, double y) {
    if (std::isnan(x) && std::isnan(y)) return 0.0;
    return std::abs(x - y);
  };
  auto opt_diff = [&](const std::optional<double>& x, const std::optional<double>& y) {
    if (x.has_value() != y.has_value()) return std::numeric_limits<double>::infinity();
    return x ? diff(*x, *y) : 0.0;
  };
  double d = 0.0;
  d = std::max(d, a.k == b.k ? 0.0 : std::numeric_limits<double>::infinity());
  d = std::max(d, diff(a.outer_loss, b.outer_loss));
  d = std::max(d, diff(a.test_metric, b.test_metric));
  d = std::max(d, diff(a.hypergrad_norm, b.hypergrad_norm));
  d = std::max(d, opt_diff(a.efim_err, b.efim_err));
  d = std::max(d, opt_diff(a.crosspartial_err, b.crosspartial_err));
  d = std::max(d, a.samples_used == b.samples_used ? 0.0 : std::numeric_limits<double>::infinity());
  return d;
}

std::size_t stocbio_batch_size(const StocBiOMethod& m, std::int64_t j) {
  const double base = static_cast<double>(m.b) * static_cast<double>(m.k);
  return static_cast<std::size_t>(std::ceil(base * std::pow(1.0 - m.phi * m.mu_s, static_cast<double>(j))));
}

std::int64_t ttsa_neumann_iterations(std::int64_t k, std::int64_t epoch) {
  return static_cast<std::int64_t>(std::ceil(static_cast<double>(k) * std::sqrt(1.0 + static_cast<double>(epoch))));
}

DenseVector initial_outer_for(const BilevelTask& task, const MethodConfig& config) {
  DenseVector v = config.initial_v ? *config.initial_v : task.initial_outer();
  if (v.size() != task.metadata().d_outer) {
    throw DimensionError(fmt::format("initial v has {} entries, task expects {}", v.size(), task.metadata().d_outer));
  }
  return v;
}

bool should_record(const MethodConfig& config, std::int64_t k) {
  return k % config.eval_every == 0 || k + 1 == config.k_outer;
}

RunRecord evaluate_record(const BilevelTask& task, std::int64_t k, const DenseVector& v, const DenseVector& theta,
                          const DenseVector& hypergrad) {
  RunRecord r;
  r.k = k;
  r.outer_loss = task.outer_value(v, theta, EvalSplit::validation);
  r.test_metric = task.test_metric(v, theta);
  r.hypergrad_norm = norm2(hypergrad);
  return r;
}

// ---------------------------------------------------------------------------
// NHGD

OptimizerOutput nhgd_optimizer_step(const BilevelTask& task, const MethodConfig& config, const RngFactory& rngs,
                                    std::int64_t k, const DenseVector& v, const DenseVector& theta,
                                    const InnerObserver& observer) {
  const bool trajectory = config.cross_partial.mode == CrossPartialMode::trajectory;
  InnerRunOptions opts;
  opts.steps = config.inner_t;
  opts.batch_size = config.batch_size;
  opts.compute_cross = trajectory;
  opts.outer_index = static_cast<std::uint64_t>(k);
  InnerState init{theta, 0, task.metadata().radius};
  InnerState final_state = run_inner(task, v, std::move(init), config.schedule, opts, rngs, {observer});

  OptimizerOutput out;
  out.samples = config.inner_t * static_cast<std::int64_t>(config.batch_size);
  if (!trajectory) {
    out.endpoint_cross = cross_partial_endpoint(task, v, final_state.theta, config.cross_partial.m, config.batch_size,
                                                rngs, static_cast<std::uint64_t>(k))
                             .l;
    out.samples += static_cast<std::int64_t>(config.cross_partial.m * config.batch_size);
  }
  out.grad_theta_f = task.outer_grad_theta(v, final_state.theta);
  out.grad_v_f = task.outer_grad_v(v, final_state.theta);
  out.theta_t = std::move(final_state.theta);
  return out;
}

NhgdApproximator::NhgdApproximator(const BilevelTask& task, const MethodConfig& config, DenseVector v0)
    : task_(task),
      config_(config),
      v_(std::move(v0)),
      efim_(EfimInverseState::make(task.metadata().d_inner, config.efim)),
      cross_(CrossPartialState::make(task.metadata().d_inner, task.metadata().d_outer, config.cross_partial)) {
  if (config.efim.per_sample_scaling) gradient_scale_ = std::sqrt(static_cast<double>(config.batch_size));
  has_ground_truth_ = config.track_errors && task.analytic_inner_opt(v_).has_value();
}

void NhgdApproximator::begin_outer(std::int64_t) {
  efim_begin_outer(efim_, config_.efim);
  if (cross_.mode == CrossPartialMode::trajectory) cross_partial_begin_outer(cross_, config_.cross_partial);
}

ObserveStatus NhgdApproximator::observe(std::int64_t, const DenseVector& g, const DenseMatrix* cross) {
  ObserveStatus status;
  if (gradient_scale_ != 1.0) {
    status = efim_observe(efim_, gradient_scale_ * g);
  } else {
    status = efim_observe(efim_, g);
  }
  if (cross_.mode == CrossPartialMode::trajectory) {
    if (cross == nullptr) throw Error("NHGD trajectory mode needs the cross-partial of every inner step");
    cross_partial_observe(cross_, *cross);
  }
  return status;
}

NhgdApproximator::Outcome NhgdApproximator::finish(std::int64_t, const DenseVector& grad_theta_f,
                                                   const DenseVector& grad_v_f, const DenseMatrix* endpoint_cross) {
  Outcome out;
  if (cross_.mode == CrossPartialMode::endpoint) {
    if (endpoint_cross == nullptr) throw Error("NHGD endpoint mode needs the endpoint cross-partial");
    cross_.l = *endpoint_cross;
    cross_.count = static_cast<std::int64_t>(cross_.m);
  }
  if (efim_.count == 0) throw NumericalError("NHGD: every EFIM update of this outer iteration was skipped");
  out.hypergrad = assemble_nhgd(grad_v_f, grad_theta_f, cross_.l, efim_.a).grad;
  if (!out.hypergrad.all_finite()) throw NumericalError("NHGD: non-finite hypergradient");
  if (has_ground_truth_) {
    const auto start = Clock::now();
    out.efim_err = efim_error(efim_, task_, v_);
    out.crosspartial_err = cross_partial_error(cross_, task_, v_);
    out.eval_nanos = nanos_between(start, Clock::now());
  }
  out.next_v = v_;
  axpy(-config_.alpha, out.hypergrad, out.next_v);
  v_ = out.next_v;
  return out;
}

RunResult run_nhgd(const BilevelTask& task, const MethodConfig& config, const RunHooks& hooks) {
  if (!std::holds_alternative<NhgdMethod>(config.method)) throw Error("run_nhgd: method is " + method_name(config.method));
  config.validate();
  const RngFactory rngs(config.seed);
  RunResult result;
  DenseVector v = initial_outer_for(task, config);
  DenseVector theta = task.initial_inner();
  NhgdApproximator approx(task, config, v);
  std::int64_t samples = 0;
  std::int64_t wall = 0;
  for (std::int64_t k = 0; k < config.k_outer; ++k) {
    const auto start = Clock::now();
    approx.begin_outer(k);
    const InnerObserver observer = [&](std::int64_t t, const DenseVector& g, const DenseMatrix* cross) {
      if (approx.observe(t, g, cross) == ObserveStatus::skipped) {
        emit(hooks, fmt::format("k={} t={}: EFIM update skipped (safeguard)", k, t));
      }
    };
    OptimizerOutput opt = nhgd_optimizer_step(task, config, rngs, k, v, theta, observer);
    auto outcome = approx.finish(k, opt.grad_theta_f, opt.grad_v_f, opt.endpoint_cross ? &*opt.endpoint_cross : nullptr);
    wall += nanos_between(start, Clock::now()) - outcome.eval_nanos;
    samples += opt.samples;
    if (should_record(config, k)) {
      RunRecord r = evaluate_record(task, k, v, opt.theta_t, outcome.hypergrad);
      r.efim_err = outcome.efim_err;
      r.crosspartial_err = outcome.crosspartial_err;
      r.samples_used = samples;
      r.wall_nanos = config.record_wall_time ? wall : 0;
      result.records.push_back(r);
    }
    if (hooks.on_outer) hooks.on_outer(k, v, opt.theta_t, outcome.hypergrad);
    v = std::move(outcome.next_v);
    theta = std::move(opt.theta_t);
  }
  result.final_v = std::move(v);
  result.final_theta = std::move(theta);
  result.efim_skipped = approx.efim().skipped;
  return result;
}

// ---------------------------------------------------------------------------
// baselines

namespace {

/// Stochastic Hessian-vector operator at (v, theta). Call i draws from
/// Stream::hvp (k, call_offset + i); a fixed batch is reused when given.
class StochasticHvp {
 public:
  StochasticHvp(const BilevelTask& task, const DenseVector& v, const DenseVector& theta, const RngFactory& rngs,
                std::int64_t k, std::uint64_t call_offset = 0)
      : task_(task), v_(v), theta_(theta), rngs_(rngs), k_(k), call_(call_offset) {}

  /// Every call draws a batch of batch_for(call index).
  HvpOperator fresh(std::function<std::size_t(std::int64_t)> batch_for) {
    return [this, batch_for](const DenseVector& x) {
      const auto j = static_cast<std::int64_t>(calls_++);
      const std::size_t n = batch_for(j);
      Rng rng = rngs_.stream(Stream::hvp, static_cast<std::uint64_t>(k_), call_++);
      samples_ += static_cast<std::int64_t>(n);
      return task_.inner_hvp(v_, theta_, task_.sample(rng, n), x);
    };
  }

  /// One batch shared by every call (CG needs a fixed operator).
  HvpOperator fixed(std::size_t batch_size) {
    Rng rng = rngs_.stream(Stream::hvp, static_cast<std::uint64_t>(k_), call_++);
    batch_ = task_.sample(rng, batch_size);
    samples_ += static_cast<std::int64_t>(batch_size);
    return [this](const DenseVector& x) { return task_.inner_hvp(v_, theta_, batch_, x); };
  }

  std::int64_t samples() const { return samples_; }
  std::uint64_t next_call() const { return call_; }

 private:
  const BilevelTask& task_;
  const DenseVector& v_;
  const DenseVector& theta_;
  const RngFactory& rngs_;
  std::int64_t k_;
  std::uint64_t call_;
  std::uint64_t calls_ = 0;
  std::int64_t samples_ = 0;
  SampleBatch batch_;
};

struct StepInfo {
  DenseVector hypergrad;
  std::int64_t samples = 0;
};

}  // namespace

RunResult run_double_loop_baseline(const BilevelTask& task, const MethodConfig& config, const RunHooks& hooks) {
  const bool ok = std::holds_alternative<NeumannMethod>(config.method) ||
                  std::holds_alternative<CgMethod>(config.method) ||
                  std::holds_alternative<AmigoMethod>(config.method) ||
                  std::holds_alternative<StocBiOMethod>(config.method);
  if (!ok) throw Error("run_double_loop_baseline: method is " + method_name(config.method));
  config.validate();
  const RngFactory rngs(config.seed);
  const auto& meta = task.metadata();
  RunResult result;
  DenseVector v = initial_outer_for(task, config);
  DenseVector theta = task.initial_inner();
  DenseVector amigo_x(meta.d_inner);  // warm start across k
  std::int64_t samples = 0;
  std::int64_t wall = 0;
  const std::size_t batch = config.batch_size;

  for (std::int64_t k = 0; k < config.k_outer; ++k) {
    const auto start = Clock::now();
    InnerRunOptions opts;
    opts.steps = config.inner_t;
    opts.batch_size = batch;
    opts.outer_index = static_cast<std::uint64_t>(k);
    InnerState st = run_inner(task, v, InnerState{theta, 0, meta.radius}, config.schedule, opts, rngs);
    std::int64_t step_samples = config.inner_t * static_cast<std::int64_t>(batch);

    const CrossPartialState cross =
        cross_partial_endpoint(task, v, st.theta, config.cross_partial.m, batch, rngs, static_cast<std::uint64_t>(k));
    step_samples += static_cast<std::int64_t>(config.cross_partial.m * batch);
    const DenseVector b = task.outer_grad_theta(v, st.theta);
    const DenseVector gv = task.outer_grad_v(v, st.theta);

    StochasticHvp ops(task, v, st.theta, rngs, k);
    DenseVector x = std::visit(
        Overloaded{[&](const NeumannMethod& m) {
                     return neumann_solve(ops.fresh([batch](std::int64_t) { return batch; }), b, m.k, m.phi).x;
                   },
                   [&](const CgMethod& m) { return cg_solve(ops.fixed(batch), b, m.k, m.tol).x; },
                   [&](const AmigoMethod& m) {
                     amigo_x = amigo_solve(ops.fresh([batch](std::int64_t) { return batch; }), b, m.k, m.step,
                                           amigo_x)
                                   .x;
                     return amigo_x;
                   },
                   [&](const StocBiOMethod& m) {
                     return neumann_solve(ops.fresh([m](std::int64_t j) { return stocbio_batch_size(m, j); }), b, m.k,
                                          m.phi)
                         .x;
                   },
                   [&](const auto&) -> DenseVector { throw Error("unreachable"); }},
        config.method);
    step_samples += ops.samples();
    const DenseVector hypergrad = assemble_implicit(gv, cross.l, x).grad;
    if (!hypergrad.all_finite()) throw NumericalError(fmt::format("{}: non-finite hypergradient", method_name(config.method)));
    wall += nanos_between(start, Clock::now());
    samples += step_samples;
    if (should_record(config, k)) {
      RunRecord r = evaluate_record(task, k, v, st.theta, hypergrad);
      r.samples_used = samples;
      r.wall_nanos = config.record_wall_time ? wall : 0;
      result.records.push_back(r);
    }
    if (hooks.on_outer) hooks.on_outer(k, v, st.theta, hypergrad);
    axpy(-config.alpha, hypergrad, v);
    theta = std::move(st.theta);
  }
  result.final_v = std::move(v);
  result.final_theta = std::move(theta);
  return result;
}

RunResult run_single_loop_baseline(const BilevelTask& task, const MethodConfig& config, const RunHooks& hooks) {
  const bool ttsa = std::holds_alternative<TtsaMethod>(config.method);
  if (!ttsa && !std::holds_alternative<SobaMethod>(config.method)) {
    throw Error("run_single_loop_baseline: method is " + method_name(config.method));
  }
  config.validate();
  const RngFactory rngs(config.seed);
  const auto& meta = task.metadata();
  RunResult result;
  DenseVector v = initial_outer_for(task, config);
  InnerState st{task.initial_inner(), 0, meta.radius};
  DenseVector z(meta.d_inner);
  std::int64_t samples = 0;
  std::int64_t wall = 0;
  const std::size_t batch = config.batch_size;

  for (std::int64_t k = 0; k < config.k_outer; ++k) {
    const auto start = Clock::now();
    Rng rng = rngs.stream(Stream::inner, static_cast<std::uint64_t>(k), 0);
    const SampleBatch sample = task.sample(rng, batch);
    const DenseVector g = task.inner_grad_theta(v, st.theta, sample);
    std::int64_t step_samples = static_cast<std::int64_t>(batch);
    DenseVector hypergrad;
    DenseVector theta_eval;
    double c_in = 0.0, c_out = 0.0;

    if (ttsa) {
      const auto& m = std::get<TtsaMethod>(config.method);
      c_in = m.c_in;
      c_out = m.c_out;
      // inner step first, hypergradient at the new iterate
      const double eta = decayed(config.schedule.rate(k), k, c_in);
      axpy(-eta, g, st.theta);
      project_to_ball(st.theta, st.radius);
      const CrossPartialState cross = cross_partial_endpoint(task, v, st.theta, config.cross_partial.m, batch, rngs,
                                                             static_cast<std::uint64_t>(k));
      step_samples += static_cast<std::int64_t>(config.cross_partial.m * batch);
      const DenseVector b = task.outer_grad_theta(v, st.theta);
      StochasticHvp ops(task, v, st.theta, rngs, k);
      const DenseVector x =
          neumann_solve(ops.fresh([batch](std::int64_t) { return batch; }), b, ttsa_neumann_iterations(m.k, k), m.phi).x;
      step_samples += ops.samples();
      hypergrad = assemble_implicit(task.outer_grad_v(v, st.theta), cross.l, x).grad;
      theta_eval = st.theta;
    } else {
      const auto& m = std::get<SobaMethod>(config.method);
      c_in = m.c_in;
      c_out = m.c_out;
      // theta, z and v all move from the same current point
      const DenseMatrix cross = task.inner_cross_partial(v, st.theta, sample);
      const DenseVector hz = task.inner_hvp(v, st.theta, sample, z);
      const DenseVector b = task.outer_grad_theta(v, st.theta);
      hypergrad = assemble_implicit(task.outer_grad_v(v, st.theta), cross, z).grad;
      theta_eval = st.theta;
      const double eta = decayed(config.schedule.rate(k), k, c_in);
      axpy(-eta, g, st.theta);
      project_to_ball(st.theta, st.radius);
      axpy(-m.aux_step, hz - b, z);
      if (!z.all_finite()) throw NumericalError("SOBA: auxiliary vector diverged");
    }
    if (!hypergrad.all_finite()) throw NumericalError(fmt::format("{}: non-finite hypergradient", method_name(config.method)));
    ++st.t;
    wall += nanos_between(start, Clock::now());
    samples += step_samples;
    if (should_record(config, k)) {
      RunRecord r = evaluate_record(task, k, v, theta_eval, hypergrad);
      r.samples_used = samples;
      r.wall_nanos = config.record_wall_time ? wall : 0;
      result.records.push_back(r);
    }
    if (hooks.on_outer) hooks.on_outer(k, v, theta_eval, hypergrad);
    axpy(-decayed(config.alpha, k, c_out), hypergrad, v);
  }
  result.final_v = std::move(v);
  result.final_theta = std::move(st.theta);
  return result;
}

RunResult run_method(const BilevelTask& task, const MethodConfig& config, const RunHooks& hooks) {
  return std::visit(Overloaded{[&](const NhgdMethod&) { return run_nhgd(task, config, hooks); },
                               [&](const TtsaMethod&) { return run_single_loop_baseline(task, config, hooks); },
                               [&](const SobaMethod&) { return run_single_loop_baseline(task, config, hooks); },
                               [&](const auto&) { return run_double_loop_baseline(task, config, hooks); }},
                    config.method);
}

}  // namespace nhgd
