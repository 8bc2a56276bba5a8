#include "nhgd/oracles.hpp"

#include <array>
#include <cmath>

#include <fmt/core.h>

#include "nhgd/inner_loop.hpp"

namespace nhgd {

namespace {

double student_t975(std::size_t dof) {
  static constexpr std::array<double, 30> table = {12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306,
                                                   2.262,  2.228, 2.201, 2.179, 2.160, 2.145, 2.131, 2.120,
                                                   2.110,  2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064,
                                                   2.060,  2.056, 2.052, 2.048, 2.045, 2.042};
  if (dof == 0) return std::numeric_limits<double>::infinity();
  return dof <= table.size() ? table[dof - 1] : 1.96;
}

DenseVector projected(DenseVector theta, double radius) {
  project_to_ball(theta, radius);
  return theta;
}

}  // namespace

SlopeFit fit_loglog_slope(const std::vector<std::pair<double, double>>& xy) {
  if (xy.size() < 3) throw Error(fmt::format("fit_loglog_slope: need at least 3 points, got {}", xy.size()));
  SlopeFit fit;
  for (const auto& [x, y] : xy) {
    if (!(x > 0.0) || !(y > 0.0) || !std::isfinite(x) || !std::isfinite(y)) {
      throw Error(fmt::format("fit_loglog_slope: nonpositive coordinate ({}, {})", x, y));
    }
    fit.points.emplace_back(std::log(x), std::log(y));
  }
  const auto n = static_cast<double>(fit.points.size());
  double mx = 0.0, my = 0.0;
  for (const auto& [lx, ly] : fit.points) {
    mx += lx;
    my += ly;
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (const auto& [lx, ly] : fit.points) {
    sxx += (lx - mx) * (lx - mx);
    sxy += (lx - mx) * (ly - my);
    syy += (ly - my) * (ly - my);
  }
  if (sxx == 0.0) throw Error("fit_loglog_slope: all x coordinates coincide");
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double sse = 0.0;
  for (const auto& [lx, ly] : fit.points) {
    const double e = ly - (fit.intercept + fit.slope * lx);
    sse += e * e;
  }
  fit.r2 = syy == 0.0 ? 1.0 : std::clamp(1.0 - sse / syy, 0.0, 1.0);
  const std::size_t dof = fit.points.size() - 2;
  fit.slope_stderr = std::sqrt(sse / static_cast<double>(dof) / sxx);
  fit.ci95 = student_t975(dof) * fit.slope_stderr;
  return fit;
}

InnerSolveResult solve_inner_deterministic(const BilevelTask& task, const DenseVector& v,
                                           const InnerSolveOptions& options) {
  if (!(options.tol > 0.0)) throw Error("solve_inner_deterministic: tol must be positive");
  const auto& meta = task.metadata();
  const double radius = meta.radius;
  InnerSolveResult res;
  res.theta = projected(options.init ? *options.init : task.initial_inner(), radius);
  if (res.theta.size() != meta.d_inner) throw DimensionError("solve_inner_deterministic: init has the wrong size");

  double value = task.inner_value_full(v, res.theta);
  DenseVector grad = task.inner_grad_full(v, res.theta);
  double step = 1.0 / meta.lip;
  // gradient mapping norm: |theta - P(theta - s g)| / s, equal to |g| inside the ball
  auto mapping_norm = [&](const DenseVector& theta, const DenseVector& g) {
    const double s = 1.0 / meta.lip;
    DenseVector moved = theta;
    axpy(-s, g, moved);
    project_to_ball(moved, radius);
    return norm2(theta - moved) / s;
  };

  for (res.iters = 0; res.iters < options.max_iters; ++res.iters) {
    res.grad_norm = mapping_norm(res.theta, grad);
    if (!std::isfinite(res.grad_norm)) throw NumericalError("solve_inner_deterministic: non-finite gradient");
    if (res.grad_norm <= options.tol) return res;

    DenseVector direction = grad;
    double trial = step;
    if (options.kind == InnerSolverKind::newton) {
      direction = spd_solve(task.inner_hessian_full(v, res.theta), grad);
      trial = 1.0;
    }
    // Armijo backtracking on the projected step
    const double slope = dot(grad, direction);
    DenseVector candidate;
    DenseVector new_grad;
    double cand_value = 0.0;
    const double grad_norm = norm2(grad);
    for (int bt = 0;; ++bt) {
      candidate = res.theta;
      axpy(-trial, direction, candidate);
      project_to_ball(candidate, radius);
      cand_value = task.inner_value_full(v, candidate);
      new_grad = task.inner_grad_full(v, candidate);
      const double decrease = options.kind == InnerSolverKind::newton ? 1e-4 * trial * slope
                                                                      : dot(grad, res.theta - candidate) * 1e-4;
      if (cand_value <= value - decrease || bt >= 60) break;
      // at rounding level the loss stops resolving progress; fall back on the gradient
      if (cand_value <= value + 1e-13 * std::abs(value) && norm2(new_grad) < grad_norm) break;
      trial *= 0.5;
    }
    if (options.kind == InnerSolverKind::gradient) {
      // Barzilai-Borwein step for the next iteration
      const DenseVector s = candidate - res.theta;
      const DenseVector y = new_grad - grad;
      const double sy = dot(s, y);
      step = sy > 0.0 ? dot(s, s) / sy : 1.0 / meta.lip;
    }
    if (candidate == res.theta) {
      // no representable progress left; accept if we are at rounding level
      res.grad_norm = mapping_norm(candidate, new_grad);
      if (res.grad_norm <= options.tol) return res;
    }
    res.theta = std::move(candidate);
    value = cand_value;
    grad = std::move(new_grad);
  }
  res.grad_norm = mapping_norm(res.theta, grad);
  if (res.grad_norm <= options.tol) return res;
  throw NumericalError(fmt::format("solve_inner_deterministic: {} iterations left gradient norm {:.3e} above tol {:.1e}",
                                   options.max_iters, res.grad_norm, options.tol));
}

double outer_objective(const BilevelTask& task, const DenseVector& v, const InnerSolveOptions& options) {
  const auto sol = solve_inner_deterministic(task, v, options);
  return task.outer_value(v, sol.theta, EvalSplit::validation);
}

DenseVector fd_hypergradient(const BilevelTask& task, const DenseVector& v, double h,
                             const InnerSolveOptions& options) {
  if (!(h > 0.0)) throw Error("fd_hypergradient: h must be positive");
  InnerSolveOptions opts = options;
  if (!opts.init) opts.init = solve_inner_deterministic(task, v, options).theta;
  DenseVector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    DenseVector plus = v, minus = v;
    plus[i] += h;
    minus[i] -= h;
    out[i] = (outer_objective(task, plus, opts) - outer_objective(task, minus, opts)) / (2.0 * h);
  }
  return out;
}

std::vector<FdSweepPoint> fd_step_sweep(const BilevelTask& task, const DenseVector& v, const DenseVector& reference,
                                        const std::vector<double>& steps, const InnerSolveOptions& options) {
  std::vector<FdSweepPoint> out;
  const double ref_norm = norm2(reference);
  for (double h : steps) {
    const DenseVector fd = fd_hypergradient(task, v, h, options);
    out.push_back({h, norm2(fd - reference) / (ref_norm > 0.0 ? ref_norm : 1.0)});
  }
  return out;
}

DenseVector exact_hypergradient(const BilevelTask& task, const DenseVector& v, const DenseVector& theta_star) {
  const DenseMatrix h = task.inner_hessian_full(v, theta_star);
  const DenseMatrix c = task.inner_cross_partial_full(v, theta_star);
  const DenseVector x = spd_solve(h, task.outer_grad_theta(v, theta_star));
  DenseVector out = task.outer_grad_v(v, theta_star);
  // out -= C^T x, written out so nothing here shares the estimator path
  for (std::size_t r = 0; r < c.rows(); ++r)
    for (std::size_t j = 0; j < c.cols(); ++j) out[j] -= c(r, j) * x[r];
  return out;
}

ExactDescentResult exact_hypergradient_descent(const BilevelTask& task, const DenseVector& v0, double alpha,
                                               std::int64_t k_outer, const InnerSolveOptions& options) {
  ExactDescentResult res;
  res.final_v = v0;
  InnerSolveOptions opts = options;
  for (std::int64_t k = 0; k < k_outer; ++k) {
    const auto sol = solve_inner_deterministic(task, res.final_v, opts);
    opts.init = sol.theta;
    res.outer_losses.push_back(task.outer_value(res.final_v, sol.theta, EvalSplit::validation));
    axpy(-alpha, exact_hypergradient(task, res.final_v, sol.theta), res.final_v);
    res.final_theta = sol.theta;
  }
  res.final_theta = solve_inner_deterministic(task, res.final_v, opts).theta;
  return res;
}

}  // namespace nhgd
