#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "nhgd/tasks.hpp"

namespace nhgd {

struct SlopeFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 0.0;
  double slope_stderr = 0.0;
  double ci95 = 0.0;  // half-width, Student t
  std::vector<std::pair<double, double>> points;  // (log x, log y)
};

/// Least squares on (log x, log y). Needs >= 3 points with x, y > 0.
SlopeFit fit_loglog_slope(const std::vector<std::pair<double, double>>& xy);

enum class InnerSolverKind {
  gradient,  // projected gradient descent, Barzilai-Borwein steps with backtracking
  newton,    // damped Newton on the full Hessian, for small d_inner
};

struct InnerSolveOptions {
  double tol = 1e-10;  // on the gradient-mapping norm
  std::int64_t max_iters = 100000;
  InnerSolverKind kind = InnerSolverKind::gradient;
  std::optional<DenseVector> init;
};

struct InnerSolveResult {
  DenseVector theta;
  double grad_norm = 0.0;
  std::int64_t iters = 0;
};

/// Full-batch solve of the inner problem. Throws NumericalError when the
/// iteration cap is reached first.
InnerSolveResult solve_inner_deterministic(const BilevelTask& task, const DenseVector& v,
                                           const InnerSolveOptions& options = {});

/// Phi(v) = f(v, theta*(v)) on the validation split.
double outer_objective(const BilevelTask& task, const DenseVector& v, const InnerSolveOptions& options = {});

/// Central differences of Phi, one inner solve per evaluation point.
DenseVector fd_hypergradient(const BilevelTask& task, const DenseVector& v, double h = 1e-4,
                             const InnerSolveOptions& options = {});

struct FdSweepPoint {
  double h = 0.0;
  double error = 0.0;  // |fd - reference| / |reference|
};

/// FD error valley across step sizes (default 1e-3 .. 1e-6).
std::vector<FdSweepPoint> fd_step_sweep(const BilevelTask& task, const DenseVector& v, const DenseVector& reference,
                                        const std::vector<double>& steps = {1e-3, 1e-4, 1e-5, 1e-6},
                                        const InnerSolveOptions& options = {});

/// grad_v f - C^T H^{-1} grad_theta f from the full-batch derivatives at
/// theta*, with the linear system solved by Cholesky.
DenseVector exact_hypergradient(const BilevelTask& task, const DenseVector& v, const DenseVector& theta_star);

struct ExactDescentResult {
  DenseVector final_v;
  DenseVector final_theta;
  std::vector<double> outer_losses;  // Phi(v_k), k = 0..K-1
};

/// K steps of v <- v - alpha grad Phi(v) with exact inner solves.
ExactDescentResult exact_hypergradient_descent(const BilevelTask& task, const DenseVector& v0, double alpha,
                                               std::int64_t k_outer, const InnerSolveOptions& options = {});

}  // namespace nhgd
