#pragma once

#include <cstdint>
#include <functional>

#include "nhgd/linalg.hpp"

namespace nhgd {

struct SolverDiagnostics {
  std::int64_t solver_iters = 0;
  double residual = 0.0;
  std::int64_t wall_nanos = 0;
};

struct HypergradEstimate {
  DenseVector grad;
  SolverDiagnostics diagnostics;
};

/// grad_v f - L^T (A grad_theta f), as two matrix-vector products.
HypergradEstimate assemble_nhgd(const DenseVector& grad_v_f, const DenseVector& grad_theta_f, const DenseMatrix& l,
                                const DenseMatrix& a);

/// grad_v f - cross^T x, where x approximates H^{-1} grad_theta f.
HypergradEstimate assemble_implicit(const DenseVector& grad_v_f, const DenseMatrix& cross, const DenseVector& x);

/// x -> H x. Stochastic operators may draw a fresh batch per call.
using HvpOperator = std::function<DenseVector(const DenseVector&)>;

struct LinearSolve {
  DenseVector x;
  SolverDiagnostics diagnostics;
};

/// phi * sum_{t=0}^{K} (I - phi H)^t b in Horner form (K operator calls).
/// Throws NumericalError once a series term blows past 1e6 |b| or goes non-finite.
LinearSolve neumann_solve(const HvpOperator& hvp, const DenseVector& b, std::int64_t k, double phi);

/// Conjugate gradients for H x = b, stopping after K iterations or at
/// |r| <= tol |b|. Three consecutive residual increases, or a non-positive
/// curvature p^T H p, mean the operator is not SPD and raise NumericalError.
LinearSolve cg_solve(const HvpOperator& hvp, const DenseVector& b, std::int64_t k, double tol);

/// K gradient steps on 1/2 x^T H x - b^T x from x0.
LinearSolve amigo_solve(const HvpOperator& hvp, const DenseVector& b, std::int64_t k, double step,
                        const DenseVector& x0);

}  // namespace nhgd
