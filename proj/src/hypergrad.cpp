#include "nhgd/hypergrad.hpp"

#include <chrono>
#include <cmath>

#include <fmt/core.h>

namespace nhgd {

namespace {

std::int64_t nanos_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now() - start).count();
}

DenseVector apply(const HvpOperator& hvp, const DenseVector& x, const char* what) {
  DenseVector y = hvp(x);
  if (y.size() != x.size()) {
    throw DimensionError(fmt::format("{}: operator returned {} entries for input {}", what, y.size(), x.size()));
  }
  return y;
}

constexpr double kBlowup = 1e6;

}  // namespace

HypergradEstimate assemble_nhgd(const DenseVector& grad_v_f, const DenseVector& grad_theta_f, const DenseMatrix& l,
                                const DenseMatrix& a) {
  if (!a.is_square() || a.rows() != grad_theta_f.size() || l.rows() != grad_theta_f.size() ||
      l.cols() != grad_v_f.size()) {
    throw DimensionError(fmt::format("assemble_nhgd: grad_v {}, grad_theta {}, L {}, A {}", grad_v_f.size(),
                                     grad_theta_f.size(), shape_string(l), shape_string(a)));
  }
  HypergradEstimate out;
  out.grad = grad_v_f - matvec_transposed(l, matvec(a, grad_theta_f));
  return out;
}

HypergradEstimate assemble_implicit(const DenseVector& grad_v_f, const DenseMatrix& cross, const DenseVector& x) {
  if (cross.rows() != x.size() || cross.cols() != grad_v_f.size()) {
    throw DimensionError(fmt::format("assemble_implicit: grad_v {}, cross {}, x {}", grad_v_f.size(),
                                     shape_string(cross), x.size()));
  }
  HypergradEstimate out;
  out.grad = grad_v_f - matvec_transposed(cross, x);
  return out;
}

LinearSolve neumann_solve(const HvpOperator& hvp, const DenseVector& b, std::int64_t k, double phi) {
  if (k < 0) throw Error("neumann_solve: K must be >= 0");
  if (!(phi > 0.0)) throw Error("neumann_solve: phi must be positive");
  const auto start = std::chrono::steady_clock::now();
  const double limit = kBlowup * norm2(b);
  // s_{j+1} = b + (I - phi H) s_j; successive differences are the series terms
  DenseVector s = b;
  double last_term = norm2(b);
  for (std::int64_t j = 0; j < k; ++j) {
    DenseVector next = s;
    axpy(-phi, apply(hvp, s, "neumann_solve"), next);
    next += b;
    if (!next.all_finite()) {
      throw NumericalError(fmt::format("neumann_solve: non-finite partial sum after {} terms (phi = {})", j + 1, phi));
    }
    last_term = norm2(next - s);
    if (last_term > limit && limit > 0.0) {
      throw NumericalError(fmt::format("neumann_solve: series diverges at term {} (phi = {})", j + 1, phi));
    }
    s = std::move(next);
  }
  LinearSolve out;
  out.x = phi * std::move(s);
  out.diagnostics.solver_iters = k;
  out.diagnostics.residual = phi * last_term;
  out.diagnostics.wall_nanos = nanos_since(start);
  return out;
}

LinearSolve cg_solve(const HvpOperator& hvp, const DenseVector& b, std::int64_t k, double tol) {
  if (k < 0) throw Error("cg_solve: K must be >= 0");
  if (!(tol >= 0.0)) throw Error("cg_solve: tol must be nonnegative");
  const auto start = std::chrono::steady_clock::now();
  LinearSolve out;
  out.x = DenseVector(b.size());
  DenseVector r = b;
  DenseVector p = r;
  double rr = dot(r, r);
  const double target = tol * norm2(b);
  double prev_res = std::sqrt(rr);
  int increases = 0;
  std::int64_t it = 0;
  while (it < k && std::sqrt(rr) > target) {
    const DenseVector hp = apply(hvp, p, "cg_solve");
    const double curv = dot(p, hp);
    if (!(curv > 0.0)) throw NumericalError(fmt::format("cg_solve: non-positive curvature {} at iteration {}", curv, it));
    const double alpha = rr / curv;
    axpy(alpha, p, out.x);
    axpy(-alpha, hp, r);
    const double rr_new = dot(r, r);
    ++it;
    const double res = std::sqrt(rr_new);
    if (!std::isfinite(res)) throw NumericalError("cg_solve: non-finite residual");
    increases = res > prev_res ? increases + 1 : 0;
    if (increases >= 3) throw NumericalError(fmt::format("cg_solve: residual grew 3 iterations running (at {})", it));
    prev_res = res;
    p *= rr_new / rr;
    p += r;
    rr = rr_new;
  }
  out.diagnostics.solver_iters = it;
  out.diagnostics.residual = std::sqrt(rr);
  out.diagnostics.wall_nanos = nanos_since(start);
  return out;
}

LinearSolve amigo_solve(const HvpOperator& hvp, const DenseVector& b, std::int64_t k, double step,
                        const DenseVector& x0) {
  if (k < 0) throw Error("amigo_solve: K must be >= 0");
  if (!(step > 0.0)) throw Error("amigo_solve: step must be positive");
  if (x0.size() != b.size()) throw DimensionError("amigo_solve: x0 and b differ in size");
  const auto start = std::chrono::steady_clock::now();
  LinearSolve out;
  out.x = x0;
  double res = 0.0;
  double limit = 0.0;
  for (std::int64_t i = 0; i < k; ++i) {
    DenseVector r = apply(hvp, out.x, "amigo_solve") - b;
    res = norm2(r);
    if (i == 0) limit = kBlowup * std::max(norm2(b), res);
    if (!std::isfinite(res) || (limit > 0.0 && res > limit)) {
      throw NumericalError(fmt::format("amigo_solve: diverging at step {} (step size {})", i, step));
    }
    axpy(-step, r, out.x);
  }
  out.diagnostics.solver_iters = k;
  out.diagnostics.residual = res;
  out.diagnostics.wall_nanos = nanos_since(start);
  return out;
}

}  // namespace nhgd
