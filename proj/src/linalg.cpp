#include "nhgd/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <Eigen/Dense>
#include <fmt/core.h>

namespace nhgd {

namespace {

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void require_same_size(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw DimensionError(fmt::format("{}: size mismatch ({} vs {})", what, a, b));
}

void require_same_shape(const DenseMatrix& a, const DenseMatrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(
        fmt::format("{}: shape mismatch ({} vs {})", what, shape_string(a), shape_string(b)));
  }
}

Eigen::Map<const RowMajorMatrix> as_eigen(const DenseMatrix& m) {
  return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}

// Shared tail of both rank-one updates: a <- scale * a - coef * u u^T, then
// symmetrize. Validates before touching `a`.
void rank_one_update(DenseMatrix& a, const DenseVector& g, double scale, double weight,
                     const char* what) {
  if (!a.is_square() || a.rows() != g.size()) {
    throw DimensionError(
        fmt::format("{}: matrix {} vs gradient of size {}", what, shape_string(a), g.size()));
  }
  if (!g.all_finite()) throw NumericalError(fmt::format("{}: non-finite gradient", what));
  const DenseVector u = matvec(a, g);
  // any non-finite entry of `a` propagates into u
  if (!u.all_finite()) throw NumericalError(fmt::format("{}: non-finite inverse matrix", what));
  const double quad = dot(g, u);
  const double denom = 1.0 + weight * quad;
  if (!(denom > kDenominatorSafeguard)) {
    throw NumericalError(
        fmt::format("{}: denominator {} below safeguard, positive-definiteness lost", what, denom));
  }
  const double coef = scale * weight / denom;
  const std::size_t n = a.rows();
  for (std::size_t i = 0; i < n; ++i) {
    double* row = a.data() + i * n;
    const double ui = coef * u[i];
    for (std::size_t j = 0; j < n; ++j) row[j] = scale * row[j] - ui * u[j];
  }
  symmetrize(a);
}

}  // namespace

bool DenseVector::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double x) { return std::isfinite(x); });
}

void DenseVector::fill(double value) { std::fill(values_.begin(), values_.end(), value); }

DenseVector& DenseVector::operator+=(const DenseVector& other) {
  require_same_size(size(), other.size(), "vector +=");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
  return *this;
}

DenseVector& DenseVector::operator-=(const DenseVector& other) {
  require_same_size(size(), other.size(), "vector -=");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= other.values_[i];
  return *this;
}

DenseVector& DenseVector::operator*=(double scale) {
  for (double& x : values_) x *= scale;
  return *this;
}

DenseVector operator+(DenseVector a, const DenseVector& b) { return a += b; }
DenseVector operator-(DenseVector a, const DenseVector& b) { return a -= b; }
DenseVector operator*(double s, DenseVector a) { return a *= s; }

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  if (values_.size() != rows_ * cols_) {
    throw DimensionError(fmt::format("matrix {}x{} given {} values", rows_, cols_, values_.size()));
  }
}

DenseMatrix DenseMatrix::identity(std::size_t n) {
  DenseMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

DenseMatrix DenseMatrix::diagonal(const DenseVector& diag) {
  DenseMatrix m(diag.size(), diag.size());
  for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
  return m;
}

DenseMatrix DenseMatrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("from_rows: ragged rows");
    values.insert(values.end(), row.begin(), row.end());
  }
  return DenseMatrix(r, c, std::move(values));
}

DenseMatrix DenseMatrix::transpose() const {
  DenseMatrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

bool DenseMatrix::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double x) { return std::isfinite(x); });
}

void DenseMatrix::fill(double value) { std::fill(values_.begin(), values_.end(), value); }

DenseMatrix& DenseMatrix::operator+=(const DenseMatrix& other) {
  require_same_shape(*this, other, "matrix +=");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += other.values_[i];
  return *this;
}

DenseMatrix& DenseMatrix::operator-=(const DenseMatrix& other) {
  require_same_shape(*this, other, "matrix -=");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= other.values_[i];
  return *this;
}

DenseMatrix& DenseMatrix::operator*=(double scale) {
  for (double& x : values_) x *= scale;
  return *this;
}

DenseMatrix operator+(DenseMatrix a, const DenseMatrix& b) { return a += b; }
DenseMatrix operator-(DenseMatrix a, const DenseMatrix& b) { return a -= b; }
DenseMatrix operator*(double s, DenseMatrix a) { return a *= s; }

double dot(const DenseVector& a, const DenseVector& b) {
  require_same_size(a.size(), b.size(), "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double norm2(const DenseVector& v) { return std::sqrt(dot(v, v)); }

double norm_inf(const DenseVector& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

void axpy(double alpha, const DenseVector& x, DenseVector& y) {
  require_same_size(x.size(), y.size(), "axpy");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

DenseVector matvec(const DenseMatrix& m, const DenseVector& x) {
  require_same_size(m.cols(), x.size(), "matvec");
  DenseVector y(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double* row = m.data() + i * m.cols();
    double acc = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) acc += row[j] * x[j];
    y[i] = acc;
  }
  return y;
}

DenseVector matvec_transposed(const DenseMatrix& m, const DenseVector& x) {
  require_same_size(m.rows(), x.size(), "matvec_transposed");
  DenseVector y(m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double* row = m.data() + i * m.cols();
    const double xi = x[i];
    if (xi == 0.0) continue;
    for (std::size_t j = 0; j < m.cols(); ++j) y[j] += row[j] * xi;
  }
  return y;
}

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  require_same_size(a.cols(), b.rows(), "matmul");
  DenseMatrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* brow = b.data() + k * b.cols();
      double* crow = c.data() + i * c.cols();
      for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

DenseMatrix outer_product(const DenseVector& a, const DenseVector& b) {
  DenseMatrix m(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) m(i, j) = a[i] * b[j];
  return m;
}

double frobenius_norm(const DenseMatrix& m) {
  double acc = 0.0;
  for (double x : m.values()) acc += x * x;
  return std::sqrt(acc);
}

double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double d = 0.0;
  for (std::size_t i = 0; i < a.values().size(); ++i)
    d = std::max(d, std::abs(a.values()[i] - b.values()[i]));
  return d;
}

double max_abs_diff(const DenseVector& a, const DenseVector& b) {
  require_same_size(a.size(), b.size(), "max_abs_diff");
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

double spectral_norm_estimate(const DenseMatrix& m, int iters) {
  if (m.empty()) return 0.0;
  std::mt19937_64 gen(0x5eed5eedULL);
  std::normal_distribution<double> normal;
  DenseVector x(m.cols());
  for (double& xi : x) xi = normal(gen);
  x *= 1.0 / norm2(x);
  for (int it = 0; it < iters; ++it) {
    DenseVector z = matvec_transposed(m, matvec(m, x));
    const double nz = norm2(z);
    if (nz == 0.0) return 0.0;
    x = (1.0 / nz) * std::move(z);
  }
  return norm2(matvec(m, x));
}

DenseMatrix direct_inverse(const DenseMatrix& m, double max_condition) {
  if (!m.is_square()) throw DimensionError("direct_inverse: matrix " + shape_string(m));
  if (!m.all_finite()) throw NumericalError("direct_inverse: non-finite entries");
  Eigen::PartialPivLU<RowMajorMatrix> lu(as_eigen(m));
  // rcond() is unreliable with an exactly zero pivot
  const bool zero_pivot = (lu.matrixLU().diagonal().array() == 0.0).any();
  const double rcond = zero_pivot ? 0.0 : lu.rcond();
  if (!(rcond * max_condition >= 1.0) || rcond > 1.0) {
    throw NumericalError(fmt::format("direct_inverse: singular to tolerance (rcond {:.3e})", rcond));
  }
  RowMajorMatrix inv = lu.inverse();
  return DenseMatrix(m.rows(), m.cols(), std::vector<double>(inv.data(), inv.data() + inv.size()));
}

DenseVector spd_solve(const DenseMatrix& m, const DenseVector& b) {
  if (!m.is_square() || m.rows() != b.size()) throw DimensionError("spd_solve: shape mismatch");
  Eigen::LLT<RowMajorMatrix> llt(as_eigen(m));
  if (llt.info() != Eigen::Success) throw NumericalError("spd_solve: matrix not positive definite");
  Eigen::Map<const Eigen::VectorXd> rhs(b.data(), static_cast<Eigen::Index>(b.size()));
  Eigen::VectorXd x = llt.solve(rhs);
  return DenseVector(std::vector<double>(x.data(), x.data() + x.size()));
}

bool is_positive_definite(const DenseMatrix& m) {
  if (!m.is_square() || !m.all_finite()) return false;
  Eigen::LLT<RowMajorMatrix> llt(as_eigen(m));
  return llt.info() == Eigen::Success;
}

double max_asymmetry(const DenseMatrix& m) {
  if (!m.is_square()) throw DimensionError("max_asymmetry: matrix " + shape_string(m));
  double d = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = i + 1; j < m.cols(); ++j) d = std::max(d, std::abs(m(i, j) - m(j, i)));
  return d;
}

void symmetrize(DenseMatrix& m) {
  if (!m.is_square()) throw DimensionError("symmetrize: matrix " + shape_string(m));
  const std::size_t n = m.rows();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double avg = 0.5 * (m(i, j) + m(j, i));
      m(i, j) = avg;
      m(j, i) = avg;
    }
  }
}

void sm_avg_inverse_update_in_place(DenseMatrix& a, const DenseVector& g, std::int64_t t) {
  if (t <= 0) throw Error("sm_avg_inverse_update: t must be >= 1");
  const double td = static_cast<double>(t);
  // scale (t+1)/t, weight 1/t; scale * weight = (t+1)/t^2
  rank_one_update(a, g, (td + 1.0) / td, 1.0 / td, "sm_avg_inverse_update");
}

DenseMatrix sm_avg_inverse_update(const DenseMatrix& a, const DenseVector& g, std::int64_t t) {
  DenseMatrix out = a;
  sm_avg_inverse_update_in_place(out, g, t);
  return out;
}

void sm_smoothed_inverse_update_in_place(DenseMatrix& a, const DenseVector& g, double beta) {
  if (!(beta > 0.0 && beta <= 1.0)) throw Error("sm_smoothed_inverse_update: beta must lie in (0, 1]");
  // scale 1/beta, weight (1-beta)/beta; scale * weight = (1-beta)/beta^2
  rank_one_update(a, g, 1.0 / beta, (1.0 - beta) / beta, "sm_smoothed_inverse_update");
}

DenseMatrix sm_smoothed_inverse_update(const DenseMatrix& a, const DenseVector& g, double beta) {
  DenseMatrix out = a;
  sm_smoothed_inverse_update_in_place(out, g, beta);
  return out;
}

std::string shape_string(const DenseMatrix& m) { return fmt::format("{}x{}", m.rows(), m.cols()); }

}  // namespace nhgd
