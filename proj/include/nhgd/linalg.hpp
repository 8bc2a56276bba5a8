#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nhgd {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Raised when a computation would leave the finite / positive-definite regime.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class DenseVector {
 public:
  DenseVector() = default;
  explicit DenseVector(std::size_t dim, double fill = 0.0) : values_(dim, fill) {}
  DenseVector(std::initializer_list<double> values) : values_(values) {}
  explicit DenseVector(std::vector<double> values) : values_(std::move(values)) {}

  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::span<double> span() { return values_; }
  std::span<const double> span() const { return values_; }
  const std::vector<double>& values() const { return values_; }

  auto begin() { return values_.begin(); }
  auto end() { return values_.end(); }
  auto begin() const { return values_.begin(); }
  auto end() const { return values_.end(); }

  bool all_finite() const;
  void fill(double value);

  DenseVector& operator+=(const DenseVector& other);
  DenseVector& operator-=(const DenseVector& other);
  DenseVector& operator*=(double scale);

  friend bool operator==(const DenseVector&, const DenseVector&) = default;

 private:
  std::vector<double> values_;
};

DenseVector operator+(DenseVector a, const DenseVector& b);
DenseVector operator-(DenseVector a, const DenseVector& b);
DenseVector operator*(double s, DenseVector a);

/// Row-major dense matrix of 64-bit reals.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  static DenseMatrix identity(std::size_t n);
  static DenseMatrix diagonal(const DenseVector& diag);
  static DenseMatrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool is_square() const { return rows_ == cols_; }
  bool empty() const { return values_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return values_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return values_[i * cols_ + j]; }

  std::span<double> row(std::size_t i) { return {values_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const { return {values_.data() + i * cols_, cols_}; }

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  const std::vector<double>& values() const { return values_; }

  DenseMatrix transpose() const;
  bool all_finite() const;
  void fill(double value);

  DenseMatrix& operator+=(const DenseMatrix& other);
  DenseMatrix& operator-=(const DenseMatrix& other);
  DenseMatrix& operator*=(double scale);

  friend bool operator==(const DenseMatrix&, const DenseMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

DenseMatrix operator+(DenseMatrix a, const DenseMatrix& b);
DenseMatrix operator-(DenseMatrix a, const DenseMatrix& b);
DenseMatrix operator*(double s, DenseMatrix a);

double dot(const DenseVector& a, const DenseVector& b);
double norm2(const DenseVector& v);
double norm_inf(const DenseVector& v);
/// y += alpha * x
void axpy(double alpha, const DenseVector& x, DenseVector& y);

DenseVector matvec(const DenseMatrix& m, const DenseVector& x);
/// Computes m^T x without forming the transpose.
DenseVector matvec_transposed(const DenseMatrix& m, const DenseVector& x);
DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix outer_product(const DenseVector& a, const DenseVector& b);

double frobenius_norm(const DenseMatrix& m);
double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b);
double max_abs_diff(const DenseVector& a, const DenseVector& b);

/// Largest singular value by power iteration on m^T m from a fixed
/// pseudo-random start vector (deterministic across calls).
double spectral_norm_estimate(const DenseMatrix& m, int iters = 100);

/// Inverse through a partially pivoted LU factorization. Rejects matrices
/// whose reciprocal condition estimate falls below 1 / max_condition.
DenseMatrix direct_inverse(const DenseMatrix& m, double max_condition = 1e13);

/// Solves m x = b for symmetric positive definite m (Cholesky).
DenseVector spd_solve(const DenseMatrix& m, const DenseVector& b);

/// Cholesky succeeds iff m is (numerically) positive definite.
bool is_positive_definite(const DenseMatrix& m);
double max_asymmetry(const DenseMatrix& m);
/// In place (m + m^T) / 2.
void symmetrize(DenseMatrix& m);

// Rank-one inverse updates. Both reject non-finite inputs and a denominator
// at or below the safeguard, which would mean the implied matrix is no
// longer positive definite.
inline constexpr double kDenominatorSafeguard = 1e-12;

/// Given a = (M_t)^{-1} with M_t the average of t outer products, returns
/// the inverse of M_{t+1} = t/(t+1) M_t + 1/(t+1) g g^T.
DenseMatrix sm_avg_inverse_update(const DenseMatrix& a, const DenseVector& g, std::int64_t t);
void sm_avg_inverse_update_in_place(DenseMatrix& a, const DenseVector& g, std::int64_t t);

/// Given a = M^{-1}, returns the inverse of beta M + (1 - beta) g g^T.
DenseMatrix sm_smoothed_inverse_update(const DenseMatrix& a, const DenseVector& g, double beta);
void sm_smoothed_inverse_update_in_place(DenseMatrix& a, const DenseVector& g, double beta);

std::string shape_string(const DenseMatrix& m);

}  // namespace nhgd
