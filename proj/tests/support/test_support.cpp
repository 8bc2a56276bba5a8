#include "test_support.hpp"

#include <atomic>
#include <cmath>
#include <fstream>

#include <unistd.h>

namespace nhgd::testing {

DenseVector random_vector(Rng& rng, std::size_t d, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  DenseVector v(d);
  for (double& x : v) x = n(rng);
  return v;
}

DenseMatrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale) {
  std::normal_distribution<double> n(0.0, scale);
  DenseMatrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = n(rng);
  return m;
}

DenseMatrix random_spd(Rng& rng, const std::vector<double>& eigs) {
  const std::size_t d = eigs.size();
  // Gram-Schmidt on a Gaussian matrix
  DenseMatrix q = random_matrix(rng, d, d);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t p = 0; p < j; ++p) {
      double proj = 0.0;
      for (std::size_t i = 0; i < d; ++i) proj += q(i, j) * q(i, p);
      for (std::size_t i = 0; i < d; ++i) q(i, j) -= proj * q(i, p);
    }
    double n = 0.0;
    for (std::size_t i = 0; i < d; ++i) n += q(i, j) * q(i, j);
    n = std::sqrt(n);
    for (std::size_t i = 0; i < d; ++i) q(i, j) /= n;
  }
  DenseMatrix m(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) acc += q(i, k) * eigs[k] * q(j, k);
      m(i, j) = acc;
    }
  symmetrize(m);
  return m;
}

DenseMatrix random_spd_with_condition(Rng& rng, std::size_t d, double cond) {
  std::vector<double> eigs(d);
  for (std::size_t i = 0; i < d; ++i) {
    const double frac = d == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(d - 1);
    eigs[i] = std::pow(cond, frac);
  }
  return random_spd(rng, eigs);
}

namespace {

void put_be32(std::ofstream& out, std::uint32_t x) {
  const unsigned char b[4] = {static_cast<unsigned char>(x >> 24), static_cast<unsigned char>(x >> 16),
                              static_cast<unsigned char>(x >> 8), static_cast<unsigned char>(x)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

void write_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
               const std::vector<std::vector<std::uint8_t>>& pixels, const std::vector<std::uint8_t>& label_values,
               std::uint32_t rows, std::uint32_t cols) {
  std::ofstream img(images, std::ios::binary);
  put_be32(img, 0x00000803);
  put_be32(img, static_cast<std::uint32_t>(pixels.size()));
  put_be32(img, rows);
  put_be32(img, cols);
  for (const auto& p : pixels) img.write(reinterpret_cast<const char*>(p.data()), static_cast<std::streamsize>(p.size()));
  std::ofstream lab(labels, std::ios::binary);
  put_be32(lab, 0x00000801);
  put_be32(lab, static_cast<std::uint32_t>(label_values.size()));
  lab.write(reinterpret_cast<const char*>(label_values.data()), static_cast<std::streamsize>(label_values.size()));
}

TempDir::TempDir() {
  static std::atomic<int> counter{0};
  path_ = std::filesystem::temp_directory_path() /
          ("nhgd_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

}  // namespace nhgd::testing
