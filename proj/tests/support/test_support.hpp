#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "nhgd/linalg.hpp"
#include "nhgd/rng.hpp"

namespace nhgd::testing {

DenseVector random_vector(Rng& rng, std::size_t d, double scale = 1.0);
DenseMatrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0);
/// Q diag(eigs) Q^T with a random orthogonal Q.
DenseMatrix random_spd(Rng& rng, const std::vector<double>& eigs);
/// Eigenvalues log-spaced between 1 and cond.
DenseMatrix random_spd_with_condition(Rng& rng, std::size_t d, double cond);

/// Writes an IDX image/label pair; rows*cols pixels per image.
void write_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
               const std::vector<std::vector<std::uint8_t>>& pixels, const std::vector<std::uint8_t>& label_values,
               std::uint32_t rows, std::uint32_t cols);

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace nhgd::testing
