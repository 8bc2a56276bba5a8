#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "nhgd/tasks.hpp"

namespace nhgd {

enum class EfimMode { exact_averaging, smoothed };

struct EfimConfig {
  EfimMode mode = EfimMode::exact_averaging;
  double beta = 0.8;  // smoothed mode only
  double damping = 1e-3;
  /// Keep the sample counter (and hence the running average) across outer
  /// iterations. Unset means: carry in smoothed mode, reset in exact mode.
  std::optional<bool> carry_counter;
  /// Multiply minibatch gradients by sqrt(batch) before observing, so the
  /// outer products estimate the per-sample Fisher rather than Fisher / batch.
  bool per_sample_scaling = false;

  bool carries_counter() const { return carry_counter.value_or(mode == EfimMode::smoothed); }
};

/// Running inverse of the empirical Fisher matrix.
struct EfimInverseState {
  DenseMatrix a;
  std::int64_t count = 0;
  EfimMode mode = EfimMode::exact_averaging;
  double beta = 1.0;
  double damping = 1e-3;
  std::int64_t skipped = 0;  // safeguard breaches, update left out

  static EfimInverseState make(std::size_t dim, const EfimConfig& config);
  std::size_t dim() const { return a.rows(); }
};

enum class ObserveStatus { applied, skipped };

/// Folds one gradient into the state. A safeguard breach leaves A untouched,
/// bumps `skipped` and reports ObserveStatus::skipped.
ObserveStatus efim_observe(EfimInverseState& state, const DenseVector& g);

/// Starts a new outer iteration: resets the averaging counter unless the
/// configuration carries it, so the next observation re-seeds A.
void efim_begin_outer(EfimInverseState& state, const EfimConfig& config);

enum class CrossPartialMode { trajectory, endpoint };

struct CrossPartialConfig {
  CrossPartialMode mode = CrossPartialMode::trajectory;
  std::size_t m = 5;  // endpoint batches
  std::optional<bool> carry_counter;  // unset: reset each outer iteration

  bool carries_counter() const { return carry_counter.value_or(false); }
};

struct CrossPartialState {
  DenseMatrix l;
  std::int64_t count = 0;
  CrossPartialMode mode = CrossPartialMode::trajectory;
  std::size_t m = 0;

  static CrossPartialState make(std::size_t d_inner, std::size_t d_outer, const CrossPartialConfig& config);
};

/// L <- t/(t+1) L + 1/(t+1) B. Trajectory mode only.
void cross_partial_observe(CrossPartialState& state, const DenseMatrix& b);
void cross_partial_begin_outer(CrossPartialState& state, const CrossPartialConfig& config);

/// Mean of m fresh cross-partials at theta_T; batch i comes from
/// rngs.stream(Stream::endpoint, k, i).
CrossPartialState cross_partial_endpoint(const BilevelTask& task, const DenseVector& v, const DenseVector& theta_t,
                                         std::size_t m, std::size_t batch_size, const RngFactory& rngs,
                                         std::uint64_t k);

/// Spectral distance |A - H(theta*(v))^{-1}|. theta* comes from the task's
/// closed form unless supplied.
double efim_error(const EfimInverseState& state, const BilevelTask& task, const DenseVector& v,
                  const std::optional<DenseVector>& theta_star = std::nullopt);

/// Spectral distance |L - d^2 l / dtheta dv (v, theta*(v))|.
double cross_partial_error(const CrossPartialState& state, const BilevelTask& task, const DenseVector& v,
                           const std::optional<DenseVector>& theta_star = std::nullopt);

// Flat binary checkpoint: "NHGDCKPT", version, then each state as a small
// header followed by its row-major payload (host byte order).
void save_checkpoint(const std::filesystem::path& path, const EfimInverseState& efim, const CrossPartialState& cross);
void load_checkpoint(const std::filesystem::path& path, EfimInverseState& efim, CrossPartialState& cross);

}  // namespace nhgd
