#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "nhgd/drivers.hpp"

namespace nhgd {

struct InnerMessage {
  std::int64_t k = 0;
  std::int64_t t = 0;
  DenseVector g_theta;
  std::optional<DenseMatrix> cross_partial;  // trajectory mode only
};

struct BoundaryMessage {
  std::int64_t k = 0;
  DenseVector grad_theta_f;
  DenseVector grad_v_f;
  std::optional<DenseMatrix> endpoint_cross_partial;  // endpoint mode only
};

struct OuterMessage {
  std::int64_t k = 0;
  DenseVector hypergrad;
  DenseVector next_v;
  std::optional<double> efim_err;
  std::optional<double> crosspartial_err;
};

/// Messages counted on the receiving side, per outer iteration.
struct MessageCensus {
  std::vector<std::int64_t> inner;     // received by the approximator
  std::vector<std::int64_t> boundary;  // received by the approximator
  std::vector<std::int64_t> outer;     // received by the optimizer
  /// Times the optimizer found an outer message waiting while it was still
  /// streaming inner messages. Zero when communication is one-directional.
  std::int64_t reverse_during_inner = 0;
  std::int64_t order_violations = 0;
};

struct ParallelOptions {
  std::size_t channel_capacity = 64;
  std::optional<std::filesystem::path> trace_path;  // JSON lines, one per message
};

struct ParallelResult {
  RunResult run;
  MessageCensus census;
};

/// NHGD with the inner loop on one thread (optimizer) and the estimator
/// updates plus the outer step on another (approximator).
ParallelResult run_parallel_nhgd(const BilevelTask& task, const MethodConfig& config,
                                 const ParallelOptions& options = {}, const RunHooks& hooks = {});

}  // namespace nhgd
