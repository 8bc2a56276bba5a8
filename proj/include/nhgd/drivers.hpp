#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "nhgd/estimators.hpp"
#include "nhgd/hypergrad.hpp"
#include "nhgd/inner_loop.hpp"
#include "nhgd/tasks.hpp"

namespace nhgd {

struct NhgdMethod {};
struct NeumannMethod {
  std::int64_t k = 10;
  double phi = 0.1;
};
struct CgMethod {
  std::int64_t k = 10;
  double tol = 1e-10;
};
struct AmigoMethod {
  std::int64_t k = 10;
  double step = 0.1;
};
/// Neumann solve whose j-th product uses ceil(B K (1 - phi mu_s)^j) samples.
struct StocBiOMethod {
  std::int64_t k = 10;
  double phi = 0.01;
  double mu_s = 1e-4;
  std::size_t b = 100;
};
/// c_in / c_out: inner and outer step sizes decay as (1 + k)^-c.
struct TtsaMethod {
  std::int64_t k = 10;
  double phi = 0.1;
  double c_in = 0.0;
  double c_out = 0.0;
};
struct SobaMethod {
  double aux_step = 0.1;
  double c_in = 0.0;
  double c_out = 0.0;
};

using Method = std::variant<NhgdMethod, NeumannMethod, CgMethod, AmigoMethod, StocBiOMethod, TtsaMethod, SobaMethod>;

std::string method_name(const Method& method);

struct MethodConfig {
  Method method = NhgdMethod{};
  std::string label;  // defaults to method_name(method)
  double alpha = 0.1;
  std::int64_t inner_t = 10;  // ignored by the single-loop methods
  std::size_t batch_size = 1;
  StepSchedule schedule;
  EfimConfig efim;
  CrossPartialConfig cross_partial;  // baselines always use the endpoint estimate with cross_partial.m
  std::int64_t k_outer = 10;
  std::uint64_t seed = 0;
  bool track_errors = false;  // needs a closed-form inner optimum
  bool record_wall_time = true;
  std::int64_t eval_every = 1;
  std::optional<DenseVector> initial_v;

  std::string display_label() const { return label.empty() ? method_name(method) : label; }
  void validate() const;
};

struct RunRecord {
  std::int64_t k = 0;
  double outer_loss = 0.0;
  double test_metric = 0.0;
  double hypergrad_norm = 0.0;
  std::optional<double> efim_err;
  std::optional<double> crosspartial_err;
  std::int64_t samples_used = 0;
  std::int64_t wall_nanos = 0;
};

/// Field-wise comparison ignoring wall time.
double max_record_difference(const RunRecord& a, const RunRecord& b);

struct RunHooks {
  /// After outer iteration k: v_k, theta_k^T and the hypergradient used.
  std::function<void(std::int64_t k, const DenseVector& v, const DenseVector& theta, const DenseVector& hypergrad)>
      on_outer;
  std::function<void(const std::string& event)> on_event;
};

struct RunResult {
  std::vector<RunRecord> records;
  DenseVector final_v;
  DenseVector final_theta;
  std::int64_t efim_skipped = 0;
};

RunResult run_nhgd(const BilevelTask& task, const MethodConfig& config, const RunHooks& hooks = {});
RunResult run_double_loop_baseline(const BilevelTask& task, const MethodConfig& config, const RunHooks& hooks = {});
RunResult run_single_loop_baseline(const BilevelTask& task, const MethodConfig& config, const RunHooks& hooks = {});
/// Dispatches on config.method.
RunResult run_method(const BilevelTask& task, const MethodConfig& config, const RunHooks& hooks = {});

std::size_t stocbio_batch_size(const StocBiOMethod& m, std::int64_t j);
std::int64_t ttsa_neumann_iterations(std::int64_t k, std::int64_t epoch);

// ---------------------------------------------------------------------------
// Pieces shared by the sequential and two-worker NHGD runtimes. Both call the
// same functions in the same order, which keeps their results identical.

/// What the optimizer side produces for one outer iteration.
struct OptimizerOutput {
  DenseVector theta_t;
  DenseVector grad_theta_f;
  DenseVector grad_v_f;
  std::optional<DenseMatrix> endpoint_cross;
  std::int64_t samples = 0;
};

/// Inner loop from theta (warm start), then the outer derivatives at theta_T.
/// `observer` sees every (t, g, B) before its step.
OptimizerOutput nhgd_optimizer_step(const BilevelTask& task, const MethodConfig& config, const RngFactory& rngs,
                                    std::int64_t k, const DenseVector& v, const DenseVector& theta,
                                    const InnerObserver& observer);

/// Owns the estimator states and the outer variable.
class NhgdApproximator {
 public:
  NhgdApproximator(const BilevelTask& task, const MethodConfig& config, DenseVector v0);

  void begin_outer(std::int64_t k);
  ObserveStatus observe(std::int64_t t, const DenseVector& g, const DenseMatrix* cross);

  struct Outcome {
    DenseVector hypergrad;
    DenseVector next_v;
    std::optional<double> efim_err;
    std::optional<double> crosspartial_err;
    std::int64_t eval_nanos = 0;  // spent on the error metrics
  };
  Outcome finish(std::int64_t k, const DenseVector& grad_theta_f, const DenseVector& grad_v_f,
                 const DenseMatrix* endpoint_cross);

  const DenseVector& v() const { return v_; }
  const EfimInverseState& efim() const { return efim_; }
  const CrossPartialState& cross() const { return cross_; }

 private:
  const BilevelTask& task_;
  const MethodConfig& config_;
  DenseVector v_;
  EfimInverseState efim_;
  CrossPartialState cross_;
  double gradient_scale_ = 1.0;
  bool has_ground_truth_ = false;
};

DenseVector initial_outer_for(const BilevelTask& task, const MethodConfig& config);
bool should_record(const MethodConfig& config, std::int64_t k);
RunRecord evaluate_record(const BilevelTask& task, std::int64_t k, const DenseVector& v, const DenseVector& theta,
                          const DenseVector& hypergrad);

}  // namespace nhgd
