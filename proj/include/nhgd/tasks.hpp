#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "nhgd/linalg.hpp"
#include "nhgd/rng.hpp"

namespace nhgd {

struct TaskMetadata {
  std::size_t d_outer = 0;  // dimension of v
  std::size_t d_inner = 0;  // dimension of theta
  double mu = 0.0;          // strong-convexity modulus of the inner loss
  double lip = 0.0;         // smoothness constant of the inner loss
  double radius = 1e6;      // projection ball for theta
  double lambda_reg = 0.0;
};

/// One minibatch draw. `indices` are dataset positions; `features` may be
/// empty for tasks whose sample points live inside the outer variable.
struct SampleBatch {
  DenseMatrix features;
  std::vector<int> labels;
  std::vector<std::size_t> indices;

  std::size_t size() const { return indices.empty() ? features.rows() : indices.size(); }
};

enum class EvalSplit { validation, test };

/// Bilevel problem min_v f(v, theta*(v)), theta*(v) = argmin E_xi l(v, theta, xi).
///
/// Stochastic inner derivatives are batch means of per-sample derivatives,
/// so every `inner_*` call is an unbiased estimate of its `*_full` counterpart.
/// Implementations are immutable after construction and safe for concurrent reads.
class BilevelTask {
 public:
  virtual ~BilevelTask() = default;

  virtual std::string name() const = 0;
  virtual const TaskMetadata& metadata() const = 0;

  virtual SampleBatch sample(Rng& rng, std::size_t batch_size) const = 0;

  virtual DenseVector inner_grad_theta(const DenseVector& v, const DenseVector& theta,
                                       const SampleBatch& batch) const = 0;
  /// d_inner x d_outer mixed second derivative.
  virtual DenseMatrix inner_cross_partial(const DenseVector& v, const DenseVector& theta,
                                          const SampleBatch& batch) const = 0;
  virtual DenseMatrix inner_hessian(const DenseVector& v, const DenseVector& theta,
                                    const SampleBatch& batch) const = 0;
  virtual DenseVector inner_hvp(const DenseVector& v, const DenseVector& theta,
                                const SampleBatch& batch, const DenseVector& x) const;

  virtual double outer_value(const DenseVector& v, const DenseVector& theta, EvalSplit split) const = 0;
  virtual DenseVector outer_grad_v(const DenseVector& v, const DenseVector& theta) const = 0;
  virtual DenseVector outer_grad_theta(const DenseVector& v, const DenseVector& theta) const = 0;
  /// Task-defined progress metric (test accuracy for classifiers).
  virtual double test_metric(const DenseVector& v, const DenseVector& theta) const = 0;

  // Exact (population or full-dataset) inner objective and derivatives.
  virtual double inner_value_full(const DenseVector& v, const DenseVector& theta) const = 0;
  virtual DenseVector inner_grad_full(const DenseVector& v, const DenseVector& theta) const = 0;
  virtual DenseMatrix inner_hessian_full(const DenseVector& v, const DenseVector& theta) const = 0;
  virtual DenseMatrix inner_cross_partial_full(const DenseVector& v, const DenseVector& theta) const = 0;

  virtual DenseVector initial_outer() const = 0;
  virtual DenseVector initial_inner() const { return DenseVector(metadata().d_inner); }

  virtual std::optional<DenseVector> analytic_inner_opt(const DenseVector&) const { return std::nullopt; }
  virtual std::optional<DenseVector> analytic_hypergradient(const DenseVector&) const {
    return std::nullopt;
  }

  /// Generating parameters, enough to rebuild the task.
  virtual nlohmann::json describe() const = 0;
};

// ---------------------------------------------------------------------------
// IDX (MNIST-style) files

struct IdxDataset {
  DenseMatrix features;  // n x (rows * cols), scaled to [0, 1]
  std::vector<int> labels;
  std::size_t image_rows = 0;
  std::size_t image_cols = 0;

  std::size_t size() const { return labels.size(); }
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

IdxDataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path);

/// Labelled feature matrix used to build the softmax tasks.
struct LabeledData {
  DenseMatrix features;
  std::vector<int> labels;
};

// ---------------------------------------------------------------------------
// Gaussian location task: l = 1/2 |theta + B v - xi|^2, xi ~ N(m, sigma^2 I),
// f = 1/2 |theta - c|^2. With sigma = 1 the Fisher information at theta*(v)
// equals the Hessian (identity).

struct GaussianTaskParams {
  DenseMatrix map_b;                // d_inner x d_outer
  DenseVector target_c;             // d_inner
  std::optional<DenseVector> mean;  // drawn from rng_seed when absent
  double noise_sigma = 1.0;
  std::uint64_t rng_seed = 0;
  std::optional<DenseVector> initial_v;
  double radius = 1e6;
};

std::unique_ptr<BilevelTask> make_gaussian_location_task(const GaussianTaskParams& params);

/// Random instance with ||B||_2 = b_norm, c and m drawn from N(0, I).
std::unique_ptr<BilevelTask> make_random_gaussian_task(std::size_t d_inner, std::size_t d_outer,
                                                       std::uint64_t seed, double b_norm = 0.5);

// ---------------------------------------------------------------------------
// Hyper-data cleaning: per-sample weights v_i, clip(v_i, 0, 1) weighted
// softmax regression inside, clean validation NLL outside.

struct SyntheticClassification {
  std::size_t d_feat = 20;
  double weight_scale = 2.0;  // std of the true logits
};

struct IdxSource {
  std::filesystem::path images;
  std::filesystem::path labels;
};

struct DataCleaningParams {
  std::size_t n_train = 2000;
  std::size_t d_feat = 20;
  std::size_t n_classes = 2;
  double corruption_rate = 0.5;
  double lambda_reg = 1e-4;
  std::uint64_t rng_seed = 0;
  std::optional<IdxSource> idx;  // synthetic data when absent
  double val_fraction = 0.1;
  double test_fraction = 0.1;
  double initial_weight = 0.5;
  double synthetic_weight_scale = 2.0;
  double radius = 1e6;
};

class DataCleaningTask;
std::unique_ptr<DataCleaningTask> make_data_cleaning_task(const DataCleaningParams& params);

/// clip(v, 0, 1) and its subgradient (1 strictly inside, 0 elsewhere).
double clip_weight(double v);
double clip_weight_slope(double v);

// ---------------------------------------------------------------------------
// Data distillation: outer variable holds n_per_class synthetic points per
// class; the inner problem fits a bias-free softmax classifier on them.

enum class DistillInit { class_means, random };

struct DataDistillationParams {
  std::size_t n_per_class = 5;
  std::size_t n_classes = 10;
  std::size_t d_feat = 20;
  double lambda_reg = 1.0 / 15680.0;
  std::uint64_t rng_seed = 0;
  std::optional<IdxSource> idx;
  std::size_t n_source = 2000;  // source points used for the outer loss
  std::size_t n_test = 500;
  double cluster_separation = 2.0;
  DistillInit init = DistillInit::class_means;
  double radius = 1e6;
};

class DataDistillationTask;
std::unique_ptr<DataDistillationTask> make_data_distillation_task(const DataDistillationParams& params);

/// Builds a task from its JSON description (the inverse of describe()).
std::unique_ptr<BilevelTask> make_task_from_json(const nlohmann::json& description);

}  // namespace nhgd
