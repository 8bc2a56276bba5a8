#pragma once

#include <vector>

#include "nhgd/tasks.hpp"

namespace nhgd {

/// Row-major C x stride parameter block; stride = dim (+1 with bias).
struct SoftmaxLayout {
  std::size_t classes = 0;
  std::size_t dim = 0;
  bool bias = false;

  std::size_t stride() const { return dim + (bias ? 1 : 0); }
  std::size_t params() const { return classes * stride(); }
};

/// Fills `probs` with softmax(Theta (x; 1?)) and returns -log probs[label].
double softmax_nll(const SoftmaxLayout& layout, const double* theta, const double* x, int label,
                   std::vector<double>& probs);

class DataCleaningTask final : public BilevelTask {
 public:
  explicit DataCleaningTask(const DataCleaningParams& params);

  std::string name() const override { return "data_cleaning"; }
  const TaskMetadata& metadata() const override { return meta_; }

  SampleBatch sample(Rng& rng, std::size_t batch_size) const override;

  DenseVector inner_grad_theta(const DenseVector& v, const DenseVector& theta,
                               const SampleBatch& batch) const override;
  DenseMatrix inner_cross_partial(const DenseVector& v, const DenseVector& theta,
                                  const SampleBatch& batch) const override;
  DenseMatrix inner_hessian(const DenseVector& v, const DenseVector& theta,
                            const SampleBatch& batch) const override;
  DenseVector inner_hvp(const DenseVector& v, const DenseVector& theta, const SampleBatch& batch,
                        const DenseVector& x) const override;

  double outer_value(const DenseVector& v, const DenseVector& theta, EvalSplit split) const override;
  DenseVector outer_grad_v(const DenseVector& v, const DenseVector& theta) const override;
  DenseVector outer_grad_theta(const DenseVector& v, const DenseVector& theta) const override;
  double test_metric(const DenseVector& v, const DenseVector& theta) const override;

  double inner_value_full(const DenseVector& v, const DenseVector& theta) const override;
  DenseVector inner_grad_full(const DenseVector& v, const DenseVector& theta) const override;
  DenseMatrix inner_hessian_full(const DenseVector& v, const DenseVector& theta) const override;
  DenseMatrix inner_cross_partial_full(const DenseVector& v, const DenseVector& theta) const override;

  DenseVector initial_outer() const override;
  nlohmann::json describe() const override;

  /// true where the training label was corrupted
  const std::vector<bool>& corruption_mask() const { return corrupted_; }
  const LabeledData& train() const { return train_; }
  const LabeledData& validation() const { return val_; }
  const LabeledData& test() const { return test_; }
  const SoftmaxLayout& layout() const { return layout_; }

 private:
  void check_dims(const DenseVector& v, const DenseVector& theta) const;
  double mean_nll(const LabeledData& data, const DenseVector& theta) const;

  DataCleaningParams params_;
  TaskMetadata meta_;
  SoftmaxLayout layout_;
  LabeledData train_;
  LabeledData val_;
  LabeledData test_;
  std::vector<bool> corrupted_;
  SampleBatch full_batch_;
};

class DataDistillationTask final : public BilevelTask {
 public:
  explicit DataDistillationTask(const DataDistillationParams& params);

  std::string name() const override { return "data_distillation"; }
  const TaskMetadata& metadata() const override { return meta_; }

  SampleBatch sample(Rng& rng, std::size_t batch_size) const override;

  DenseVector inner_grad_theta(const DenseVector& v, const DenseVector& theta,
                               const SampleBatch& batch) const override;
  DenseMatrix inner_cross_partial(const DenseVector& v, const DenseVector& theta,
                                  const SampleBatch& batch) const override;
  DenseMatrix inner_hessian(const DenseVector& v, const DenseVector& theta,
                            const SampleBatch& batch) const override;

  double outer_value(const DenseVector& v, const DenseVector& theta, EvalSplit split) const override;
  DenseVector outer_grad_v(const DenseVector& v, const DenseVector& theta) const override;
  DenseVector outer_grad_theta(const DenseVector& v, const DenseVector& theta) const override;
  double test_metric(const DenseVector& v, const DenseVector& theta) const override;

  double inner_value_full(const DenseVector& v, const DenseVector& theta) const override;
  DenseVector inner_grad_full(const DenseVector& v, const DenseVector& theta) const override;
  DenseMatrix inner_hessian_full(const DenseVector& v, const DenseVector& theta) const override;
  DenseMatrix inner_cross_partial_full(const DenseVector& v, const DenseVector& theta) const override;

  DenseVector initial_outer() const override;
  /// Outer variable drawn i.i.d. at the scale of the source data.
  DenseVector random_outer(std::uint64_t seed) const;
  nlohmann::json describe() const override;

  std::size_t distilled_count() const { return params_.n_per_class * params_.n_classes; }
  int distilled_label(std::size_t j) const { return static_cast<int>(j / params_.n_per_class); }
  const LabeledData& source() const { return source_; }
  const LabeledData& test() const { return test_; }

 private:
  void check_dims(const DenseVector& v, const DenseVector& theta) const;
  double mean_nll(const LabeledData& data, const DenseVector& theta) const;

  DataDistillationParams params_;
  TaskMetadata meta_;
  SoftmaxLayout layout_;
  LabeledData source_;
  LabeledData test_;
  SampleBatch full_batch_;
};

/// Area under the ROC curve of `scores` for separating positives (label
/// true) from negatives; ties count one half.
double roc_auc(const std::vector<double>& scores, const std::vector<bool>& positive);

}  // namespace nhgd
