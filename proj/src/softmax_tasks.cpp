#include "nhgd/softmax_tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/core.h>

namespace nhgd {

double softmax_nll(const SoftmaxLayout& layout, const double* theta, const double* x, int label,
                   std::vector<double>& probs) {
  const std::size_t s = layout.stride();
  probs.resize(layout.classes);
  double zmax = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < layout.classes; ++c) {
    const double* w = theta + c * s;
    double z = layout.bias ? w[layout.dim] : 0.0;
    for (std::size_t a = 0; a < layout.dim; ++a) z += w[a] * x[a];
    probs[c] = z;
    zmax = std::max(zmax, z);
  }
  double sum = 0.0;
  for (double& p : probs) {
    p = std::exp(p - zmax);
    sum += p;
  }
  const double log_sum = std::log(sum);
  const double z_label = std::log(probs[static_cast<std::size_t>(label)]);
  for (double& p : probs) p /= sum;
  return log_sum - z_label;
}

namespace {

// (x; 1) when the layout carries a bias column
void augmented(const SoftmaxLayout& layout, const double* x, std::vector<double>& out) {
  out.assign(x, x + layout.dim);
  if (layout.bias) out.push_back(1.0);
}

// g[(c, a)] += coef * r_c * xt_a with r = p - e_label
void add_residual_outer(const SoftmaxLayout& layout, const std::vector<double>& probs, int label,
                        const std::vector<double>& xt, double coef, double* g) {
  const std::size_t s = layout.stride();
  for (std::size_t c = 0; c < layout.classes; ++c) {
    const double r = coef * (probs[c] - (static_cast<int>(c) == label ? 1.0 : 0.0));
    if (r == 0.0) continue;
    double* gc = g + c * s;
    for (std::size_t a = 0; a < s; ++a) gc[a] += r * xt[a];
  }
}

// H += coef * (diag p - p p^T) kron (xt xt^T)
void add_softmax_hessian(const SoftmaxLayout& layout, const std::vector<double>& probs,
                         const std::vector<double>& xt, double coef, DenseMatrix& h) {
  const std::size_t s = layout.stride();
  for (std::size_t c = 0; c < layout.classes; ++c) {
    for (std::size_t c2 = 0; c2 < layout.classes; ++c2) {
      const double w = coef * ((c == c2 ? probs[c] : 0.0) - probs[c] * probs[c2]);
      if (w == 0.0) continue;
      for (std::size_t a = 0; a < s; ++a) {
        double* row = h.data() + (c * s + a) * h.cols() + c2 * s;
        const double wa = w * xt[a];
        for (std::size_t a2 = 0; a2 < s; ++a2) row[a2] += wa * xt[a2];
      }
    }
  }
}

// out += coef * [(diag p - p p^T) kron (xt xt^T)] x, without forming the block
void add_softmax_hvp(const SoftmaxLayout& layout, const std::vector<double>& probs,
                     const std::vector<double>& xt, double coef, const DenseVector& x, DenseVector& out) {
  const std::size_t s = layout.stride();
  std::vector<double> z(layout.classes, 0.0);
  double pz = 0.0;
  for (std::size_t c = 0; c < layout.classes; ++c) {
    double acc = 0.0;
    for (std::size_t a = 0; a < s; ++a) acc += x[c * s + a] * xt[a];
    z[c] = acc;
    pz += probs[c] * acc;
  }
  for (std::size_t c = 0; c < layout.classes; ++c) {
    const double sc = coef * probs[c] * (z[c] - pz);
    if (sc == 0.0) continue;
    for (std::size_t a = 0; a < s; ++a) out[c * s + a] += sc * xt[a];
  }
}

void check_labels(const std::vector<int>& labels, std::size_t classes, const char* what) {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw Error(fmt::format("{}: label {} at position {} outside [0, {})", what, labels[i], i, classes));
    }
  }
}

LabeledData take_rows(const DenseMatrix& features, const std::vector<int>& labels,
                      const std::vector<std::size_t>& order, std::size_t begin, std::size_t count) {
  LabeledData out;
  out.features = DenseMatrix(count, features.cols());
  out.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t src = order[begin + i];
    std::copy(features.row(src).begin(), features.row(src).end(), out.features.row(i).begin());
    out.labels[i] = labels[src];
  }
  return out;
}

std::vector<std::size_t> shuffled_order(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

double accuracy(const SoftmaxLayout& layout, const LabeledData& data, const DenseVector& theta) {
  if (data.labels.empty()) return 0.0;
  std::vector<double> probs;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.labels.size(); ++i) {
    softmax_nll(layout, theta.data(), data.features.row(i).data(), data.labels[i], probs);
    const auto best = static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
    if (best == data.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.labels.size());
}

double squared_norm(const DenseVector& v) { return dot(v, v); }

}  // namespace

// ---------------------------------------------------------------------------
// DataCleaningTask

DataCleaningTask::DataCleaningTask(const DataCleaningParams& params) : params_(params) {
  if (params.n_classes < 2) throw Error("data cleaning: n_classes must be at least 2");
  if (!(params.corruption_rate >= 0.0 && params.corruption_rate < 1.0)) {
    throw Error("data cleaning: corruption_rate must lie in [0, 1)");
  }
  if (!(params.lambda_reg > 0.0)) {
    throw Error("data cleaning: lambda_reg must be positive (inner loss must be strongly convex)");
  }
  if (params.n_train == 0) throw Error("data cleaning: n_train must be positive");
  const auto n_val = static_cast<std::size_t>(std::llround(params.val_fraction * static_cast<double>(params.n_train)));
  const auto n_test =
      static_cast<std::size_t>(std::llround(params.test_fraction * static_cast<double>(params.n_train)));
  if (n_val == 0) throw Error("data cleaning: empty validation set");
  const std::size_t total = params.n_train + n_val + n_test;
  const RngFactory rngs(params.rng_seed);

  DenseMatrix features;
  std::vector<int> labels;
  if (params.idx) {
    IdxDataset ds = load_idx(params.idx->images, params.idx->labels);
    if (ds.size() < total) {
      throw Error(fmt::format("data cleaning: need {} samples, IDX files hold {}", total, ds.size()));
    }
    features = std::move(ds.features);
    labels = std::move(ds.labels);
  } else {
    // labels drawn from a random softmax model over (x; 1)
    Rng rng = rngs.stream(Stream::task, 1);
    std::normal_distribution<double> normal;
    const std::size_t d = params.d_feat;
    SoftmaxLayout truth{params.n_classes, d, true};
    std::vector<double> w(truth.params());
    const double scale = params.synthetic_weight_scale / std::sqrt(static_cast<double>(d + 1));
    for (double& wi : w) wi = scale * normal(rng);
    features = DenseMatrix(total, d);
    labels.resize(total);
    std::vector<double> probs;
    for (std::size_t i = 0; i < total; ++i) {
      for (std::size_t a = 0; a < d; ++a) features(i, a) = normal(rng);
      softmax_nll(truth, w.data(), features.row(i).data(), 0, probs);
      std::discrete_distribution<int> pick(probs.begin(), probs.end());
      labels[i] = pick(rng);
    }
  }

  Rng split_rng = rngs.stream(Stream::task, 2);
  const auto order = shuffled_order(features.rows(), split_rng);
  train_ = take_rows(features, labels, order, 0, params.n_train);
  val_ = take_rows(features, labels, order, params.n_train, n_val);
  test_ = take_rows(features, labels, order, params.n_train + n_val, n_test);
  check_labels(train_.labels, params.n_classes, "data cleaning train split");
  check_labels(val_.labels, params.n_classes, "data cleaning validation split");
  check_labels(test_.labels, params.n_classes, "data cleaning test split");

  // corrupt each training label with probability p, uniformly over the wrong classes
  Rng corrupt_rng = rngs.stream(Stream::task, 3);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_int_distribution<int> wrong(0, static_cast<int>(params.n_classes) - 2);
  corrupted_.assign(params.n_train, false);
  for (std::size_t i = 0; i < params.n_train; ++i) {
    if (unif(corrupt_rng) < params.corruption_rate) {
      const int r = wrong(corrupt_rng);
      train_.labels[i] = r < train_.labels[i] ? r : r + 1;
      corrupted_[i] = true;
    }
  }

  layout_ = SoftmaxLayout{params.n_classes, features.cols(), true};
  double max_sq = 0.0;
  for (std::size_t i = 0; i < train_.features.rows(); ++i) {
    double sq = 1.0;
    for (double x : train_.features.row(i)) sq += x * x;
    max_sq = std::max(max_sq, sq);
  }
  meta_.d_outer = params.n_train;
  meta_.d_inner = layout_.params();
  meta_.mu = 2.0 * params.lambda_reg;
  // (diag p - p p^T) <= I / 2, so the theta-Hessian is bounded by |x~|^2 / 2 + 2 lambda
  meta_.lip = 0.5 * max_sq + 2.0 * params.lambda_reg;
  meta_.radius = params.radius;
  meta_.lambda_reg = params.lambda_reg;

  full_batch_.indices.resize(params.n_train);
  std::iota(full_batch_.indices.begin(), full_batch_.indices.end(), 0);
  full_batch_.labels = train_.labels;
}

void DataCleaningTask::check_dims(const DenseVector& v, const DenseVector& theta) const {
  if (v.size() != meta_.d_outer || theta.size() != meta_.d_inner) {
    throw DimensionError(fmt::format("data cleaning: expected v[{}], theta[{}], got v[{}], theta[{}]",
                                     meta_.d_outer, meta_.d_inner, v.size(), theta.size()));
  }
}

SampleBatch DataCleaningTask::sample(Rng& rng, std::size_t batch_size) const {
  std::uniform_int_distribution<std::size_t> pick(0, params_.n_train - 1);
  SampleBatch batch;
  batch.indices.resize(batch_size);
  batch.labels.resize(batch_size);
  batch.features = DenseMatrix(batch_size, layout_.dim);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const std::size_t i = pick(rng);
    batch.indices[b] = i;
    batch.labels[b] = train_.labels[i];
    std::copy(train_.features.row(i).begin(), train_.features.row(i).end(), batch.features.row(b).begin());
  }
  return batch;
}

DenseVector DataCleaningTask::inner_grad_theta(const DenseVector& v, const DenseVector& theta,
                                               const SampleBatch& batch) const {
  check_dims(v, theta);
  const std::size_t n = batch.indices.size();
  if (n == 0) throw DimensionError("data cleaning: empty batch");
  DenseVector g = (2.0 * params_.lambda_reg) * theta;
  std::vector<double> probs, xt;
  for (std::size_t i : batch.indices) {
    const double w = clip_weight(v[i]);
    if (w == 0.0) continue;
    const double* x = train_.features.row(i).data();
    softmax_nll(layout_, theta.data(), x, train_.labels[i], probs);
    augmented(layout_, x, xt);
    add_residual_outer(layout_, probs, train_.labels[i], xt, w / static_cast<double>(n), g.data());
  }
  return g;
}

DenseMatrix DataCleaningTask::inner_cross_partial(const DenseVector& v, const DenseVector& theta,
                                                  const SampleBatch& batch) const {
  check_dims(v, theta);
  const std::size_t n = batch.indices.size();
  if (n == 0) throw DimensionError("data cleaning: empty batch");
  DenseMatrix m(meta_.d_inner, meta_.d_outer);
  DenseVector column(meta_.d_inner);
  std::vector<double> probs, xt;
  for (std::size_t i : batch.indices) {
    const double slope = clip_weight_slope(v[i]);
    if (slope == 0.0) continue;
    const double* x = train_.features.row(i).data();
    softmax_nll(layout_, theta.data(), x, train_.labels[i], probs);
    augmented(layout_, x, xt);
    column.fill(0.0);
    add_residual_outer(layout_, probs, train_.labels[i], xt, slope / static_cast<double>(n), column.data());
    for (std::size_t r = 0; r < meta_.d_inner; ++r) m(r, i) += column[r];
  }
  return m;
}

DenseMatrix DataCleaningTask::inner_hessian(const DenseVector& v, const DenseVector& theta,
                                            const SampleBatch& batch) const {
  check_dims(v, theta);
  const std::size_t n = batch.indices.size();
  if (n == 0) throw DimensionError("data cleaning: empty batch");
  DenseMatrix h = (2.0 * params_.lambda_reg) * DenseMatrix::identity(meta_.d_inner);
  std::vector<double> probs, xt;
  for (std::size_t i : batch.indices) {
    const double w = clip_weight(v[i]);
    if (w == 0.0) continue;
    const double* x = train_.features.row(i).data();
    softmax_nll(layout_, theta.data(), x, train_.labels[i], probs);
    augmented(layout_, x, xt);
    add_softmax_hessian(layout_, probs, xt, w / static_cast<double>(n), h);
  }
  symmetrize(h);
  return h;
}

DenseVector DataCleaningTask::inner_hvp(const DenseVector& v, const DenseVector& theta,
                                        const SampleBatch& batch, const DenseVector& x) const {
  check_dims(v, theta);
  if (x.size() != meta_.d_inner) throw DimensionError("data cleaning: hvp vector size");
  const std::size_t n = batch.indices.size();
  if (n == 0) throw DimensionError("data cleaning: empty batch");
  DenseVector out = (2.0 * params_.lambda_reg) * x;
  std::vector<double> probs, xt;
  for (std::size_t i : batch.indices) {
    const double w = clip_weight(v[i]);
    if (w == 0.0) continue;
    const double* xi = train_.features.row(i).data();
    softmax_nll(layout_, theta.data(), xi, train_.labels[i], probs);
    augmented(layout_, xi, xt);
    add_softmax_hvp(layout_, probs, xt, w / static_cast<double>(n), x, out);
  }
  return out;
}

double DataCleaningTask::mean_nll(const LabeledData& data, const DenseVector& theta) const {
  std::vector<double> probs;
  double acc = 0.0;
  for (std::size_t i = 0; i < data.labels.size(); ++i)
    acc += softmax_nll(layout_, theta.data(), data.features.row(i).data(), data.labels[i], probs);
  return acc / static_cast<double>(data.labels.size());
}

double DataCleaningTask::outer_value(const DenseVector& v, const DenseVector& theta, EvalSplit split) const {
  check_dims(v, theta);
  return mean_nll(split == EvalSplit::validation ? val_ : test_, theta);
}

DenseVector DataCleaningTask::outer_grad_v(const DenseVector& v, const DenseVector& theta) const {
  check_dims(v, theta);
  return DenseVector(meta_.d_outer);
}

DenseVector DataCleaningTask::outer_grad_theta(const DenseVector& v, const DenseVector& theta) const {
  check_dims(v, theta);
  DenseVector g(meta_.d_inner);
  std::vector<double> probs, xt;
  const double coef = 1.0 / static_cast<double>(val_.labels.size());
  for (std::size_t i = 0; i < val_.labels.size(); ++i) {
    const double* x = val_.features.row(i).data();
    softmax_nll(layout_, theta.data(), x, val_.labels[i], probs);
    augmented(layout_, x, xt);
    add_residual_outer(layout_, probs, val_.labels[i], xt, coef, g.data());
  }
  return g;
}

double DataCleaningTask::test_metric(const DenseVector& v, const DenseVector& theta) const {
  check_dims(v, theta);
  return accuracy(layout_, test_, theta);
}

double DataCleaningTask::inner_value_full(const DenseVector& v, const DenseVector& theta) const {
  check_dims(v, theta);
  std::vector<double> probs;
  double acc = 0.0;
  for (std::size_t i = 0; i < params_.n_train; ++i) {
    const double w = clip_weight(v[i]);
    if (w == 0.0) continue;
    acc += w * softmax_nll(layout_, theta.data(), train_.features.row(i).data(), train_.labels[i], probs);
  }
  return acc / static_cast<double>(params_.n_train) + params_.lambda_reg * squared_norm(theta);
}

DenseVector DataCleaningTask::inner_grad_full(const DenseVector& v, const DenseVector& theta) const {
  return inner_grad_theta(v, theta, full_batch_);
}

DenseMatrix DataCleaningTask::inner_hessian_full(const DenseVector& v, const DenseVector& theta) const {
  return inner_hessian(v, theta, full_batch_);
}

DenseMatrix DataCleaningTask::inner_cross_partial_full(const DenseVector& v, const DenseVector& theta) const {
  return inner_cross_partial(v, theta, full_batch_);
}

DenseVector DataCleaningTask::initial_outer() const { return DenseVector(params_.n_train, params_.initial_weight); }

nlohmann::json DataCleaningTask::describe() const {
  nlohmann::json j;
  j["name"] = name();
  j["n_train"] = params_.n_train;
  j["d_feat"] = params_.d_feat;
  j["n_classes"] = params_.n_classes;
  j["corruption_rate"] = params_.corruption_rate;
  j["lambda_reg"] = params_.lambda_reg;
  j["rng_seed"] = params_.rng_seed;
  j["val_fraction"] = params_.val_fraction;
  j["test_fraction"] = params_.test_fraction;
  j["initial_weight"] = params_.initial_weight;
  j["synthetic_weight_scale"] = params_.synthetic_weight_scale;
  j["radius"] = params_.radius;
  if (params_.idx) {
    j["idx_images"] = params_.idx->images.string();
    j["idx_labels"] = params_.idx->labels.string();
  }
  return j;
}

std::unique_ptr<DataCleaningTask> make_data_cleaning_task(const DataCleaningParams& params) {
  return std::make_unique<DataCleaningTask>(params);
}

// ---------------------------------------------------------------------------
// DataDistillationTask
//
// Outer variable layout: v[(k * n + i) * d + a] is feature a of distilled
// point i of class k.

DataDistillationTask::DataDistillationTask(const DataDistillationParams& params) : params_(params) {
  if (params.n_per_class == 0) throw Error("data distillation: n_per_class must be at least 1");
  if (params.n_classes < 2) throw Error("data distillation: n_classes must be at least 2");
  if (!(params.lambda_reg > 0.0)) throw Error("data distillation: lambda_reg must be positive");
  if (params.n_source == 0) throw Error("data distillation: empty source set");
  const RngFactory rngs(params.rng_seed);
  const std::size_t total = params.n_source + params.n_test;

  DenseMatrix features;
  std::vector<int> labels;
  if (params.idx) {
    IdxDataset ds = load_idx(params.idx->images, params.idx->labels);
    if (ds.size() < total) {
      throw Error(fmt::format("data distillation: need {} samples, IDX files hold {}", total, ds.size()));
    }
    features = std::move(ds.features);
    labels = std::move(ds.labels);
  } else {
    Rng rng = rngs.stream(Stream::task, 1);
    std::normal_distribution<double> normal;
    const std::size_t d = params.d_feat;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    DenseMatrix means(params.n_classes, d);
    for (std::size_t q = 0; q < params.n_classes * d; ++q) means.data()[q] = params.cluster_separation * inv_sqrt_d * normal(rng);
    std::uniform_int_distribution<int> pick(0, static_cast<int>(params.n_classes) - 1);
    features = DenseMatrix(total, d);
    labels.resize(total);
    for (std::size_t i = 0; i < total; ++i) {
      labels[i] = pick(rng);
      for (std::size_t a = 0; a < d; ++a)
        features(i, a) = means(static_cast<std::size_t>(labels[i]), a) + inv_sqrt_d * normal(rng);
    }
  }
  Rng split_rng = rngs.stream(Stream::task, 2);
  const auto order = shuffled_order(features.rows(), split_rng);
  source_ = take_rows(features, labels, order, 0, params.n_source);
  test_ = take_rows(features, labels, order, params.n_source, params.n_test);
  check_labels(source_.labels, params.n_classes, "data distillation source split");
  check_labels(test_.labels, params.n_classes, "data distillation test split");

  layout_ = SoftmaxLayout{params.n_classes, features.cols(), false};
  params_.d_feat = layout_.dim;
  meta_.d_outer = layout_.dim * distilled_count();
  meta_.d_inner = layout_.params();
  meta_.mu = 2.0 * params.lambda_reg;
  double max_sq = 0.0;
  const DenseVector init = initial_outer();
  for (std::size_t j = 0; j < distilled_count(); ++j) {
    double sq = 0.0;
    for (std::size_t a = 0; a < layout_.dim; ++a) sq += init[j * layout_.dim + a] * init[j * layout_.dim + a];
    max_sq = std::max(max_sq, sq);
  }
  // evaluated at the initial distilled set; the bound moves with v
  meta_.lip = 0.5 * max_sq + 2.0 * params.lambda_reg;
  meta_.radius = params.radius;
  meta_.lambda_reg = params.lambda_reg;

  full_batch_.indices.resize(distilled_count());
  std::iota(full_batch_.indices.begin(), full_batch_.indices.end(), 0);
  full_batch_.labels.resize(distilled_count());
  for (std::size_t j = 0; j < distilled_count(); ++j) full_batch_.labels[j] = distilled_label(j);
}

void DataDistillationTask::check_dims(const DenseVector& v, const DenseVector& theta) const {
  if (v.size() != meta_.d_outer || theta.size() != meta_.d_inner) {
    throw DimensionError(fmt::format("data distillation: expected v[{}], theta[{}], got v[{}], theta[{}]",
                                     meta_.d_outer, meta_.d_inner, v.size(), theta.size()));
  }
}

SampleBatch DataDistillationTask::sample(Rng& rng, std::size_t batch_size) const {
  if (batch_size >= distilled_count()) return full_batch_;
  std::uniform_int_distribution<std::size_t> pick(0, distilled_count() - 1);
  SampleBatch batch;
  batch.indices.resize(batch_size);
  batch.labels.resize(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b) {
    batch.indices[b] = pick(rng);
    batch.labels[b] = distilled_label(batch.indices[b]);
  }
  return batch;
}

DenseVector DataDistillationTask::inner_grad_theta(const DenseVector& v, const DenseVector& theta,
                                                   const SampleBatch& batch) const {
  check_dims(v, theta);
  const std::size_t n = batch.indices.size();
  if (n == 0) throw DimensionError("data distillation: empty batch");
  DenseVector g = (2.0 * params_.lambda_reg) * theta;
  std::vector<double> probs, xt;
  for (std::size_t j : batch.indices) {
    const double* x = v.data() + j * layout_.dim;
    const int label = distilled_label(j);
    softmax_nll(layout_, theta.data(), x, label, probs);
    augmented(layout_, x, xt);
    add_residual_outer(layout_, probs, label, xt, 1.0 / static_cast<double>(n), g.data());
  }
  return g;
}

// d/dx_b of (p_c - [c = k]) x_a = p_c (Theta_cb - (Theta^T p)_b) x_a + (p_c - [c = k]) [a = b]
DenseMatrix DataDistillationTask::inner_cross_partial(const DenseVector& v, const DenseVector& theta,
                                                      const SampleBatch& batch) const {
  check_dims(v, theta);
  const std::size_t n = batch.indices.size();
  if (n == 0) throw DimensionError("data distillation: empty batch");
  const std::size_t d = layout_.dim;
  const std::size_t classes = layout_.classes;
  DenseMatrix m(meta_.d_inner, meta_.d_outer);
  std::vector<double> probs;
  std::vector<double> mean_row(d);
  const double coef = 1.0 / static_cast<double>(n);
  for (std::size_t j : batch.indices) {
    const double* x = v.data() + j * d;
    const int label = distilled_label(j);
    softmax_nll(layout_, theta.data(), x, label, probs);
    std::fill(mean_row.begin(), mean_row.end(), 0.0);
    for (std::size_t c = 0; c < classes; ++c)
      for (std::size_t b = 0; b < d; ++b) mean_row[b] += probs[c] * theta[c * d + b];
    const std::size_t col0 = j * d;
    for (std::size_t c = 0; c < classes; ++c) {
      const double resid = probs[c] - (static_cast<int>(c) == label ? 1.0 : 0.0);
      for (std::size_t a = 0; a < d; ++a) {
        double* row = m.data() + (c * d + a) * m.cols() + col0;
        const double pxa = coef * probs[c] * x[a];
        for (std::size_t b = 0; b < d; ++b) row[b] += pxa * (theta[c * d + b] - mean_row[b]);
        row[a] += coef * resid;
      }
    }
  }
  return m;
}

DenseMatrix DataDistillationTask::inner_hessian(const DenseVector& v, const DenseVector& theta,
                                                const SampleBatch& batch) const {
  check_dims(v, theta);
  const std::size_t n = batch.indices.size();
  if (n == 0) throw DimensionError("data distillation: empty batch");
  DenseMatrix h = (2.0 * params_.lambda_reg) * DenseMatrix::identity(meta_.d_inner);
  std::vector<double> probs, xt;
  for (std::size_t j : batch.indices) {
    const double* x = v.data() + j * layout_.dim;
    softmax_nll(layout_, theta.data(), x, distilled_label(j), probs);
    augmented(layout_, x, xt);
    add_softmax_hessian(layout_, probs, xt, 1.0 / static_cast<double>(n), h);
  }
  symmetrize(h);
  return h;
}

double DataDistillationTask::mean_nll(const LabeledData& data, const DenseVector& theta) const {
  std::vector<double> probs;
  double acc = 0.0;
  for (std::size_t i = 0; i < data.labels.size(); ++i)
    acc += softmax_nll(layout_, theta.data(), data.features.row(i).data(), data.labels[i], probs);
  return acc / static_cast<double>(data.labels.size());
}

double DataDistillationTask::outer_value(const DenseVector& v, const DenseVector& theta, EvalSplit split) const {
  check_dims(v, theta);
  return mean_nll(split == EvalSplit::validation ? source_ : test_, theta);
}

DenseVector DataDistillationTask::outer_grad_v(const DenseVector& v, const DenseVector& theta) const {
  check_dims(v, theta);
  return DenseVector(meta_.d_outer);
}

DenseVector DataDistillationTask::outer_grad_theta(const DenseVector& v, const DenseVector& theta) const {
  check_dims(v, theta);
  DenseVector g(meta_.d_inner);
  std::vector<double> probs, xt;
  const double coef = 1.0 / static_cast<double>(source_.labels.size());
  for (std::size_t i = 0; i < source_.labels.size(); ++i) {
    const double* x = source_.features.row(i).data();
    softmax_nll(layout_, theta.data(), x, source_.labels[i], probs);
    augmented(layout_, x, xt);
    add_residual_outer(layout_, probs, source_.labels[i], xt, coef, g.data());
  }
  return g;
}

double DataDistillationTask::test_metric(const DenseVector& v, const DenseVector& theta) const {
  check_dims(v, theta);
  return accuracy(layout_, test_, theta);
}

double DataDistillationTask::inner_value_full(const DenseVector& v, const DenseVector& theta) const {
  check_dims(v, theta);
  std::vector<double> probs;
  double acc = 0.0;
  for (std::size_t j = 0; j < distilled_count(); ++j)
    acc += softmax_nll(layout_, theta.data(), v.data() + j * layout_.dim, distilled_label(j), probs);
  return acc / static_cast<double>(distilled_count()) + params_.lambda_reg * squared_norm(theta);
}

DenseVector DataDistillationTask::inner_grad_full(const DenseVector& v, const DenseVector& theta) const {
  return inner_grad_theta(v, theta, full_batch_);
}

DenseMatrix DataDistillationTask::inner_hessian_full(const DenseVector& v, const DenseVector& theta) const {
  return inner_hessian(v, theta, full_batch_);
}

DenseMatrix DataDistillationTask::inner_cross_partial_full(const DenseVector& v, const DenseVector& theta) const {
  return inner_cross_partial(v, theta, full_batch_);
}

DenseVector DataDistillationTask::initial_outer() const {
  if (params_.init == DistillInit::random) return random_outer(params_.rng_seed);
  const std::size_t d = layout_.dim;
  DenseMatrix means(layout_.classes, d);
  std::vector<std::size_t> counts(layout_.classes, 0);
  for (std::size_t i = 0; i < source_.labels.size(); ++i) {
    const auto k = static_cast<std::size_t>(source_.labels[i]);
    ++counts[k];
    for (std::size_t a = 0; a < d; ++a) means(k, a) += source_.features(i, a);
  }
  DenseVector v(meta_.d_outer);
  for (std::size_t j = 0; j < distilled_count(); ++j) {
    const auto k = static_cast<std::size_t>(distilled_label(j));
    const double inv = counts[k] == 0 ? 0.0 : 1.0 / static_cast<double>(counts[k]);
    for (std::size_t a = 0; a < d; ++a) v[j * d + a] = means(k, a) * inv;
  }
  return v;
}

DenseVector DataDistillationTask::random_outer(std::uint64_t seed) const {
  Rng rng = RngFactory(seed).stream(Stream::task, 4);
  const double scale = params_.idx ? 0.5 : params_.cluster_separation / std::sqrt(static_cast<double>(layout_.dim));
  std::normal_distribution<double> normal(0.0, scale);
  DenseVector v(layout_.dim * distilled_count());
  for (double& x : v) x = normal(rng);
  return v;
}

nlohmann::json DataDistillationTask::describe() const {
  nlohmann::json j;
  j["name"] = name();
  j["n_per_class"] = params_.n_per_class;
  j["n_classes"] = params_.n_classes;
  j["d_feat"] = params_.d_feat;
  j["lambda_reg"] = params_.lambda_reg;
  j["rng_seed"] = params_.rng_seed;
  j["n_source"] = params_.n_source;
  j["n_test"] = params_.n_test;
  j["cluster_separation"] = params_.cluster_separation;
  j["init"] = params_.init == DistillInit::random ? "random" : "class_means";
  j["radius"] = params_.radius;
  if (params_.idx) {
    j["idx_images"] = params_.idx->images.string();
    j["idx_labels"] = params_.idx->labels.string();
  }
  return j;
}

std::unique_ptr<DataDistillationTask> make_data_distillation_task(const DataDistillationParams& params) {
  return std::make_unique<DataDistillationTask>(params);
}

double roc_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw DimensionError("roc_auc: size mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // average ranks over ties
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  double pos = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (positive[i]) {
      pos += 1.0;
      rank_sum += rank[i];
    }
  }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0.0 || neg == 0.0) throw Error("roc_auc: need both positives and negatives");
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

}  // namespace nhgd
