#include "nhgd/tasks.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>

#include <fmt/core.h>

#include "nhgd/softmax_tasks.hpp"

namespace nhgd {

DenseVector BilevelTask::inner_hvp(const DenseVector& v, const DenseVector& theta,
                                   const SampleBatch& batch, const DenseVector& x) const {
  return matvec(inner_hessian(v, theta, batch), x);
}

double clip_weight(double v) { return std::clamp(v, 0.0, 1.0); }

double clip_weight_slope(double v) { return (v > 0.0 && v < 1.0) ? 1.0 : 0.0; }

// ---------------------------------------------------------------------------
// IDX

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(fmt::format("cannot open {}", path.string()));
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset) {
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

}  // namespace

IdxDataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path) {
  const auto images = read_file(images_path);
  const auto labels = read_file(labels_path);

  if (images.size() < 16) throw Error(fmt::format("{}: truncated header", images_path.string()));
  if (labels.size() < 8) throw Error(fmt::format("{}: truncated header", labels_path.string()));
  if (read_be32(images, 0) != kIdxImageMagic) {
    throw Error(fmt::format("{}: bad magic 0x{:08x}", images_path.string(), read_be32(images, 0)));
  }
  if (read_be32(labels, 0) != kIdxLabelMagic) {
    throw Error(fmt::format("{}: bad magic 0x{:08x}", labels_path.string(), read_be32(labels, 0)));
  }

  const std::size_t n_images = read_be32(images, 4);
  const std::size_t rows = read_be32(images, 8);
  const std::size_t cols = read_be32(images, 12);
  const std::size_t n_labels = read_be32(labels, 4);
  if (n_images != n_labels) {
    throw Error(fmt::format("count mismatch: {} images vs {} labels", n_images, n_labels));
  }
  const std::size_t pixels = rows * cols;
  if (images.size() < 16 + n_images * pixels) {
    throw Error(fmt::format("{}: truncated image data", images_path.string()));
  }
  if (labels.size() < 8 + n_labels) throw Error(fmt::format("{}: truncated label data", labels_path.string()));

  IdxDataset ds;
  ds.image_rows = rows;
  ds.image_cols = cols;
  ds.features = DenseMatrix(n_images, pixels);
  for (std::size_t i = 0; i < n_images; ++i)
    for (std::size_t p = 0; p < pixels; ++p) ds.features(i, p) = images[16 + i * pixels + p] / 255.0;
  ds.labels.resize(n_labels);
  for (std::size_t i = 0; i < n_labels; ++i) ds.labels[i] = labels[8 + i];
  return ds;
}

// ---------------------------------------------------------------------------
// Gaussian location task

namespace {

nlohmann::json matrix_to_json(const DenseMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < m.rows(); ++i) rows.push_back(std::vector<double>(m.row(i).begin(), m.row(i).end()));
  return rows;
}

DenseMatrix matrix_from_json(const nlohmann::json& j) {
  const std::size_t r = j.size();
  const std::size_t c = r == 0 ? 0 : j.at(0).size();
  std::vector<double> values;
  for (const auto& row : j) {
    if (row.size() != c) throw DimensionError("ragged matrix in task description");
    for (const auto& x : row) values.push_back(x.get<double>());
  }
  return DenseMatrix(r, c, std::move(values));
}

class GaussianLocationTask final : public BilevelTask {
 public:
  explicit GaussianLocationTask(const GaussianTaskParams& params) : params_(params) {
    const std::size_t d2 = params.map_b.rows();
    const std::size_t d1 = params.map_b.cols();
    if (d2 == 0 || d1 == 0) throw DimensionError("gaussian task: B must be non-empty");
    if (params.target_c.size() != d2) throw DimensionError("gaussian task: c must have d_inner entries");
    if (!(params.noise_sigma > 0.0)) throw Error("gaussian task: noise_sigma must be positive");
    if (!(params.radius > 0.0)) throw Error("gaussian task: radius must be positive");
    if (params.mean) {
      if (params.mean->size() != d2) throw DimensionError("gaussian task: mean must have d_inner entries");
      mean_ = *params.mean;
    } else {
      Rng rng = RngFactory(params.rng_seed).stream(Stream::task);
      std::normal_distribution<double> normal;
      mean_ = DenseVector(d2);
      for (double& m : mean_) m = normal(rng);
    }
    if (params.initial_v && params.initial_v->size() != d1) {
      throw DimensionError("gaussian task: initial_v must have d_outer entries");
    }
    const double b_norm = spectral_norm_estimate(params.map_b, 200);
    meta_.d_inner = d2;
    meta_.d_outer = d1;
    meta_.mu = 1.0;
    // joint Hessian in (v, theta) is [B I]^T [B I], top eigenvalue 1 + |B|^2
    meta_.lip = 1.0 + b_norm * b_norm;
    meta_.radius = params.radius;
    meta_.lambda_reg = 0.0;
  }

  std::string name() const override { return "gaussian"; }
  const TaskMetadata& metadata() const override { return meta_; }

  SampleBatch sample(Rng& rng, std::size_t batch_size) const override {
    std::normal_distribution<double> normal(0.0, params_.noise_sigma);
    SampleBatch batch;
    batch.features = DenseMatrix(batch_size, meta_.d_inner);
    for (std::size_t b = 0; b < batch_size; ++b)
      for (std::size_t j = 0; j < meta_.d_inner; ++j) batch.features(b, j) = mean_[j] + normal(rng);
    return batch;
  }

  DenseVector inner_grad_theta(const DenseVector& v, const DenseVector& theta,
                               const SampleBatch& batch) const override {
    check(v, theta);
    const std::size_t n = batch.features.rows();
    if (n == 0 || batch.features.cols() != meta_.d_inner) throw DimensionError("gaussian task: bad batch");
    DenseVector g = theta + matvec(params_.map_b, v);
    DenseVector mean_xi(meta_.d_inner);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t j = 0; j < meta_.d_inner; ++j) mean_xi[j] += batch.features(b, j);
    mean_xi *= 1.0 / static_cast<double>(n);
    return g -= mean_xi;
  }

  DenseMatrix inner_cross_partial(const DenseVector& v, const DenseVector& theta,
                                  const SampleBatch&) const override {
    check(v, theta);
    return params_.map_b;
  }

  DenseMatrix inner_hessian(const DenseVector& v, const DenseVector& theta, const SampleBatch&) const override {
    check(v, theta);
    return DenseMatrix::identity(meta_.d_inner);
  }

  DenseVector inner_hvp(const DenseVector& v, const DenseVector& theta, const SampleBatch&,
                        const DenseVector& x) const override {
    check(v, theta);
    if (x.size() != meta_.d_inner) throw DimensionError("gaussian task: hvp vector size");
    return x;
  }

  double outer_value(const DenseVector& v, const DenseVector& theta, EvalSplit) const override {
    check(v, theta);
    const DenseVector r = theta - params_.target_c;
    return 0.5 * dot(r, r);
  }

  DenseVector outer_grad_v(const DenseVector& v, const DenseVector& theta) const override {
    check(v, theta);
    return DenseVector(meta_.d_outer);
  }

  DenseVector outer_grad_theta(const DenseVector& v, const DenseVector& theta) const override {
    check(v, theta);
    return theta - params_.target_c;
  }

  /// Phi(v) evaluated at the exact inner optimum.
  double test_metric(const DenseVector& v, const DenseVector& theta) const override {
    check(v, theta);
    const DenseVector r = *analytic_inner_opt(v) - params_.target_c;
    return 0.5 * dot(r, r);
  }

  double inner_value_full(const DenseVector& v, const DenseVector& theta) const override {
    check(v, theta);
    const DenseVector r = theta + matvec(params_.map_b, v) - mean_;
    const double s2 = params_.noise_sigma * params_.noise_sigma;
    return 0.5 * dot(r, r) + 0.5 * s2 * static_cast<double>(meta_.d_inner);
  }

  DenseVector inner_grad_full(const DenseVector& v, const DenseVector& theta) const override {
    check(v, theta);
    return theta + matvec(params_.map_b, v) - mean_;
  }

  DenseMatrix inner_hessian_full(const DenseVector& v, const DenseVector& theta) const override {
    check(v, theta);
    return DenseMatrix::identity(meta_.d_inner);
  }

  DenseMatrix inner_cross_partial_full(const DenseVector& v, const DenseVector& theta) const override {
    check(v, theta);
    return params_.map_b;
  }

  DenseVector initial_outer() const override {
    return params_.initial_v ? *params_.initial_v : DenseVector(meta_.d_outer);
  }

  std::optional<DenseVector> analytic_inner_opt(const DenseVector& v) const override {
    if (v.size() != meta_.d_outer) throw DimensionError("gaussian task: v size");
    return mean_ - matvec(params_.map_b, v);
  }

  // grad theta*(v) = -B, so grad Phi = -B^T (theta*(v) - c)
  std::optional<DenseVector> analytic_hypergradient(const DenseVector& v) const override {
    DenseVector g = matvec_transposed(params_.map_b, *analytic_inner_opt(v) - params_.target_c);
    return g *= -1.0;
  }

  nlohmann::json describe() const override {
    nlohmann::json j;
    j["name"] = name();
    j["map_b"] = matrix_to_json(params_.map_b);
    j["target_c"] = params_.target_c.values();
    j["mean"] = mean_.values();
    j["noise_sigma"] = params_.noise_sigma;
    j["rng_seed"] = params_.rng_seed;
    j["radius"] = params_.radius;
    if (params_.initial_v) j["initial_v"] = params_.initial_v->values();
    return j;
  }

 private:
  void check(const DenseVector& v, const DenseVector& theta) const {
    if (v.size() != meta_.d_outer || theta.size() != meta_.d_inner) {
      throw DimensionError(fmt::format("gaussian task: expected v[{}], theta[{}], got v[{}], theta[{}]",
                                       meta_.d_outer, meta_.d_inner, v.size(), theta.size()));
    }
  }

  GaussianTaskParams params_;
  DenseVector mean_;
  TaskMetadata meta_;
};

DenseVector vector_from_json(const nlohmann::json& j) { return DenseVector(j.get<std::vector<double>>()); }

}  // namespace

std::unique_ptr<BilevelTask> make_gaussian_location_task(const GaussianTaskParams& params) {
  return std::make_unique<GaussianLocationTask>(params);
}

std::unique_ptr<BilevelTask> make_random_gaussian_task(std::size_t d_inner, std::size_t d_outer,
                                                       std::uint64_t seed, double b_norm) {
  Rng rng = RngFactory(seed).stream(Stream::task, 1);
  std::normal_distribution<double> normal;
  GaussianTaskParams p;
  p.map_b = DenseMatrix(d_inner, d_outer);
  for (std::size_t i = 0; i < d_inner; ++i)
    for (std::size_t j = 0; j < d_outer; ++j) p.map_b(i, j) = normal(rng);
  const double s = spectral_norm_estimate(p.map_b, 200);
  if (s > 0.0) p.map_b *= b_norm / s;
  p.target_c = DenseVector(d_inner);
  for (double& c : p.target_c) c = normal(rng);
  p.rng_seed = seed;
  return make_gaussian_location_task(p);
}

std::unique_ptr<BilevelTask> make_task_from_json(const nlohmann::json& j) {
  const std::string name = j.at("name").get<std::string>();
  auto idx_source = [&]() -> std::optional<IdxSource> {
    if (!j.contains("idx_images")) return std::nullopt;
    return IdxSource{j.at("idx_images").get<std::string>(), j.at("idx_labels").get<std::string>()};
  };
  if (name == "gaussian") {
    if (!j.contains("map_b")) {
      return make_random_gaussian_task(j.at("d_inner").get<std::size_t>(), j.at("d_outer").get<std::size_t>(),
                                       j.value("rng_seed", std::uint64_t{0}), j.value("b_norm", 0.5));
    }
    GaussianTaskParams p;
    p.map_b = matrix_from_json(j.at("map_b"));
    p.target_c = vector_from_json(j.at("target_c"));
    if (j.contains("mean")) p.mean = vector_from_json(j.at("mean"));
    if (j.contains("initial_v")) p.initial_v = vector_from_json(j.at("initial_v"));
    p.noise_sigma = j.value("noise_sigma", 1.0);
    p.rng_seed = j.value("rng_seed", std::uint64_t{0});
    p.radius = j.value("radius", 1e6);
    return make_gaussian_location_task(p);
  }
  if (name == "data_cleaning") {
    DataCleaningParams p;
    p.n_train = j.value("n_train", p.n_train);
    p.d_feat = j.value("d_feat", p.d_feat);
    p.n_classes = j.value("n_classes", p.n_classes);
    p.corruption_rate = j.value("corruption_rate", p.corruption_rate);
    p.lambda_reg = j.value("lambda_reg", p.lambda_reg);
    p.rng_seed = j.value("rng_seed", p.rng_seed);
    p.val_fraction = j.value("val_fraction", p.val_fraction);
    p.test_fraction = j.value("test_fraction", p.test_fraction);
    p.initial_weight = j.value("initial_weight", p.initial_weight);
    p.synthetic_weight_scale = j.value("synthetic_weight_scale", p.synthetic_weight_scale);
    p.radius = j.value("radius", p.radius);
    p.idx = idx_source();
    return make_data_cleaning_task(p);
  }
  if (name == "data_distillation") {
    DataDistillationParams p;
    p.n_per_class = j.value("n_per_class", p.n_per_class);
    p.n_classes = j.value("n_classes", p.n_classes);
    p.d_feat = j.value("d_feat", p.d_feat);
    p.lambda_reg = j.value("lambda_reg", p.lambda_reg);
    p.rng_seed = j.value("rng_seed", p.rng_seed);
    p.n_source = j.value("n_source", p.n_source);
    p.n_test = j.value("n_test", p.n_test);
    p.cluster_separation = j.value("cluster_separation", p.cluster_separation);
    p.init = j.value("init", std::string("class_means")) == "random" ? DistillInit::random : DistillInit::class_means;
    p.radius = j.value("radius", p.radius);
    p.idx = idx_source();
    return make_data_distillation_task(p);
  }
  throw Error(fmt::format("unknown task '{}' (expected gaussian, data_cleaning or data_distillation)", name));
}

}  // namespace nhgd
