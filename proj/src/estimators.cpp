#include "nhgd/estimators.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <fmt/core.h>

namespace nhgd {

EfimInverseState EfimInverseState::make(std::size_t dim, const EfimConfig& config) {
  if (dim == 0) throw DimensionError("efim: dimension must be positive");
  if (!(config.damping >= 0.0)) throw Error("efim: damping must be nonnegative");
  EfimInverseState s;
  s.mode = config.mode;
  s.damping = config.damping;
  if (config.mode == EfimMode::smoothed) {
    if (!(config.beta > 0.0 && config.beta < 1.0)) throw Error(fmt::format("efim: beta {} outside (0, 1)", config.beta));
    if (!(config.damping > 0.0)) throw Error("efim: smoothed mode needs damping > 0 for its initial A");
    s.beta = config.beta;
    s.a = (1.0 / config.damping) * DenseMatrix::identity(dim);
  } else {
    s.a = DenseMatrix(dim, dim);
  }
  return s;
}

ObserveStatus efim_observe(EfimInverseState& state, const DenseVector& g) {
  if (g.size() != state.dim()) {
    throw DimensionError(fmt::format("efim_observe: gradient size {} for A {}", g.size(), shape_string(state.a)));
  }
  if (!g.all_finite()) throw NumericalError("efim_observe: non-finite gradient");
  try {
    if (state.mode == EfimMode::smoothed) {
      sm_smoothed_inverse_update_in_place(state.a, g, state.beta);
    } else if (state.count == 0) {
      DenseMatrix m = outer_product(g, g);
      for (std::size_t i = 0; i < m.rows(); ++i) m(i, i) += state.damping;
      state.a = direct_inverse(m);
      symmetrize(state.a);
    } else {
      sm_avg_inverse_update_in_place(state.a, g, state.count);
    }
  } catch (const NumericalError&) {
    ++state.skipped;
    return ObserveStatus::skipped;
  }
  ++state.count;
  return ObserveStatus::applied;
}

void efim_begin_outer(EfimInverseState& state, const EfimConfig& config) {
  if (!config.carries_counter()) {
    if (state.mode == EfimMode::smoothed) {
      state.a = (1.0 / state.damping) * DenseMatrix::identity(state.dim());
    }
    state.count = 0;
  }
}

CrossPartialState CrossPartialState::make(std::size_t d_inner, std::size_t d_outer, const CrossPartialConfig& config) {
  if (config.mode == CrossPartialMode::endpoint && config.m == 0) throw Error("cross-partial: endpoint m must be >= 1");
  CrossPartialState s;
  s.l = DenseMatrix(d_inner, d_outer);
  s.mode = config.mode;
  s.m = config.m;
  return s;
}

void cross_partial_observe(CrossPartialState& state, const DenseMatrix& b) {
  if (state.mode != CrossPartialMode::trajectory) throw Error("cross_partial_observe: state is in endpoint mode");
  if (b.rows() != state.l.rows() || b.cols() != state.l.cols()) {
    throw DimensionError(
        fmt::format("cross_partial_observe: got {} for L {}", shape_string(b), shape_string(state.l)));
  }
  if (!b.all_finite()) throw NumericalError("cross_partial_observe: non-finite cross-partial");
  if (state.count == 0) {
    state.l = b;
  } else {
    const double t = static_cast<double>(state.count);
    const double keep = t / (t + 1.0);
    const double add = 1.0 / (t + 1.0);
    double* l = state.l.data();
    const double* bb = b.data();
    const std::size_t n = state.l.rows() * state.l.cols();
    for (std::size_t i = 0; i < n; ++i) l[i] = keep * l[i] + add * bb[i];
  }
  ++state.count;
}

void cross_partial_begin_outer(CrossPartialState& state, const CrossPartialConfig& config) {
  if (!config.carries_counter()) state.count = 0;
}

CrossPartialState cross_partial_endpoint(const BilevelTask& task, const DenseVector& v, const DenseVector& theta_t,
                                         std::size_t m, std::size_t batch_size, const RngFactory& rngs,
                                         std::uint64_t k) {
  if (m == 0) throw Error("cross_partial_endpoint: m must be >= 1");
  const auto& meta = task.metadata();
  CrossPartialState s;
  s.mode = CrossPartialMode::endpoint;
  s.m = m;
  s.l = DenseMatrix(meta.d_inner, meta.d_outer);
  for (std::size_t i = 0; i < m; ++i) {
    Rng rng = rngs.stream(Stream::endpoint, k, i);
    s.l += task.inner_cross_partial(v, theta_t, task.sample(rng, batch_size));
  }
  s.l *= 1.0 / static_cast<double>(m);
  s.count = static_cast<std::int64_t>(m);
  return s;
}

namespace {

DenseVector optimum_for(const BilevelTask& task, const DenseVector& v, const std::optional<DenseVector>& theta_star,
                        const char* what) {
  if (theta_star) return *theta_star;
  auto opt = task.analytic_inner_opt(v);
  if (!opt) throw Error(fmt::format("{}: task '{}' has no closed-form optimum; pass theta*", what, task.name()));
  return *opt;
}

}  // namespace

double efim_error(const EfimInverseState& state, const BilevelTask& task, const DenseVector& v,
                  const std::optional<DenseVector>& theta_star) {
  const DenseVector opt = optimum_for(task, v, theta_star, "efim_error");
  const DenseMatrix h_inv = direct_inverse(task.inner_hessian_full(v, opt));
  return spectral_norm_estimate(state.a - h_inv, 200);
}

double cross_partial_error(const CrossPartialState& state, const BilevelTask& task, const DenseVector& v,
                           const std::optional<DenseVector>& theta_star) {
  const DenseVector opt = optimum_for(task, v, theta_star, "cross_partial_error");
  return spectral_norm_estimate(state.l - task.inner_cross_partial_full(v, opt), 200);
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

constexpr char kMagic[8] = {'N', 'H', 'G', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const std::filesystem::path& path) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw Error(fmt::format("checkpoint {}: truncated", path.string()));
  return value;
}

void put_matrix(std::ofstream& out, const DenseMatrix& m) {
  put<std::uint64_t>(out, m.rows());
  put<std::uint64_t>(out, m.cols());
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.values().size() * sizeof(double)));
}

DenseMatrix get_matrix(std::ifstream& in, const std::filesystem::path& path) {
  const auto rows = get<std::uint64_t>(in, path);
  const auto cols = get<std::uint64_t>(in, path);
  if (rows > (1u << 20) || cols > (1u << 20)) throw Error(fmt::format("checkpoint {}: implausible shape", path.string()));
  DenseMatrix m(rows, cols);
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(rows * cols * sizeof(double)));
  if (!in) throw Error(fmt::format("checkpoint {}: truncated payload", path.string()));
  if (!m.all_finite()) throw NumericalError(fmt::format("checkpoint {}: non-finite payload", path.string()));
  return m;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const EfimInverseState& efim, const CrossPartialState& cross) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(fmt::format("checkpoint {}: cannot open for writing", path.string()));
  out.write(kMagic, sizeof kMagic);
  put(out, kVersion);
  put<std::uint32_t>(out, efim.mode == EfimMode::smoothed ? 1 : 0);
  put(out, efim.beta);
  put(out, efim.damping);
  put<std::int64_t>(out, efim.count);
  put<std::int64_t>(out, efim.skipped);
  put_matrix(out, efim.a);
  put<std::uint32_t>(out, cross.mode == CrossPartialMode::endpoint ? 1 : 0);
  put<std::uint64_t>(out, cross.m);
  put<std::int64_t>(out, cross.count);
  put_matrix(out, cross.l);
  if (!out) throw Error(fmt::format("checkpoint {}: write failed", path.string()));
}

void load_checkpoint(const std::filesystem::path& path, EfimInverseState& efim, CrossPartialState& cross) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(fmt::format("checkpoint {}: cannot open", path.string()));
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw Error(fmt::format("checkpoint {}: bad magic", path.string()));
  }
  if (const auto version = get<std::uint32_t>(in, path); version != kVersion) {
    throw Error(fmt::format("checkpoint {}: unsupported version {}", path.string(), version));
  }
  EfimInverseState e;
  e.mode = get<std::uint32_t>(in, path) == 1 ? EfimMode::smoothed : EfimMode::exact_averaging;
  e.beta = get<double>(in, path);
  e.damping = get<double>(in, path);
  e.count = get<std::int64_t>(in, path);
  e.skipped = get<std::int64_t>(in, path);
  e.a = get_matrix(in, path);
  CrossPartialState c;
  c.mode = get<std::uint32_t>(in, path) == 1 ? CrossPartialMode::endpoint : CrossPartialMode::trajectory;
  c.m = get<std::uint64_t>(in, path);
  c.count = get<std::int64_t>(in, path);
  c.l = get_matrix(in, path);
  if (!e.a.is_square()) throw Error(fmt::format("checkpoint {}: EFIM block is not square", path.string()));
  efim = std::move(e);
  cross = std::move(c);
}

}  // namespace nhgd
