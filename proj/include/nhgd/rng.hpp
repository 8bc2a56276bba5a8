#pragma once

#include <cstdint>
#include <random>

namespace nhgd {

using Rng = std::mt19937_64;

/// Purpose tags keep draws for different consumers in disjoint streams.
enum class Stream : std::uint32_t {
  inner = 1,     // inner SGD minibatches, indexed (k, t)
  endpoint = 2,  // endpoint cross-partial batches, indexed (k, i)
  hvp = 3,       // baseline Hessian/Jacobian-vector product batches, indexed (k, call)
  task = 4,      // dataset synthesis inside task construction
  aux = 5,       // anything else a driver needs, indexed (k, i)
};

/// Seedable, splittable generator source. Every draw site gets its own
/// generator derived from (seed, stream, k, t), so the sample sequence is a
/// pure function of those coordinates no matter which thread consumes it.
class RngFactory {
 public:
  explicit RngFactory(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  Rng stream(Stream s, std::uint64_t k = 0, std::uint64_t t = 0) const {
    std::seed_seq seq{lo(seed_), hi(seed_), static_cast<std::uint32_t>(s), lo(k), hi(k), lo(t), hi(t)};
    return Rng(seq);
  }

 private:
  static std::uint32_t lo(std::uint64_t x) { return static_cast<std::uint32_t>(x); }
  static std::uint32_t hi(std::uint64_t x) { return static_cast<std::uint32_t>(x >> 32); }

  std::uint64_t seed_;
};

}  // namespace nhgd
