#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace stc {

// One pseudo-random stream. All sampling goes through these methods so that
// a run is reproducible bit-for-bit from the master seed alone; the standard
// library distributions are avoided because their draw sequences are
// implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  // Uniform in [0, 1), 53-bit mantissa.
  double uniform();
  // Uniform in [0, n).
  std::uint64_t integer(std::uint64_t n);
  // Standard normal, Box-Muller with a cached spare.
  double normal();
  // Gamma(shape, scale=1), Marsaglia-Tsang (exact).
  double gamma(double shape);
  // Poisson(lambda), exact for any finite lambda.
  long poisson(double lambda);

  std::uint64_t raw() { return gen_(); }

 private:
  std::mt19937_64 gen_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Derives independent named streams from a master seed. Adding a consumer of
// one stream never perturbs draws seen by another.
class RngPool {
 public:
  explicit RngPool(std::uint64_t master_seed) : master_(master_seed) {}

  // Stream seeded from (master, name).
  Rng stream(std::string_view name) const;
  // Child pool for a scoped context (fold index, seed index, ...).
  RngPool derive(std::string_view name) const;
  RngPool derive(std::uint64_t salt) const;

  std::uint64_t master() const { return master_; }

 private:
  std::uint64_t master_;
};

std::uint64_t fnv1a64(std::string_view s);
std::uint64_t splitmix64(std::uint64_t x);

}  // namespace stc
