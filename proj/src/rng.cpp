#include "stc/rng.hpp"

#include <cmath>

#include "stc/errors.hpp"

namespace stc {

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed) : gen_(seed) {}

double Rng::uniform() {
  return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::integer(std::uint64_t n) {
  if (n == 0) throw UsageError("Rng::integer: n must be positive");
  // Rejection sampling keeps the distribution exactly uniform.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = gen_();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 6.283185307179586476925286766559 * u2;
  spare_ = r * std::sin(a);
  has_spare_ = true;
  return r * std::cos(a);
}

double Rng::gamma(double shape) {
  if (!(shape > 0.0)) throw DomainError("Rng::gamma: shape must be positive");
  if (shape < 1.0) {
    // Boost to shape+1 and scale back.
    const double u = uniform();
    return gamma(shape + 1.0) * std::pow(u > 0 ? u : 1e-300, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (u > 0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

long Rng::poisson(double lambda) {
  if (lambda < 0.0 || !std::isfinite(lambda)) {
    throw DomainError("Rng::poisson: lambda must be finite and nonnegative");
  }
  if (lambda == 0.0) return 0;
  // Additivity split keeps exp(-lambda) away from underflow while staying exact.
  long total = 0;
  while (lambda > 500.0) {
    const double half = lambda * 0.5;
    total += poisson(half);
    lambda -= half;
  }
  const double limit = std::exp(-lambda);
  long k = 0;
  double p = 1.0;
  do {
    ++k;
    p *= uniform();
  } while (p > limit);
  return total + k - 1;
}

Rng RngPool::stream(std::string_view name) const {
  return Rng(splitmix64(master_ ^ fnv1a64(name)));
}

RngPool RngPool::derive(std::string_view name) const {
  return RngPool(splitmix64(master_ ^ splitmix64(fnv1a64(name))));
}

RngPool RngPool::derive(std::uint64_t salt) const {
  return RngPool(splitmix64(master_ ^ splitmix64(salt + 0x51ed2701ull)));
}

}  // namespace stc
