#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace casreg {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Derives an independent stream seed from a base seed and a stream tag.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
  return splitmix64(base ^ splitmix64(tag));
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag_a,
                                    std::uint64_t tag_b) {
  return derive_seed(derive_seed(base, tag_a), tag_b);
}

// Deterministic RNG wrapper. Distributions are hand-rolled so sequences do
// not depend on the standard library's implementation of <random>
// distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t bits() { return gen_(); }

  // Uniform in [0, 1).
  double uniform01() { return double(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform integer in [0, n).
  int uniform_int(int n) {
    int v = int(uniform01() * n);
    return v < n ? v : n - 1;
  }

  // Standard normal via Box-Muller; one value per call, no caching, so the
  // stream position is a pure function of the call count.
  double normal() {
    double u1 = uniform01();
    double u2 = uniform01();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(6.283185307179586476925286766559 * u2);
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace casreg
