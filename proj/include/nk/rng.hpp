// Deterministic random numbers. Sampling is hand-rolled on top of
// mt19937_64 so streams are reproducible across standard libraries
// (std::*_distribution is implementation-defined).
#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace nk {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed)
      : g_(splitmix64(seed)), seed_hash_(splitmix64(seed ^ 0x5eedULL)) {}

  std::uint64_t raw() { return g_(); }

  double uniform() { return (double)(g_() >> 11) * 0x1.0p-53; }  // [0,1)

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::uint64_t integer(std::uint64_t n) {  // [0, n)
    return n ? (std::uint64_t)(uniform() * (double)n) % n : 0;
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = uniform(), u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(1.0 - u1));
    const double th = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(th);
    have_spare_ = true;
    return r * std::cos(th);
  }

  // independent child stream, independent of draw order on the parent
  Rng fork(std::uint64_t stream) const {
    return Rng(seed_hash_ ^ splitmix64(stream));
  }

 private:
  std::mt19937_64 g_;
  std::uint64_t seed_hash_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace nk
