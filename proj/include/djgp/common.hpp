#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace djgp {

// Error categories map 1:1 onto CLI exit codes: input 2, numerical 3, I/O 4.
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Process-wide count of recovered numerical events (variance clamps, forced
// in-region labels, skipped prediction samples). Informational only.
std::atomic<uint64_t>& warning_counter();

// Deterministic RNG. The mt19937_64 core is fully specified by the standard;
// the transforms below avoid std::*_distribution, whose output differs across
// standard-library implementations. Streams derived through split() depend
// only on the root seed and the stream id, never on draw position.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), eng_(seed), cached_(false), cache_(0.0) {}

  uint64_t seed() const { return seed_; }
  uint64_t next_u64() { return eng_(); }

  // in [0, 1), 53-bit resolution
  double uniform01() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Box-Muller; deviates are produced in pairs and the second one is cached.
  double normal() {
    if (cached_) {
      cached_ = false;
      return cache_;
    }
    double u1 = 1.0 - uniform01();  // in (0, 1], keeps log finite
    double u2 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925287 * u2;
    cache_ = r * std::sin(a);
    cached_ = true;
    return r * std::cos(a);
  }

  // in [0, n), bounded rejection keeps the draw unbiased
  int uniform_int(int n) {
    if (n <= 0) throw InputError("uniform_int: n must be positive");
    uint64_t un = static_cast<uint64_t>(n);
    uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    uint64_t u;
    do {
      u = eng_();
    } while (u >= limit);
    return static_cast<int>(u % un);
  }

  // Fisher-Yates
  std::vector<int> permutation(int n) {
    std::vector<int> p(n);
    for (int i = 0; i < n; ++i) p[i] = i;
    for (int i = n - 1; i > 0; --i) {
      int j = uniform_int(i + 1);
      std::swap(p[i], p[j]);
    }
    return p;
  }

  // Independent child stream; repeated calls with the same id give the same
  // stream regardless of how far this generator has advanced.
  Rng split(uint64_t stream) const { return Rng(mix(seed_, stream)); }

  // splitmix64-based combiner
  static uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

 private:
  uint64_t seed_;
  std::mt19937_64 eng_;
  bool cached_;
  double cache_;
};

inline double sq(double x) { return x * x; }

// log sigma(x), stable on both tails
inline double log_sigmoid(double x) {
  return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

// log(e^a + e^b) without overflow
inline double log_add_exp(double a, double b) {
  if (a >= b) return a + std::log1p(std::exp(b - a));
  return b + std::log1p(std::exp(a - b));
}

}  // namespace djgp
