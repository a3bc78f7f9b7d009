#pragma once

// Deterministic randomness. Every stream is derived from (seed, purpose, index)
// so that a given step or utterance draws the same values regardless of what
// ran before it; that is what makes resumed runs bit-identical.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace jooci {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Mixes any number of integers into one seed.
template <class... Ts>
std::uint64_t derive_seed(std::uint64_t seed, Ts... parts) {
  std::uint64_t h = splitmix64(seed);
  ((h = splitmix64(h ^ static_cast<std::uint64_t>(parts))), ...);
  return h;
}

// Named stream tags; fixed values so that adding a tag never shifts others.
enum class Stream : std::uint64_t {
  init = 1,
  mask = 2,
  batch = 3,
  augment = 4,
  teacher = 5,
  data = 6,
  kmeans = 7,
  probe = 8,
  gradcheck = 9,
};

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::mt19937_64& engine() { return engine_; }

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  // Uniform integer in [lo, hi].
  std::int64_t integer(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
  }
  bool bernoulli(double p) { return uniform() < p; }

  template <class T>
  std::vector<T> normal_vector(std::size_t n, double stddev = 1.0) {
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(normal(0.0, stddev));
    return v;
  }

  template <class T>
  std::vector<T> uniform_vector(std::size_t n, double lo, double hi) {
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(uniform(lo, hi));
    return v;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace jooci
