#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace distil {

// splitmix64 finalizer; used to derive independent sub-seeds from one run seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

// Deterministic generator. The value conversions are implemented here rather
// than with <random> distributions, whose output is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  // Uniform integer in [0, n).
  std::size_t below(std::size_t n);
  double normal();
  // Standard normal resampled until |z| <= 2, then scaled.
  double truncated_normal(double stddev);
  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace distil
