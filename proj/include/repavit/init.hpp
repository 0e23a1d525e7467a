#pragma once

// Deterministic weight initialization. Every tensor draws from its own
// counter-based stream keyed by (global seed, tensor name): element i of a
// tensor depends only on the key and i, never on how many tensors were
// initialized before it.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

#include "repavit/tensor.hpp"

namespace repavit {

/// SplitMix64 finalizer used as a stateless counter-mode generator.
class CounterRng {
 public:
  constexpr CounterRng(std::uint64_t seed, std::string_view stream) : key_(mix(seed ^ fnv1a(stream))) {}
  constexpr explicit CounterRng(std::uint64_t key) : key_(mix(key)) {}

  constexpr std::uint64_t bits(std::uint64_t counter) const { return mix(key_ + counter * kGolden); }

  /// Uniform in the open interval (0, 1), 53 bits.
  double uniform(std::uint64_t counter) const {
    return (static_cast<double>(bits(counter) >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Standard normal draw via Box-Muller on two counters.
  double normal(std::uint64_t counter) const {
    const double u1 = uniform(2 * counter);
    const double u2 = uniform(2 * counter + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Standard normal restricted to [-bound, bound] by rejection. Attempts for
  /// element i use counters in i's own slot, so elements stay independent.
  double truncated_normal(std::uint64_t index, double bound) const {
    for (std::uint64_t attempt = 0; attempt < kSlot; ++attempt) {
      const double z = normal(index * kSlot + attempt);
      if (std::abs(z) <= bound) return z;
    }
    return 0.0;  // unreachable in practice: P(reject) ~ 0.046 per attempt for bound 2
  }

  static constexpr std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (char c : s) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ull;
    }
    return h;
  }

 private:
  static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ull;
  static constexpr std::uint64_t kSlot = 64;

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
};

struct TruncatedNormalInit {
  double stddev = 0.02;
  double clip_sigmas = 2.0;
};

/// rows x cols tensor of truncated-normal draws keyed by (seed, name).
template <Real T>
Matrix<T> init_weights(std::size_t rows, std::size_t cols, std::uint64_t seed, std::string_view name,
                       TruncatedNormalInit scheme = {}) {
  if (rows == 0 || cols == 0) throw ValidationError("init_weights: dimensions must be positive");
  const CounterRng rng(seed, name);
  Matrix<T> m(rows, cols);
  auto v = m.values();
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = static_cast<T>(scheme.stddev * rng.truncated_normal(i, scheme.clip_sigmas));
  return m;
}

template <Real T>
Vec<T> init_vector(std::size_t n, std::uint64_t seed, std::string_view name, TruncatedNormalInit scheme = {}) {
  return init_weights<T>(1, n, seed, name, scheme).storage();
}

}  // namespace repavit
