#pragma once

#include <cstdint>
#include <vector>

namespace ctxtrack {

/// Counter-based splittable generator.
///
/// Output i of a stream with key K is mix64(K + (i + 1) * 0x9E3779B97F4A7C15), where
/// mix64 is the SplitMix64 finaliser (xor-shift 30, multiply 0xBF58476D1CE4E5B9,
/// xor-shift 27, multiply 0x94D049BB133111EB, xor-shift 31). A child stream s has
/// key mix64(K ^ mix64(s + 0xD1B54A32D192ED03)). Uniform doubles take the top 53
/// bits; normals use Box-Muller (cosine branch only), consuming two uniforms.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : key_(key) {}

  static std::uint64_t mix64(std::uint64_t z);

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  /// Uniform integer in [0, n): high 64 bits of next_u64() * n.
  std::size_t below(std::size_t n);
  /// Fisher-Yates permutation of 0..n-1 (swap i with below(i + 1), i descending).
  std::vector<std::size_t> permutation(std::size_t n);

  CounterRng split(std::uint64_t stream) const;

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace ctxtrack
