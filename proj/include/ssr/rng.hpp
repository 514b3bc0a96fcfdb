#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace ssr {

// All randomness in the toolkit flows through these helpers on top of
// std::mt19937_64. The raw engine output is portable across standard
// libraries; the derived draws below are our own, so seeded runs are
// reproducible bit-for-bit everywhere (std::shuffle and the std
// distributions make no such promise).
using Rng = std::mt19937_64;

// Uniform integer in [0, n). Modulo reduction; bias is irrelevant at the
// sizes used here and the mapping is fixed.
inline std::uint64_t uniform_below(Rng& rng, std::uint64_t n) {
  return n == 0 ? 0 : rng() % n;
}

// Uniform double in [0, 1) with 53 random bits.
inline double uniform_real(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Standard normal via Box-Muller.
inline double normal(Rng& rng) {
  double u1 = uniform_real(rng);
  double u2 = uniform_real(rng);
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

// In-place Fisher-Yates shuffle.
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(uniform_below(rng, i));
    std::swap(v[i - 1], v[j]);
  }
}

// Identity permutation of size n, shuffled.
inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  shuffle(idx, rng);
  return idx;
}

}  // namespace ssr
