#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace fcss {

// All randomness in the library flows through this engine type.
using Rng = std::mt19937_64;

template <typename T = double>
T uniform(Rng& rng, T lo, T hi) {
  return static_cast<T>(std::uniform_real_distribution<double>(lo, hi)(rng));
}

inline int uniform_int(Rng& rng, int lo, int hi_inclusive) {
  return std::uniform_int_distribution<int>(lo, hi_inclusive)(rng);
}

// Uniform point in the disk of the given radius.
template <typename T>
void uniform_in_disk(Rng& rng, T radius, T& x, T& y) {
  const double r = radius * std::sqrt(uniform(rng, 0.0, 1.0));
  const double a = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  x = static_cast<T>(r * std::cos(a));
  y = static_cast<T>(r * std::sin(a));
}

}  // namespace fcss
