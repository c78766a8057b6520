#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fcss/random.hpp"
#include "fcss/tensor.hpp"

namespace fcss::testing {

template <typename T = double>
Tensor<T> random_tensor(Rng& rng, int c, int h, int w, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(c, h, w);
  for (auto& v : t.data()) v = uniform<T>(rng, lo, hi);
  return t;
}

template <typename T>
double dot(const Tensor<T>& a, const Tensor<T>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a.data()[i]) * b.data()[i];
  return s;
}

// Central difference of f with respect to every entry of params.
template <typename T, typename F>
std::vector<double> numeric_gradient(std::vector<T>& params, F&& f, double h) {
  std::vector<double> g(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T saved = params[i];
    params[i] = static_cast<T>(saved + h);
    const double up = f();
    params[i] = static_cast<T>(saved - h);
    const double down = f();
    params[i] = saved;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

// Largest entrywise relative error, with a floor of 1e-3 of the largest
// reference magnitude.
template <typename A>
double max_rel_error(const std::vector<A>& analytic, const std::vector<double>& numeric) {
  double scale = 0.0;
  for (double v : numeric) scale = std::max(scale, std::abs(v));
  const double floor = std::max(1e-3 * scale, 1e-12);
  double worst = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    const double a = static_cast<double>(analytic[i]);
    worst = std::max(worst, std::abs(a - numeric[i]) / std::max({std::abs(a), std::abs(numeric[i]), floor}));
  }
  return worst;
}

}  // namespace fcss::testing
