#pragma once

// Built-in verification suites shared by the command-line selftest and the
// acceptance tests.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "fcss/css.hpp"
#include "fcss/descriptor.hpp"
#include "fcss/gradcheck.hpp"
#include "fcss/random.hpp"
#include "fcss/tensor.hpp"

namespace fcss {

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct OracleCase {
  int image_size = 0;
  int patterns = 0;
  int layers = 0;
  double max_relative_error = 0.0;
  std::size_t compared = 0;
};

namespace detail {

inline std::vector<ConvParams<double>> random_conv_stack(Rng& rng, int in_c, int layers) {
  std::vector<ConvParams<double>> stack;
  for (int l = 0; l < layers; ++l) {
    const int out_c = uniform_int(rng, 2, 6);
    const int k = uniform_int(rng, 0, 1) == 0 ? 1 : 3;
    ConvParams<double> p(out_c, in_c, k, k);
    for (auto& w : p.weights) w = uniform(rng, -0.6, 0.6);
    for (auto& b : p.bias) b = uniform(rng, -0.1, 0.3);
    stack.push_back(std::move(p));
    in_c = out_c;
  }
  return stack;
}

inline std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

inline double rel_diff(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12});
}

}  // namespace detail

// Efficient self-similarity (one conv pass, then shifts) against the
// per-pixel crop-and-convolve oracle, on interior pixels, in both shift modes.
inline OracleCase run_oracle_case(uint64_t seed) {
  Rng rng(seed);
  OracleCase oc;
  oc.image_size = uniform_int(rng, 12, 32);
  oc.patterns = uniform_int(rng, 1, 8);
  oc.layers = uniform_int(rng, 1, 3);
  Tensor<double> image(3, oc.image_size, oc.image_size);
  for (auto& v : image.data()) v = uniform(rng, 0.0, 1.0);
  const auto stack = detail::random_conv_stack(rng, 3, oc.layers);
  CssConfig cc;
  cc.patterns_per_level = oc.patterns;
  cc.pattern_radius = 3.0;
  auto level = init_patterns<double>(1, cc, rng, true).levels[0];

  const auto ref = css_reference(image, level, stack);
  const auto act = conv_stack_forward(image, stack);
  for (ShiftMode mode : {ShiftMode::nearest, ShiftMode::bilinear}) {
    const auto fast = css_forward(act, level, mode);
    const std::size_t plane = fast.plane_size();
    for (std::size_t p = 0; p < plane; ++p) {
      if (!ref.interior[p]) continue;
      for (int l = 0; l < fast.channels(); ++l) {
        oc.max_relative_error = std::max(
            oc.max_relative_error, detail::rel_diff(fast.data()[l * plane + p], ref.values.data()[l * plane + p]));
        ++oc.compared;
      }
    }
  }
  return oc;
}

struct SpeedupReport {
  double reference_seconds = 0.0;
  double efficient_seconds = 0.0;
  double speedup() const { return efficient_seconds > 0 ? reference_seconds / efficient_seconds : 0.0; }
};

// Times both self-similarity paths on a 64x64 image with 64 patterns.
inline SpeedupReport measure_css_speedup(uint64_t seed, int size = 64, int patterns = 64) {
  Rng rng(seed);
  Tensor<double> image(3, size, size);
  for (auto& v : image.data()) v = uniform(rng, 0.0, 1.0);
  std::vector<ConvParams<double>> stack;
  for (int l = 0, in_c = 3; l < 2; ++l, in_c = 8) {
    ConvParams<double> p(8, in_c, 3, 3);
    for (auto& w : p.weights) w = uniform(rng, -0.5, 0.5);
    stack.push_back(std::move(p));
  }
  CssConfig cc;
  cc.patterns_per_level = patterns;
  const auto level = init_patterns<double>(1, cc, rng, true).levels[0];
  using clock = std::chrono::steady_clock;
  SpeedupReport r;
  auto t0 = clock::now();
  const auto act = conv_stack_forward(image, stack);
  [[maybe_unused]] const auto fast = css_forward(act, level, ShiftMode::nearest);
  auto t1 = clock::now();
  [[maybe_unused]] const auto ref = css_reference(image, level, stack);
  auto t2 = clock::now();
  r.efficient_seconds = std::chrono::duration<double>(t1 - t0).count();
  r.reference_seconds = std::chrono::duration<double>(t2 - t1).count();
  return r;
}

struct SelftestOptions {
  uint64_t seed = 1;
  int oracle_cases = 20;
  bool force_failure = false;  // test hook
};

struct SelftestReport {
  std::vector<SuiteResult> suites;
  SpeedupReport speed;

  bool passed() const {
    for (const auto& s : suites)
      if (!s.passed) return false;
    return true;
  }
};

inline SelftestReport run_selftest(const SelftestOptions& opt) {
  SelftestReport rep;

  {
    double worst = 0.0;
    for (int i = 0; i < opt.oracle_cases; ++i)
      worst = std::max(worst, run_oracle_case(opt.seed * 1000 + i).max_relative_error);
    rep.suites.push_back({"oracle_equivalence", worst <= 1e-6,
                          "cases=" + std::to_string(opt.oracle_cases) + " max_rel_err=" + detail::num(worst)});
  }

  {
    GradcheckOptions go;
    go.seed = opt.seed;
    double worst = 0.0;
    bool ok = true;
    for (const auto& g : run_gradcheck(go)) {
      worst = std::max(worst, g.max_relative_error);
      ok = ok && g.passed(go.tolerance);
    }
    rep.suites.push_back({"gradients", ok, "max_rel_err=" + detail::num(worst)});
  }

  {
    // Nonnegativity, stream symmetry, pool dominance.
    Rng rng(opt.seed + 7);
    Tensor<double> act(4, 16, 16);
    for (auto& v : act.data()) v = uniform(rng, -1.0, 1.0);
    CssConfig cc;
    cc.patterns_per_level = 8;
    auto lvl = init_patterns<double>(1, cc, rng).levels[0];
    const auto css = css_forward(act, lvl);
    auto swapped = lvl;
    std::swap(swapped.s, swapped.t);
    const auto css_sw = css_forward(act, swapped);
    const auto p0 = gate_and_pool(css, lvl.bandwidth(), 0);
    const auto p2 = gate_and_pool(css, lvl.bandwidth(), 2);
    bool ok = true;
    for (std::size_t i = 0; i < css.size(); ++i) {
      ok = ok && css.data()[i] >= 0.0 && css.data()[i] == css_sw.data()[i];
      ok = ok && p0.data()[i] > 0.0 && p0.data()[i] <= 1.0 && p2.data()[i] >= p0.data()[i];
    }
    rep.suites.push_back({"css_invariants", ok, ""});
  }

  {
    Rng rng(opt.seed + 11);
    auto m = make_model<double>(rng);
    Tensor<double> img(3, 32, 32);
    for (auto& v : img.data()) v = uniform(rng, 0.0, 1.0);
    const auto f = extract_dense(img, m);
    double worst = 0.0;
    for (int y = 0; y < f.height(); ++y)
      for (int x = 0; x < f.width(); ++x) {
        double n2 = 0.0;
        for (int c = 0; c < f.dim(); ++c) n2 += f.values(c, y, x) * f.values(c, y, x);
        worst = std::max(worst, std::abs(std::sqrt(n2) - 1.0));
      }
    rep.suites.push_back({"descriptor_unit_norm", worst <= 1e-5 && f.dim() == 192,
                          "L=" + std::to_string(f.dim()) + " max_norm_dev=" + detail::num(worst)});
  }

  rep.speed = measure_css_speedup(opt.seed);
  rep.suites.push_back({"css_speedup", rep.speed.speedup() > 1.0, "speedup=" + detail::num(rep.speed.speedup())});

  if (opt.force_failure) rep.suites.push_back({"forced_failure", false, "requested by --force-fail"});
  return rep;
}

}  // namespace fcss
