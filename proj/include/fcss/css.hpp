#pragma once

// Convolutional self-similarity: two-stream shifting transformer, the
// efficient self-similarity volume, its brute-force oracle, exponential
// gating with spatial max-pooling, and all adjoints.

#include <cmath>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

#include "fcss/error.hpp"
#include "fcss/parallel.hpp"
#include "fcss/random.hpp"
#include "fcss/tensor.hpp"

namespace fcss {

enum class ShiftMode {
  bilinear,  // continuous offsets, bilinear sampling; exact gradients
  nearest,   // offsets rounded to the pixel grid; finite-difference offset gradients
};

inline std::string_view to_string(ShiftMode m) {
  return m == ShiftMode::bilinear ? "continuous-bilinear" : "integer-nearest";
}

inline ShiftMode parse_shift_mode(std::string_view s) {
  if (s == "continuous-bilinear" || s == "bilinear") return ShiftMode::bilinear;
  if (s == "integer-nearest" || s == "nearest") return ShiftMode::nearest;
  throw ConfigError("unknown shift mode '" + std::string(s) +
                    "' (expected continuous-bilinear or integer-nearest)");
}

// Offsets are in feature-map pixels; x is the column axis.
template <typename T>
struct Offset {
  T x = T(0);
  T y = T(0);

  friend bool operator==(const Offset&, const Offset&) = default;
};

// One level's sampling patterns and its gating bandwidth, kept in log space
// so that the bandwidth stays positive under unconstrained updates.
template <typename T>
struct PatternLevel {
  std::vector<Offset<T>> s;
  std::vector<Offset<T>> t;
  T log_bandwidth = T(0);

  int size() const { return static_cast<int>(s.size()); }
  T bandwidth() const { return std::exp(log_bandwidth); }

  void validate() const {
    if (s.empty()) throw ConfigError("pattern level needs at least one sampling pattern");
    if (s.size() != t.size())
      throw ConfigError("pattern level has mismatched source/target offset counts");
    if (!std::isfinite(log_bandwidth)) throw ConfigError("pattern bandwidth is not finite");
  }

  friend bool operator==(const PatternLevel&, const PatternLevel&) = default;
};

template <typename T>
struct SamplingPatterns {
  std::vector<PatternLevel<T>> levels;

  int total() const {
    int n = 0;
    for (const auto& l : levels) n += l.size();
    return n;
  }

  void validate() const {
    if (levels.empty()) throw ConfigError("sampling patterns have no levels");
    for (const auto& l : levels) l.validate();
  }

  // Projects every offset back into the disk of the given radius.
  void clamp_to_radius(double radius) {
    auto clamp = [radius](Offset<T>& o) {
      const double n = std::hypot(static_cast<double>(o.x), static_cast<double>(o.y));
      if (n > radius) {
        o.x = static_cast<T>(o.x * (radius / n));
        o.y = static_cast<T>(o.y * (radius / n));
      }
    };
    for (auto& l : levels) {
      for (auto& o : l.s) clamp(o);
      for (auto& o : l.t) clamp(o);
    }
  }

  friend bool operator==(const SamplingPatterns&, const SamplingPatterns&) = default;
};

struct CssConfig {
  int patterns_per_level = 64;
  int pool_radius = 1;
  double pattern_radius = 4.0;
  double initial_bandwidth = 0.005;
  ShiftMode shift_mode = ShiftMode::bilinear;

  void validate() const {
    if (patterns_per_level < 1) throw ConfigError("need at least one pattern per level");
    if (pool_radius < 0) throw ConfigError("pool radius must be >= 0");
    if (!(pattern_radius >= 1.0)) throw ConfigError("pattern radius must be >= 1");
    if (!(initial_bandwidth > 0.0)) throw ConfigError("bandwidth must be positive");
  }

  friend bool operator==(const CssConfig&, const CssConfig&) = default;
};

namespace detail {
// Rounded draws are redrawn until they stay inside the disk.
template <typename T>
Offset<T> draw_offset(Rng& rng, T radius, bool integer_offsets) {
  for (;;) {
    Offset<T> o;
    uniform_in_disk(rng, radius, o.x, o.y);
    if (!integer_offsets) return o;
    o = {std::round(o.x), std::round(o.y)};
    if (std::hypot(static_cast<double>(o.x), static_cast<double>(o.y)) <= radius) return o;
  }
}
}  // namespace detail

// Offsets uniform in the disk of radius cfg.pattern_radius; rounded to the
// pixel grid when integer_offsets is set.
template <typename T>
SamplingPatterns<T> init_patterns(int levels, const CssConfig& cfg, Rng& rng,
                                  bool integer_offsets = false) {
  cfg.validate();
  SamplingPatterns<T> p;
  const T radius = static_cast<T>(cfg.pattern_radius);
  for (int k = 0; k < levels; ++k) {
    auto& lvl = p.levels.emplace_back();
    lvl.log_bandwidth = static_cast<T>(std::log(cfg.initial_bandwidth));
    for (int l = 0; l < cfg.patterns_per_level; ++l) {
      lvl.s.push_back(detail::draw_offset(rng, radius, integer_offsets));
      lvl.t.push_back(detail::draw_offset(rng, radius, integer_offsets));
    }
  }
  return p;
}

namespace detail {
template <typename T>
int round_offset(T v) {
  return static_cast<int>(std::lround(static_cast<double>(v)));
}
}  // namespace detail

// output(y, x) = act(y - offset.y, x - offset.x), clamped at the border.
template <typename T>
Tensor<T> shift_transform(const Tensor<T>& act, Offset<T> offset,
                          ShiftMode mode = ShiftMode::bilinear) {
  const int H = act.height(), W = act.width();
  Tensor<T> out(act.shape());
  if (mode == ShiftMode::nearest) {
    const int ox = detail::round_offset(offset.x), oy = detail::round_offset(offset.y);
    for (int c = 0; c < act.channels(); ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) out(c, y, x) = act.clamped(c, y - oy, x - ox);
    return out;
  }
  for (int y = 0; y < H; ++y) {
    const auto ty = detail::linear_tap(y - static_cast<double>(offset.y), H);
    const T fy = static_cast<T>(ty.frac);
    for (int x = 0; x < W; ++x) {
      const auto tx = detail::linear_tap(x - static_cast<double>(offset.x), W);
      const T fx = static_cast<T>(tx.frac);
      for (int c = 0; c < act.channels(); ++c) {
        const T top = (T(1) - fx) * act(c, ty.lo, tx.lo) + fx * act(c, ty.lo, tx.hi);
        const T bot = (T(1) - fx) * act(c, ty.hi, tx.lo) + fx * act(c, ty.hi, tx.hi);
        out(c, y, x) = (T(1) - fy) * top + fy * bot;
      }
    }
  }
  return out;
}

template <typename T>
struct ShiftGradients {
  Tensor<T> act;
  Offset<T> offset;
};

// Adjoint of shift_transform. In bilinear mode the offset gradient is the
// exact derivative of the piecewise-bilinear sampler; in nearest mode it is
// -grad(shifted) from central differences of the shifted map.
template <typename T>
ShiftGradients<T> shift_transform_backward(const Tensor<T>& act, Offset<T> offset,
                                           ShiftMode mode, const Tensor<T>& grad_out) {
  act.require_same_shape(grad_out, "shift_transform_backward");
  const int H = act.height(), W = act.width();
  ShiftGradients<T> g{Tensor<T>(act.shape()), {}};
  double gox = 0.0, goy = 0.0;
  if (mode == ShiftMode::nearest) {
    const int ox = detail::round_offset(offset.x), oy = detail::round_offset(offset.y);
    const auto shifted = shift_transform(act, offset, mode);
    const auto sg = spatial_gradient(shifted);
    for (int c = 0; c < act.channels(); ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const T go = grad_out(c, y, x);
          g.act(c, std::clamp(y - oy, 0, H - 1), std::clamp(x - ox, 0, W - 1)) += go;
          gox -= go * sg.gx(c, y, x);
          goy -= go * sg.gy(c, y, x);
        }
    g.offset = {static_cast<T>(gox), static_cast<T>(goy)};
    return g;
  }
  for (int y = 0; y < H; ++y) {
    const auto ty = detail::linear_tap(y - static_cast<double>(offset.y), H);
    const T fy = static_cast<T>(ty.frac);
    for (int x = 0; x < W; ++x) {
      const auto tx = detail::linear_tap(x - static_cast<double>(offset.x), W);
      const T fx = static_cast<T>(tx.frac);
      for (int c = 0; c < act.channels(); ++c) {
        const T go = grad_out(c, y, x);
        if (go == T(0)) continue;
        const T a00 = act(c, ty.lo, tx.lo), a01 = act(c, ty.lo, tx.hi);
        const T a10 = act(c, ty.hi, tx.lo), a11 = act(c, ty.hi, tx.hi);
        g.act(c, ty.lo, tx.lo) += go * (T(1) - fy) * (T(1) - fx);
        g.act(c, ty.lo, tx.hi) += go * (T(1) - fy) * fx;
        g.act(c, ty.hi, tx.lo) += go * fy * (T(1) - fx);
        g.act(c, ty.hi, tx.hi) += go * fy * fx;
        // Sampling coordinate is (y - oy, x - ox), hence the sign flip.
        const T d_dx = (T(1) - fy) * (a01 - a00) + fy * (a11 - a10);
        const T d_dy = (T(1) - fx) * (a10 - a00) + fx * (a11 - a01);
        gox -= go * d_dx;
        goy -= go * d_dy;
      }
    }
  }
  g.offset = {static_cast<T>(gox), static_cast<T>(goy)};
  return g;
}

// Self-similarity volume: out(l, i) = sum_c (A_s(c, i) - A_t(c, i))^2 where
// A_s, A_t are act shifted by the l-th source and target offsets.
template <typename T>
Tensor<T> css_forward(const Tensor<T>& act, const PatternLevel<T>& patterns,
                      ShiftMode mode = ShiftMode::bilinear) {
  patterns.validate();
  const int L = patterns.size();
  Tensor<T> out(L, act.height(), act.width());
  const std::size_t plane = act.plane_size();
  parallel_for(0, L, [&](int l) {
    const auto a = shift_transform(act, patterns.s[l], mode);
    const auto b = shift_transform(act, patterns.t[l], mode);
    auto dst = out.plane(l);
    for (int c = 0; c < act.channels(); ++c) {
      const T* pa = a.data().data() + c * plane;
      const T* pb = b.data().data() + c * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        const T d = pa[p] - pb[p];
        dst[p] += d * d;
      }
    }
  });
  return out;
}

template <typename T>
struct CssGradients {
  Tensor<T> act;
  std::vector<Offset<T>> s;
  std::vector<Offset<T>> t;
};

// The activation gradient is the sum of both stream adjoints.
template <typename T>
CssGradients<T> css_backward(const Tensor<T>& act, const PatternLevel<T>& patterns,
                             ShiftMode mode, const Tensor<T>& grad_out) {
  patterns.validate();
  const int L = patterns.size();
  if (grad_out.shape() != Shape{L, act.height(), act.width()})
    throw ShapeError("css_backward: grad_out shape " + to_string(grad_out.shape()) +
                     " vs expected " + to_string(Shape{L, act.height(), act.width()}));
  CssGradients<T> g{Tensor<T>(act.shape()), std::vector<Offset<T>>(L),
                    std::vector<Offset<T>>(L)};
  const std::size_t plane = act.plane_size();
  for (int l = 0; l < L; ++l) {
    const auto go = grad_out.plane(l);
    if (std::all_of(go.begin(), go.end(), [](T v) { return v == T(0); })) continue;
    const auto a = shift_transform(act, patterns.s[l], mode);
    const auto b = shift_transform(act, patterns.t[l], mode);
    Tensor<T> ga(act.shape()), gb(act.shape());
    for (int c = 0; c < act.channels(); ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t k = c * plane + p;
        const T d = T(2) * (a.data()[k] - b.data()[k]) * go[p];
        ga.data()[k] = d;
        gb.data()[k] = -d;
      }
    auto sa = shift_transform_backward(act, patterns.s[l], mode, ga);
    auto sb = shift_transform_backward(act, patterns.t[l], mode, gb);
    g.act += sa.act;
    g.act += sb.act;
    g.s[l] = sa.offset;
    g.t[l] = sb.offset;
  }
  return g;
}

namespace detail {

// exp(-v / bandwidth), floored at the smallest normal T so responses never
// underflow to zero. Where the floor is active the gradient is taken as zero.
template <typename T>
T gate(T v, T bandwidth) {
  return std::max(std::exp(-v / bandwidth), std::numeric_limits<T>::min());
}

template <typename T>
bool gate_floored(T g) {
  return g <= std::numeric_limits<T>::min();
}

}  // namespace detail

// out(l, i) = max over the (2r+1)^2 window around i (clipped to the image) of
// exp(-css(l, j) / bandwidth).
template <typename T>
Tensor<T> gate_and_pool(const Tensor<T>& css, T bandwidth, int pool_radius) {
  if (!(bandwidth > T(0))) throw ConfigError("gate_and_pool: bandwidth must be positive");
  if (pool_radius < 0) throw ConfigError("gate_and_pool: pool radius must be >= 0");
  Tensor<T> gated(css.shape());
  for (std::size_t i = 0; i < css.size(); ++i) gated.data()[i] = detail::gate(css.data()[i], bandwidth);
  if (pool_radius == 0) return gated;
  const int H = css.height(), W = css.width();
  Tensor<T> out(css.shape());
  for (int l = 0; l < css.channels(); ++l)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        T best = -std::numeric_limits<T>::infinity();
        for (int j = std::max(0, y - pool_radius); j <= std::min(H - 1, y + pool_radius); ++j)
          for (int i = std::max(0, x - pool_radius); i <= std::min(W - 1, x + pool_radius); ++i)
            best = std::max(best, gated(l, j, i));
        out(l, y, x) = best;
      }
  return out;
}

template <typename T>
struct GatePoolGradients {
  Tensor<T> css;
  T bandwidth = T(0);
};

// Gradient reaches only each window's first maximum in row-major order.
template <typename T>
GatePoolGradients<T> gate_and_pool_backward(const Tensor<T>& css, T bandwidth, int pool_radius,
                                            const Tensor<T>& grad_out) {
  css.require_same_shape(grad_out, "gate_and_pool_backward");
  const int H = css.height(), W = css.width();
  GatePoolGradients<T> g{Tensor<T>(css.shape()), T(0)};
  Tensor<T> gated(css.shape());
  for (std::size_t i = 0; i < css.size(); ++i) gated.data()[i] = detail::gate(css.data()[i], bandwidth);
  double gbw = 0.0;
  for (int l = 0; l < css.channels(); ++l)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const T go = grad_out(l, y, x);
        if (go == T(0)) continue;
        int by = y, bx = x;
        T best = -std::numeric_limits<T>::infinity();
        for (int j = std::max(0, y - pool_radius); j <= std::min(H - 1, y + pool_radius); ++j)
          for (int i = std::max(0, x - pool_radius); i <= std::min(W - 1, x + pool_radius); ++i)
            if (gated(l, j, i) > best) {
              best = gated(l, j, i);
              by = j;
              bx = i;
            }
        if (detail::gate_floored(best)) continue;
        const T s = css(l, by, bx);
        g.css(l, by, bx) -= go * best / bandwidth;
        gbw += go * best * s / (bandwidth * bandwidth);
      }
  g.bandwidth = static_cast<T>(gbw);
  return g;
}

// Conv + ReLU chain with clamp-to-edge padding; the similarity network whose
// output the efficient path shifts.
template <typename T>
Tensor<T> conv_stack_forward(const Tensor<T>& image, const std::vector<ConvParams<T>>& stack) {
  Tensor<T> x = image;
  for (const auto& layer : stack) x = relu(conv2d(x, layer));
  return x;
}

template <typename T>
struct CssReference {
  Tensor<T> values;             // L x H x W, zero outside the interior
  std::vector<bool> interior;   // H x W, row-major
};

namespace detail {

// Unpadded convolution: output shrinks by the kernel radius on every side.
template <typename T>
Tensor<T> valid_conv(const Tensor<T>& in, const ConvParams<T>& p) {
  const int oh = in.height() - (p.kh - 1), ow = in.width() - (p.kw - 1);
  Tensor<T> out(p.out_c, oh, ow);
  for (int o = 0; o < p.out_c; ++o)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        T acc = p.bias[o];
        for (int i = 0; i < p.in_c; ++i)
          for (int ky = 0; ky < p.kh; ++ky)
            for (int kx = 0; kx < p.kw; ++kx) acc += p.weight(o, i, ky, kx) * in(i, y + ky, x + kx);
        out(o, y, x) = acc;
      }
  return out;
}

template <typename T>
std::vector<T> patch_response(const Tensor<T>& image, const std::vector<ConvParams<T>>& stack,
                              int radius, int cy, int cx) {
  Tensor<T> crop(image.channels(), 2 * radius + 1, 2 * radius + 1);
  for (int c = 0; c < image.channels(); ++c)
    for (int y = 0; y < crop.height(); ++y)
      for (int x = 0; x < crop.width(); ++x) crop(c, y, x) = image(c, cy - radius + y, cx - radius + x);
  for (const auto& layer : stack) crop = relu(valid_conv(crop, layer));
  return crop.data();
}

}  // namespace detail

// Brute-force self-similarity: for each pixel and pattern, crops the two
// receptive fields around i - s and i - t, runs the conv stack on each crop
// independently, and compares the centre responses. Offsets are rounded to
// the pixel grid. Only pixels whose crops lie fully inside the image are
// evaluated.
template <typename T>
CssReference<T> css_reference(const Tensor<T>& image, const PatternLevel<T>& patterns,
                              const std::vector<ConvParams<T>>& stack) {
  patterns.validate();
  int radius = 0;
  int channels = image.channels();
  for (const auto& layer : stack) {
    layer.validate();
    if (layer.in_c != channels) throw ConfigError("css_reference: conv stack channel mismatch");
    channels = layer.out_c;
    radius += std::max(layer.kh, layer.kw) / 2;
  }
  const int H = image.height(), W = image.width(), L = patterns.size();
  CssReference<T> ref{Tensor<T>(L, H, W), std::vector<bool>(static_cast<std::size_t>(H) * W, true)};
  auto inside = [&](int y, int x) {
    return y - radius >= 0 && y + radius < H && x - radius >= 0 && x + radius < W;
  };
  for (int l = 0; l < L; ++l) {
    const int sx = detail::round_offset(patterns.s[l].x), sy = detail::round_offset(patterns.s[l].y);
    const int tx = detail::round_offset(patterns.t[l].x), ty = detail::round_offset(patterns.t[l].y);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (!inside(y - sy, x - sx) || !inside(y - ty, x - tx)) {
          ref.interior[static_cast<std::size_t>(y) * W + x] = false;
          continue;
        }
        const auto a = detail::patch_response(image, stack, radius, y - sy, x - sx);
        const auto b = detail::patch_response(image, stack, radius, y - ty, x - tx);
        T acc = T(0);
        for (std::size_t c = 0; c < a.size(); ++c) acc += (a[c] - b[c]) * (a[c] - b[c]);
        ref.values(l, y, x) = acc;
      }
  }
  for (std::size_t p = 0; p < ref.interior.size(); ++p)
    if (!ref.interior[p])
      for (int l = 0; l < L; ++l) ref.values.data()[l * ref.values.plane_size() + p] = T(0);
  return ref;
}

// Handcrafted local self-similarity: sum of squared differences over
// (2 patch_radius + 1)^2 patches at the rounded offsets, gated and pooled.
template <typename T>
Tensor<T> handcrafted_lss(const Tensor<T>& image, const PatternLevel<T>& patterns, int patch_radius,
                          int pool_radius) {
  const auto pixel = css_forward(image, patterns, ShiftMode::nearest);
  Tensor<T> ssd(pixel.shape());
  for (int l = 0; l < pixel.channels(); ++l)
    for (int y = 0; y < pixel.height(); ++y)
      for (int x = 0; x < pixel.width(); ++x) {
        T acc = T(0);
        for (int dy = -patch_radius; dy <= patch_radius; ++dy)
          for (int dx = -patch_radius; dx <= patch_radius; ++dx) acc += pixel.clamped(l, y + dy, x + dx);
        ssd(l, y, x) = acc;
      }
  return gate_and_pool(ssd, patterns.bandwidth(), pool_radius);
}

}  // namespace fcss
