#pragma once

// Dense C x H x W tensors and the small set of differentiable kernels the
// descriptor pipeline is built from. All kernels use clamp-to-edge borders.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fcss/error.hpp"
#include "fcss/parallel.hpp"

namespace fcss {

struct Shape {
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t size() const { return static_cast<std::size_t>(c) * h * w; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  return std::to_string(s.c) + "x" + std::to_string(s.h) + "x" + std::to_string(s.w);
}

// Channel-major planes, row-major inside a plane.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(int c, int h, int w, T fill = T(0)) : shape_{c, h, w} {
    if (c < 0 || h < 0 || w < 0) throw ShapeError("negative tensor dimension");
    data_.assign(shape_.size(), fill);
  }
  explicit Tensor(Shape s, T fill = T(0)) : Tensor(s.c, s.h, s.w, fill) {}
  Tensor(Shape s, std::vector<T> data) : shape_(s), data_(std::move(data)) {
    if (data_.size() != shape_.size())
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
  }

  const Shape& shape() const { return shape_; }
  int channels() const { return shape_.c; }
  int height() const { return shape_.h; }
  int width() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  std::size_t plane_size() const { return static_cast<std::size_t>(shape_.h) * shape_.w; }

  T& operator()(int c, int y, int x) { return data_[index(c, y, x)]; }
  const T& operator()(int c, int y, int x) const { return data_[index(c, y, x)]; }

  // Clamp-to-edge read.
  const T& clamped(int c, int y, int x) const {
    y = std::clamp(y, 0, shape_.h - 1);
    x = std::clamp(x, 0, shape_.w - 1);
    return data_[index(c, y, x)];
  }

  std::span<T> plane(int c) { return {data_.data() + c * plane_size(), plane_size()}; }
  std::span<const T> plane(int c) const {
    return {data_.data() + c * plane_size(), plane_size()};
  }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  void require_same_shape(const Tensor& o, const char* what) const {
    if (o.shape_ != shape_)
      throw ShapeError(std::string(what) + ": shape " + to_string(o.shape_) + " vs " +
                       to_string(shape_));
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * shape_.h + y) * shape_.w + x;
  }

  Shape shape_{};
  std::vector<T> data_;
};

// Weights are out_c x in_c x kh x kw, flattened in that order.
template <typename T>
struct ConvParams {
  int out_c = 0;
  int in_c = 0;
  int kh = 1;
  int kw = 1;
  std::vector<T> weights;
  std::vector<T> bias;

  ConvParams() = default;
  ConvParams(int out_channels, int in_channels, int kernel_h, int kernel_w)
      : out_c(out_channels),
        in_c(in_channels),
        kh(kernel_h),
        kw(kernel_w),
        weights(static_cast<std::size_t>(out_channels) * in_channels * kernel_h * kernel_w, T(0)),
        bias(out_channels, T(0)) {
    validate();
  }

  T& weight(int o, int i, int ky, int kx) {
    return weights[((static_cast<std::size_t>(o) * in_c + i) * kh + ky) * kw + kx];
  }
  const T& weight(int o, int i, int ky, int kx) const {
    return weights[((static_cast<std::size_t>(o) * in_c + i) * kh + ky) * kw + kx];
  }

  void validate() const {
    if (out_c < 1 || in_c < 1) throw ConfigError("conv layer needs at least one channel");
    if (kh < 1 || kw < 1 || kh % 2 == 0 || kw % 2 == 0)
      throw ConfigError("conv kernel sizes must be odd, got " + std::to_string(kh) + "x" +
                        std::to_string(kw));
    if (weights.size() != static_cast<std::size_t>(out_c) * in_c * kh * kw)
      throw ConfigError("conv weight count does not match its declared shape");
    if (bias.size() != static_cast<std::size_t>(out_c))
      throw ConfigError("conv bias length does not match out channels");
  }

  // Same-shaped zero parameters, used as a gradient accumulator.
  ConvParams zeros_like() const { return ConvParams(out_c, in_c, kh, kw); }

  friend bool operator==(const ConvParams&, const ConvParams&) = default;
};

// Stride-1 convolution, output keeps H x W.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const ConvParams<T>& p) {
  p.validate();
  if (input.channels() != p.in_c)
    throw ConfigError("conv2d: input has " + std::to_string(input.channels()) +
                      " channels, layer expects " + std::to_string(p.in_c));
  const int H = input.height(), W = input.width();
  const int ry = p.kh / 2, rx = p.kw / 2;
  Tensor<T> out(p.out_c, H, W);
  parallel_for(0, p.out_c, [&](int o) {
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        T acc = p.bias[o];
        for (int i = 0; i < p.in_c; ++i)
          for (int ky = 0; ky < p.kh; ++ky)
            for (int kx = 0; kx < p.kw; ++kx)
              acc += p.weight(o, i, ky, kx) * input.clamped(i, y + ky - ry, x + kx - rx);
        out(o, y, x) = acc;
      }
    }
  });
  return out;
}

template <typename T>
struct ConvGradients {
  Tensor<T> input;
  ConvParams<T> params;
};

template <typename T>
ConvGradients<T> conv2d_backward(const Tensor<T>& input, const ConvParams<T>& p,
                                 const Tensor<T>& grad_out) {
  p.validate();
  if (input.channels() != p.in_c) throw ConfigError("conv2d_backward: channel mismatch");
  const int H = input.height(), W = input.width();
  if (grad_out.shape() != Shape{p.out_c, H, W})
    throw ShapeError("conv2d_backward: grad_out shape " + to_string(grad_out.shape()) +
                     " does not match output " + to_string(Shape{p.out_c, H, W}));
  const int ry = p.kh / 2, rx = p.kw / 2;
  ConvGradients<T> g{Tensor<T>(input.shape()), p.zeros_like()};
  for (int o = 0; o < p.out_c; ++o) {
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const T go = grad_out(o, y, x);
        if (go == T(0)) continue;
        g.params.bias[o] += go;
        for (int i = 0; i < p.in_c; ++i) {
          for (int ky = 0; ky < p.kh; ++ky) {
            const int sy = std::clamp(y + ky - ry, 0, H - 1);
            for (int kx = 0; kx < p.kw; ++kx) {
              const int sx = std::clamp(x + kx - rx, 0, W - 1);
              g.params.weight(o, i, ky, kx) += go * input(i, sy, sx);
              g.input(i, sy, sx) += go * p.weight(o, i, ky, kx);
            }
          }
        }
      }
    }
  }
  return g;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out = input;
  for (auto& v : out.data()) v = v > T(0) ? v : T(0);
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& grad_out) {
  input.require_same_shape(grad_out, "relu_backward");
  Tensor<T> g(input.shape());
  for (std::size_t i = 0; i < g.size(); ++i)
    g.data()[i] = input.data()[i] > T(0) ? grad_out.data()[i] : T(0);
  return g;
}

namespace detail {

// One bilinear tap set along an axis: the two clamped neighbours and the
// weight of the upper one.
struct LinearTap {
  int lo;
  int hi;
  double frac;
};

inline LinearTap linear_tap(double coord, int extent) {
  const double fl = std::floor(coord);
  const int base = static_cast<int>(fl);
  return {std::clamp(base, 0, extent - 1), std::clamp(base + 1, 0, extent - 1), coord - fl};
}

inline double align_corners_coord(int i, int in_extent, int out_extent) {
  if (out_extent <= 1 || in_extent <= 1) return 0.0;
  return static_cast<double>(i) * (in_extent - 1) / (out_extent - 1);
}

}  // namespace detail

// Samples channel c at real coordinates (y, x) with clamp-to-edge.
template <typename T>
T sample_bilinear(const Tensor<T>& t, int c, double y, double x) {
  const auto ty = detail::linear_tap(y, t.height());
  const auto tx = detail::linear_tap(x, t.width());
  const T fy = static_cast<T>(ty.frac), fx = static_cast<T>(tx.frac);
  const T top = (T(1) - fx) * t(c, ty.lo, tx.lo) + fx * t(c, ty.lo, tx.hi);
  const T bot = (T(1) - fx) * t(c, ty.hi, tx.lo) + fx * t(c, ty.hi, tx.hi);
  return (T(1) - fy) * top + fy * bot;
}

// Align-corners resampling: output (y, x) reads input at
// (y (H-1)/(out_h-1), x (W-1)/(out_w-1)).
template <typename T>
Tensor<T> bilinear_resample(const Tensor<T>& input, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resample: output size must be >= 1");
  if (out_h == input.height() && out_w == input.width()) return input;
  Tensor<T> out(input.channels(), out_h, out_w);
  for (int c = 0; c < input.channels(); ++c)
    for (int y = 0; y < out_h; ++y) {
      const double sy = detail::align_corners_coord(y, input.height(), out_h);
      for (int x = 0; x < out_w; ++x)
        out(c, y, x) =
            sample_bilinear(input, c, sy, detail::align_corners_coord(x, input.width(), out_w));
    }
  return out;
}

template <typename T>
Tensor<T> bilinear_resample_backward(Shape input_shape, const Tensor<T>& grad_out) {
  Tensor<T> g(input_shape);
  if (grad_out.channels() != input_shape.c)
    throw ShapeError("bilinear_resample_backward: channel mismatch");
  if (grad_out.height() == input_shape.h && grad_out.width() == input_shape.w) return grad_out;
  for (int c = 0; c < input_shape.c; ++c)
    for (int y = 0; y < grad_out.height(); ++y) {
      const auto ty = detail::linear_tap(
          detail::align_corners_coord(y, input_shape.h, grad_out.height()), input_shape.h);
      const T fy = static_cast<T>(ty.frac);
      for (int x = 0; x < grad_out.width(); ++x) {
        const auto tx = detail::linear_tap(
            detail::align_corners_coord(x, input_shape.w, grad_out.width()), input_shape.w);
        const T fx = static_cast<T>(tx.frac);
        const T go = grad_out(c, y, x);
        g(c, ty.lo, tx.lo) += go * (T(1) - fy) * (T(1) - fx);
        g(c, ty.lo, tx.hi) += go * (T(1) - fy) * fx;
        g(c, ty.hi, tx.lo) += go * fy * (T(1) - fx);
        g(c, ty.hi, tx.hi) += go * fy * fx;
      }
    }
  return g;
}

template <typename T>
struct SpatialGradient {
  Tensor<T> gx;
  Tensor<T> gy;
};

// Central differences inside, one-sided differences on the border. An axis of
// extent 1 has zero gradient.
template <typename T>
SpatialGradient<T> spatial_gradient(const Tensor<T>& in) {
  const int H = in.height(), W = in.width();
  SpatialGradient<T> g{Tensor<T>(in.shape()), Tensor<T>(in.shape())};
  for (int c = 0; c < in.channels(); ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        if (W > 1) {
          if (x == 0)
            g.gx(c, y, x) = in(c, y, 1) - in(c, y, 0);
          else if (x == W - 1)
            g.gx(c, y, x) = in(c, y, W - 1) - in(c, y, W - 2);
          else
            g.gx(c, y, x) = (in(c, y, x + 1) - in(c, y, x - 1)) / T(2);
        }
        if (H > 1) {
          if (y == 0)
            g.gy(c, y, x) = in(c, 1, x) - in(c, 0, x);
          else if (y == H - 1)
            g.gy(c, y, x) = in(c, H - 1, x) - in(c, H - 2, x);
          else
            g.gy(c, y, x) = (in(c, y + 1, x) - in(c, y - 1, x)) / T(2);
        }
      }
  return g;
}

inline constexpr double kNormEpsilon = 1e-8;

// Divides each pixel's channel vector by sqrt(|v|^2 + eps).
template <typename T>
Tensor<T> channelwise_l2_normalize(const Tensor<T>& in, double eps = kNormEpsilon) {
  Tensor<T> out(in.shape());
  const std::size_t plane = in.plane_size();
  for (std::size_t p = 0; p < plane; ++p) {
    T ss = T(0);
    for (int c = 0; c < in.channels(); ++c) {
      const T v = in.data()[c * plane + p];
      ss += v * v;
    }
    const T inv = T(1) / std::sqrt(ss + static_cast<T>(eps));
    for (int c = 0; c < in.channels(); ++c) out.data()[c * plane + p] = in.data()[c * plane + p] * inv;
  }
  return out;
}

template <typename T>
Tensor<T> channelwise_l2_normalize_backward(const Tensor<T>& in, const Tensor<T>& grad_out,
                                            double eps = kNormEpsilon) {
  in.require_same_shape(grad_out, "channelwise_l2_normalize_backward");
  Tensor<T> g(in.shape());
  const std::size_t plane = in.plane_size();
  for (std::size_t p = 0; p < plane; ++p) {
    T ss = T(0), dot = T(0);
    for (int c = 0; c < in.channels(); ++c) {
      const T v = in.data()[c * plane + p];
      ss += v * v;
      dot += v * grad_out.data()[c * plane + p];
    }
    const T n2 = ss + static_cast<T>(eps);
    const T inv = T(1) / std::sqrt(n2);
    const T inv3 = inv / n2;
    for (int c = 0; c < in.channels(); ++c) {
      const std::size_t k = c * plane + p;
      g.data()[k] = grad_out.data()[k] * inv - in.data()[k] * dot * inv3;
    }
  }
  return g;
}

// 2x2 average pooling; odd trailing rows/columns replicate the edge.
template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& in) {
  const int oh = (in.height() + 1) / 2, ow = (in.width() + 1) / 2;
  Tensor<T> out(in.channels(), oh, ow);
  for (int c = 0; c < in.channels(); ++c)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x)
        out(c, y, x) = (in.clamped(c, 2 * y, 2 * x) + in.clamped(c, 2 * y, 2 * x + 1) +
                        in.clamped(c, 2 * y + 1, 2 * x) + in.clamped(c, 2 * y + 1, 2 * x + 1)) /
                       T(4);
  return out;
}

template <typename T>
Tensor<T> avg_pool2_backward(Shape input_shape, const Tensor<T>& grad_out) {
  Tensor<T> g(input_shape);
  const int H = input_shape.h, W = input_shape.w;
  for (int c = 0; c < input_shape.c; ++c)
    for (int y = 0; y < grad_out.height(); ++y)
      for (int x = 0; x < grad_out.width(); ++x) {
        const T q = grad_out(c, y, x) / T(4);
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx)
            g(c, std::min(2 * y + dy, H - 1), std::min(2 * x + dx, W - 1)) += q;
      }
  return g;
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace fcss
