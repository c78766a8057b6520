#pragma once

// Dense correspondence from two descriptor fields.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <vector>

#include "fcss/descriptor.hpp"
#include "fcss/error.hpp"
#include "fcss/parallel.hpp"
#include "fcss/rect.hpp"
#include "fcss/tensor.hpp"

namespace fcss {

// Per-pixel displacement: source pixel i maps to target i + flow(i).
template <typename T>
struct FlowField {
  Tensor<T> flow;              // 2 x H x W: dx plane, dy plane
  std::vector<uint8_t> valid;  // H x W, row-major

  FlowField() = default;
  FlowField(int h, int w) : flow(2, h, w), valid(static_cast<std::size_t>(h) * w, 1) {}

  int height() const { return flow.height(); }
  int width() const { return flow.width(); }
  T& dx(int y, int x) { return flow(0, y, x); }
  T& dy(int y, int x) { return flow(1, y, x); }
  T dx(int y, int x) const { return flow(0, y, x); }
  T dy(int y, int x) const { return flow(1, y, x); }
  bool is_valid(int y, int x) const { return valid[static_cast<std::size_t>(y) * width() + x] != 0; }
  void set_valid(int y, int x, bool v) { valid[static_cast<std::size_t>(y) * width() + x] = v ? 1 : 0; }

  friend bool operator==(const FlowField&, const FlowField&) = default;
};

struct NnFlowOptions {
  std::optional<Rect> source_region;  // pixels outside are left invalid
  std::optional<Rect> search_region;  // candidate target pixels (default: whole target)
  int window_radius = -1;             // >= 0 restricts the search around i
};

// Winner-take-all flow: each source pixel points at its nearest target
// descriptor; the first minimum in scan order wins ties.
template <typename T>
FlowField<T> nn_flow(const DenseDescriptorField<T>& a, const DenseDescriptorField<T>& b,
                     const NnFlowOptions& opt = {}) {
  if (a.dim() != b.dim()) throw ShapeError("nn_flow: descriptor dimensions differ");
  if (a.height() != b.height() || a.width() != b.width())
    throw ShapeError("nn_flow: descriptor fields must share a resolution");
  const int H = a.height(), W = a.width(), L = a.dim();
  const Rect search = opt.search_region.value_or(Rect::full(W, H));
  search.require_within(W, H, "nn_flow search region");
  const Rect src = opt.source_region.value_or(Rect::full(W, H));
  src.require_within(W, H, "nn_flow source region");

  // Pixel-major target rows for the search box.
  std::vector<T> rows(static_cast<std::size_t>(search.area()) * L);
  for (int y = 0; y < search.h; ++y)
    for (int x = 0; x < search.w; ++x)
      for (int c = 0; c < L; ++c)
        rows[(static_cast<std::size_t>(y) * search.w + x) * L + c] = b.values(c, search.y + y, search.x + x);

  FlowField<T> f(H, W);
  std::fill(f.valid.begin(), f.valid.end(), uint8_t{0});
  parallel_for(0, H, [&](int y) {
    std::vector<T> q(L);
    for (int x = 0; x < W; ++x) {
      if (!src.contains(x, y)) continue;
      for (int c = 0; c < L; ++c) q[c] = a.values(c, y, x);
      int y0 = search.y, y1 = search.y + search.h, x0 = search.x, x1 = search.x + search.w;
      if (opt.window_radius >= 0) {
        y0 = std::max(y0, y - opt.window_radius);
        y1 = std::min(y1, y + opt.window_radius + 1);
        x0 = std::max(x0, x - opt.window_radius);
        x1 = std::min(x1, x + opt.window_radius + 1);
      }
      int by = -1, bx = -1;
      T best = std::numeric_limits<T>::infinity();
      for (int ty = y0; ty < y1; ++ty)
        for (int tx = x0; tx < x1; ++tx) {
          const T* r = rows.data() + (static_cast<std::size_t>(ty - search.y) * search.w + (tx - search.x)) * L;
          T d = T(0);
          for (int c = 0; c < L; ++c) {
            const T e = q[c] - r[c];
            d += e * e;
          }
          if (d < best) {
            best = d;
            by = ty;
            bx = tx;
          }
        }
      if (by < 0) continue;  // window does not overlap the search region
      f.dx(y, x) = static_cast<T>(bx - x);
      f.dy(y, x) = static_cast<T>(by - y);
      f.set_valid(y, x, true);
    }
  });
  return f;
}

// True where following flow_ab and then flow_ba returns within tau of the
// start. The return flow is read at the rounded landing pixel, clamped to the
// image; the landing position itself is not clamped.
template <typename T>
std::vector<uint8_t> lr_consistency_mask(const FlowField<T>& ab, const FlowField<T>& ba, double tau) {
  if (ab.height() != ba.height() || ab.width() != ba.width())
    throw ShapeError("lr_consistency_mask: flows must share a resolution");
  const int H = ab.height(), W = ab.width();
  std::vector<uint8_t> mask(static_cast<std::size_t>(H) * W, 0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double jx = x + static_cast<double>(ab.dx(y, x));
      const double jy = y + static_cast<double>(ab.dy(y, x));
      const int lx = std::clamp(static_cast<int>(std::lround(jx)), 0, W - 1);
      const int ly = std::clamp(static_cast<int>(std::lround(jy)), 0, H - 1);
      const double ex = jx + ba.dx(ly, lx) - x;
      const double ey = jy + ba.dy(ly, lx) - y;
      mask[static_cast<std::size_t>(y) * W + x] = std::hypot(ex, ey) <= tau ? 1 : 0;
    }
  return mask;
}

namespace detail {
template <typename T>
T lower_median(std::vector<T>& v) {
  auto mid = v.begin() + static_cast<std::ptrdiff_t>((v.size() - 1) / 2);
  std::nth_element(v.begin(), mid, v.end());
  return *mid;
}
}  // namespace detail

// Replaces invalid pixels and outliers (a component more than `threshold`
// away from the median of the valid 3x3 neighbours, centre excluded) by that
// median. Each iteration reads only the previous iteration's flow.
template <typename T>
FlowField<T> smooth_flow(const FlowField<T>& in, int iterations, double threshold = 2.0) {
  if (iterations < 0) throw ConfigError("smooth_flow: iterations must be >= 0");
  FlowField<T> cur = in;
  const int H = in.height(), W = in.width();
  std::vector<T> nx, ny;
  for (int it = 0; it < iterations; ++it) {
    FlowField<T> next = cur;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        nx.clear();
        ny.clear();
        for (int j = std::max(0, y - 1); j <= std::min(H - 1, y + 1); ++j)
          for (int i = std::max(0, x - 1); i <= std::min(W - 1, x + 1); ++i)
            if ((j != y || i != x) && cur.is_valid(j, i)) {
              nx.push_back(cur.dx(j, i));
              ny.push_back(cur.dy(j, i));
            }
        if (nx.empty()) continue;
        const T mx = detail::lower_median(nx), my = detail::lower_median(ny);
        const bool outlier = !cur.is_valid(y, x) || std::abs(cur.dx(y, x) - mx) > threshold ||
                             std::abs(cur.dy(y, x) - my) > threshold;
        if (outlier) {
          next.dx(y, x) = mx;
          next.dy(y, x) = my;
          next.set_valid(y, x, true);
        }
      }
    cur = std::move(next);
  }
  return cur;
}

// Inverse warp: out(i) = target(i + flow(i)), bilinear with border clamp.
template <typename T>
Tensor<T> warp_image(const Tensor<T>& target, const FlowField<T>& flow) {
  if (flow.height() != target.height() || flow.width() != target.width())
    throw ShapeError("warp_image: flow and image sizes differ");
  Tensor<T> out(target.shape());
  for (int c = 0; c < target.channels(); ++c)
    for (int y = 0; y < target.height(); ++y)
      for (int x = 0; x < target.width(); ++x)
        out(c, y, x) = sample_bilinear(target, c, y + static_cast<double>(flow.dy(y, x)),
                                       x + static_cast<double>(flow.dx(y, x)));
  return out;
}

namespace detail {

// Middlebury colour wheel (RY, YG, GC, CB, BM, MR segments).
inline std::vector<std::array<double, 3>> flow_color_wheel() {
  constexpr int RY = 15, YG = 6, GC = 4, CB = 11, BM = 13, MR = 6;
  std::vector<std::array<double, 3>> wheel;
  for (int i = 0; i < RY; ++i) wheel.push_back({255, 255.0 * i / RY, 0});
  for (int i = 0; i < YG; ++i) wheel.push_back({255 - 255.0 * i / YG, 255, 0});
  for (int i = 0; i < GC; ++i) wheel.push_back({0, 255, 255.0 * i / GC});
  for (int i = 0; i < CB; ++i) wheel.push_back({0, 255 - 255.0 * i / CB, 255});
  for (int i = 0; i < BM; ++i) wheel.push_back({255.0 * i / BM, 0, 255});
  for (int i = 0; i < MR; ++i) wheel.push_back({255, 0, 255 - 255.0 * i / MR});
  return wheel;
}

}  // namespace detail

// Middlebury-style colour coding, normalized by the largest valid magnitude.
// Invalid pixels are black. Output is 3 x H x W in [0, 1].
template <typename T>
Tensor<T> flow_to_color(const FlowField<T>& f) {
  const auto wheel = detail::flow_color_wheel();
  const int ncols = static_cast<int>(wheel.size());
  const int H = f.height(), W = f.width();
  double maxrad = 0.0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      if (f.is_valid(y, x)) maxrad = std::max(maxrad, std::hypot<double>(f.dx(y, x), f.dy(y, x)));
  if (maxrad <= 0.0) maxrad = 1.0;
  Tensor<T> img(3, H, W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      if (!f.is_valid(y, x)) continue;
      const double u = f.dx(y, x) / maxrad, v = f.dy(y, x) / maxrad;
      const double rad = std::hypot(u, v);
      const double a = std::atan2(-v, -u) / std::numbers::pi;
      const double fk = (a + 1.0) / 2.0 * (ncols - 1);
      const int k0 = static_cast<int>(std::floor(fk));
      const int k1 = (k0 + 1) % ncols;
      const double frac = fk - k0;
      for (int c = 0; c < 3; ++c) {
        double col = ((1 - frac) * wheel[k0][c] + frac * wheel[k1][c]) / 255.0;
        col = rad <= 1.0 ? 1.0 - rad * (1.0 - col) : col * 0.75;
        img(c, y, x) = static_cast<T>(col);
      }
    }
  return img;
}

}  // namespace fcss
