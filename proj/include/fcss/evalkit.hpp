#pragma once

// Correspondence metrics (PCK, endpoint-error accuracy) and synthetic warped
// pairs with known ground truth.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "fcss/error.hpp"
#include "fcss/learning.hpp"
#include "fcss/matching.hpp"
#include "fcss/random.hpp"
#include "fcss/rect.hpp"
#include "fcss/tensor.hpp"

namespace fcss {

struct Point {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point&, const Point&) = default;
};

struct KeypointSet {
  std::vector<Point> points;
  Rect bbox;  // object box; its larger side sets the PCK radius
};

// Dense ground truth; `valid` marks the foreground pixels that are scored.
template <typename T>
using GroundTruthFlow = FlowField<T>;

inline constexpr double kPckAlphas[] = {0.05, 0.1, 0.15};
inline constexpr double kFlowAccuracyThreshold = 5.0;

// Fraction of source keypoints whose transferred position lies within
// alpha * max(bbox.h, bbox.w) of the matching target keypoint. The flow is
// sampled bilinearly at the (real-valued) source keypoint.
template <typename T>
double pck(const FlowField<T>& pred, const std::vector<Point>& source, const std::vector<Point>& target,
           Rect bbox, double alpha) {
  if (source.empty()) throw ConfigError("pck: empty keypoint list");
  if (source.size() != target.size()) throw ConfigError("pck: keypoint lists differ in length");
  const double radius = alpha * std::max(bbox.h, bbox.w);
  int hits = 0;
  for (std::size_t k = 0; k < source.size(); ++k) {
    const auto& p = source[k];
    if (p.x < 0 || p.y < 0 || p.x > pred.width() - 1 || p.y > pred.height() - 1)
      throw ConfigError("pck: source keypoint outside the flow field");
    const double px = p.x + sample_bilinear(pred.flow, 0, p.y, p.x);
    const double py = p.y + sample_bilinear(pred.flow, 1, p.y, p.x);
    if (std::hypot(px - target[k].x, py - target[k].y) <= radius) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(source.size());
}

namespace detail {

inline void rescaled_size(int h, int w, int longest, int& nh, int& nw) {
  const double s = static_cast<double>(longest) / std::max(h, w);
  nh = std::max(1, static_cast<int>(std::lround(h * s)));
  nw = std::max(1, static_cast<int>(std::lround(w * s)));
}

// Resamples a flow so its larger side is `longest`; vectors scale by the
// align-corners coordinate factor per axis, the mask is sampled nearest.
template <typename T>
FlowField<T> rescale_flow(const FlowField<T>& f, int longest) {
  int nh, nw;
  rescaled_size(f.height(), f.width(), longest, nh, nw);
  FlowField<T> out(nh, nw);
  out.flow = bilinear_resample(f.flow, nh, nw);
  const double sx = f.width() > 1 && nw > 1 ? static_cast<double>(nw - 1) / (f.width() - 1) : 1.0;
  const double sy = f.height() > 1 && nh > 1 ? static_cast<double>(nh - 1) / (f.height() - 1) : 1.0;
  for (int y = 0; y < nh; ++y)
    for (int x = 0; x < nw; ++x) {
      out.dx(y, x) = static_cast<T>(out.dx(y, x) * sx);
      out.dy(y, x) = static_cast<T>(out.dy(y, x) * sy);
      const int oy = static_cast<int>(std::lround(align_corners_coord(y, f.height(), nh)));
      const int ox = static_cast<int>(std::lround(align_corners_coord(x, f.width(), nw)));
      out.set_valid(y, x, f.is_valid(oy, ox));
    }
  return out;
}

}  // namespace detail

// Fraction of ground-truth foreground pixels whose endpoint error is below
// threshold, measured after resizing so the larger side is 100 pixels.
template <typename T>
double flow_accuracy(const FlowField<T>& pred, const GroundTruthFlow<T>& gt,
                     double threshold = kFlowAccuracyThreshold, bool rescale = true) {
  if (pred.height() != gt.height() || pred.width() != gt.width())
    throw ShapeError("flow_accuracy: predicted and ground-truth flows differ in size");
  const FlowField<T> p = rescale ? detail::rescale_flow(pred, 100) : pred;
  const FlowField<T> g = rescale ? detail::rescale_flow(gt, 100) : gt;
  long total = 0, hits = 0;
  for (int y = 0; y < g.height(); ++y)
    for (int x = 0; x < g.width(); ++x) {
      if (!g.is_valid(y, x)) continue;
      ++total;
      if (std::hypot<double>(p.dx(y, x) - g.dx(y, x), p.dy(y, x) - g.dy(y, x)) < threshold) ++hits;
    }
  if (total == 0) throw ConfigError("flow_accuracy: empty foreground mask");
  return static_cast<double>(hits) / static_cast<double>(total);
}

// Smooth random colour texture in [0, 1]: Gaussian blobs of mixed size.
template <typename T>
Tensor<T> synth_texture(int h, int w, uint64_t seed, int channels = 3, int blobs = 40,
                        double min_sigma = 1.5, double max_sigma = 6.0) {
  Rng rng(seed);
  Tensor<T> img(channels, h, w);
  std::vector<double> acc(static_cast<std::size_t>(channels) * h * w, 0.0);
  for (int b = 0; b < blobs; ++b) {
    const double cx = uniform(rng, 0.0, w - 1.0), cy = uniform(rng, 0.0, h - 1.0);
    const double sigma = uniform(rng, min_sigma, max_sigma);
    std::vector<double> colour(channels);
    for (auto& c : colour) c = uniform(rng, -1.0, 1.0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        const double g = std::exp(-r2 / (2 * sigma * sigma));
        for (int c = 0; c < channels; ++c) acc[(static_cast<std::size_t>(c) * h + y) * w + x] += colour[c] * g;
      }
  }
  const auto [lo, hi] = std::minmax_element(acc.begin(), acc.end());
  const double range = *hi - *lo > 0 ? *hi - *lo : 1.0;
  for (std::size_t i = 0; i < acc.size(); ++i) img.data()[i] = static_cast<T>((acc[i] - *lo) / range);
  return img;
}

// Forward similarity about the image centre plus a low-frequency sinusoidal
// displacement applied in target coordinates.
struct Warp {
  double scale = 1.0;
  double rotation_deg = 0.0;
  double tx = 0.0;
  double ty = 0.0;
  double amplitude_x = 0.0;
  double amplitude_y = 0.0;
  double cycles = 1.0;  // sinusoid periods across the image
  double phase_x = 0.0;
  double phase_y = 0.0;

  static Warp translation(double dx, double dy) {
    Warp w;
    w.tx = dx;
    w.ty = dy;
    return w;
  }
};

struct WarpBounds {
  double max_scale_deviation = 0.1;
  double max_rotation_deg = 10.0;
  double max_translation = 5.0;
  double max_amplitude = 3.0;
  int margin = 4;  // shrinks the source object box
};

inline Warp sample_warp(const WarpBounds& b, Rng& rng) {
  Warp w;
  w.scale = 1.0 + uniform(rng, -b.max_scale_deviation, b.max_scale_deviation);
  w.rotation_deg = uniform(rng, -b.max_rotation_deg, b.max_rotation_deg);
  w.tx = uniform(rng, -b.max_translation, b.max_translation);
  w.ty = uniform(rng, -b.max_translation, b.max_translation);
  w.amplitude_x = uniform(rng, -b.max_amplitude, b.max_amplitude);
  w.amplitude_y = uniform(rng, -b.max_amplitude, b.max_amplitude);
  w.phase_x = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  w.phase_y = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  return w;
}

template <typename T>
struct SynthPair {
  ImagePairSample<T> pair;
  GroundTruthFlow<T> gt;
  KeypointSet source_keypoints;
  KeypointSet target_keypoints;
  Warp warp;
};

namespace detail {

struct WarpMap {
  Warp w;
  double cx, cy, cos_a, sin_a;
  int h, w_px;

  WarpMap(const Warp& warp, int height, int width)
      : w(warp), cx((width - 1) / 2.0), cy((height - 1) / 2.0), h(height), w_px(width) {
    if (!(warp.scale > 0.0) || !std::isfinite(warp.scale))
      throw ConfigError("synth_pair: degenerate warp (non-positive scale)");
    const double a = warp.rotation_deg * std::numbers::pi / 180.0;
    cos_a = std::cos(a);
    sin_a = std::sin(a);
    const double lip = warp.scale * 2.0 * std::numbers::pi * warp.cycles *
                       std::max(std::abs(warp.amplitude_x) / std::max(height, 1),
                                std::abs(warp.amplitude_y) / std::max(width, 1));
    if (lip >= 0.9) throw ConfigError("synth_pair: deformation too strong to invert");
  }

  // Displacement field, defined on target coordinates.
  void deformation(double x, double y, double& dx, double& dy) const {
    dx = w.amplitude_x * std::sin(2.0 * std::numbers::pi * w.cycles * y / h + w.phase_x);
    dy = w.amplitude_y * std::sin(2.0 * std::numbers::pi * w.cycles * x / w_px + w.phase_y);
  }

  void similarity(double x, double y, double& ox, double& oy) const {
    const double rx = x - cx, ry = y - cy;
    ox = cx + w.scale * (cos_a * rx - sin_a * ry) + w.tx;
    oy = cy + w.scale * (sin_a * rx + cos_a * ry) + w.ty;
  }

  void inverse_similarity(double x, double y, double& ox, double& oy) const {
    const double rx = x - cx - w.tx, ry = y - cy - w.ty;
    ox = cx + (cos_a * rx + sin_a * ry) / w.scale;
    oy = cy + (-sin_a * rx + cos_a * ry) / w.scale;
  }

  // Target pixel -> source location it samples.
  void backward(double x, double y, double& sx, double& sy) const {
    double dx, dy;
    deformation(x, y, dx, dy);
    inverse_similarity(x, y, sx, sy);
    sx += dx;
    sy += dy;
  }

  // Source location -> target location, by fixed-point iteration on
  // j = S(i - d(j)); a contraction under the bounds checked above.
  void forward(double x, double y, double& tx, double& ty) const {
    similarity(x, y, tx, ty);
    for (int it = 0; it < 100; ++it) {
      double dx, dy, nx, ny;
      deformation(tx, ty, dx, dy);
      similarity(x - dx, y - dy, nx, ny);
      const double change = std::abs(nx - tx) + std::abs(ny - ty);
      tx = nx;
      ty = ny;
      if (change < 1e-13) break;
    }
  }
};

}  // namespace detail

// target(j) = source(backward(j)); the ground-truth flow at source pixel i is
// forward(i) - i and is foreground where forward(i) lands inside the image.
// Keypoints are a grid over the source box carried through the warp.
template <typename T>
SynthPair<T> synth_pair(const Tensor<T>& image, const Warp& warp, const WarpBounds& bounds = {},
                        int grid = 5) {
  const int H = image.height(), W = image.width();
  const detail::WarpMap map(warp, H, W);
  SynthPair<T> out;
  out.warp = warp;
  out.pair.source = image;
  out.pair.target = Tensor<T>(image.shape());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double sx, sy;
      map.backward(x, y, sx, sy);
      for (int c = 0; c < image.channels(); ++c) out.pair.target(c, y, x) = sample_bilinear(image, c, sy, sx);
    }

  out.gt = GroundTruthFlow<T>(H, W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double tx, ty;
      map.forward(x, y, tx, ty);
      out.gt.dx(y, x) = static_cast<T>(tx - x);
      out.gt.dy(y, x) = static_cast<T>(ty - y);
      out.gt.set_valid(y, x, tx >= 0 && ty >= 0 && tx <= W - 1 && ty <= H - 1);
    }

  const int m = std::clamp(bounds.margin, 0, std::min(H, W) / 2 - 1);
  out.pair.source_bbox = {m, m, W - 2 * m, H - 2 * m};
  const Rect& sb = out.pair.source_bbox;
  double x0 = W, y0 = H, x1 = -1, y1 = -1;
  auto extend = [&](int x, int y) {
    const double tx = x + out.gt.dx(y, x), ty = y + out.gt.dy(y, x);
    x0 = std::min(x0, tx);
    y0 = std::min(y0, ty);
    x1 = std::max(x1, tx);
    y1 = std::max(y1, ty);
  };
  for (int x = sb.x; x < sb.x + sb.w; ++x) {
    extend(x, sb.y);
    extend(x, sb.y + sb.h - 1);
  }
  for (int y = sb.y; y < sb.y + sb.h; ++y) {
    extend(sb.x, y);
    extend(sb.x + sb.w - 1, y);
  }
  const int bx0 = std::clamp(static_cast<int>(std::floor(x0)), 0, W - 1);
  const int by0 = std::clamp(static_cast<int>(std::floor(y0)), 0, H - 1);
  const int bx1 = std::clamp(static_cast<int>(std::ceil(x1)), 0, W - 1);
  const int by1 = std::clamp(static_cast<int>(std::ceil(y1)), 0, H - 1);
  out.pair.target_bbox = {bx0, by0, bx1 - bx0 + 1, by1 - by0 + 1};

  out.source_keypoints.bbox = out.pair.source_bbox;
  out.target_keypoints.bbox = out.pair.target_bbox;
  for (int gy = 0; gy < grid; ++gy)
    for (int gx = 0; gx < grid; ++gx) {
      const int x = sb.x + (grid > 1 ? gx * (sb.w - 1) / (grid - 1) : sb.w / 2);
      const int y = sb.y + (grid > 1 ? gy * (sb.h - 1) / (grid - 1) : sb.h / 2);
      if (!out.gt.is_valid(y, x)) continue;
      out.source_keypoints.points.push_back({static_cast<double>(x), static_cast<double>(y)});
      out.target_keypoints.points.push_back(
          {x + static_cast<double>(out.gt.dx(y, x)), y + static_cast<double>(out.gt.dy(y, x))});
    }
  return out;
}

template <typename T>
SynthPair<T> synth_pair(const Tensor<T>& image, const WarpBounds& bounds, uint64_t seed, int grid = 5) {
  Rng rng(seed);
  return synth_pair(image, sample_warp(bounds, rng), bounds, grid);
}

}  // namespace fcss
