#include <gtest/gtest.h>

#include <cmath>

#include "fcss/evalkit.hpp"
#include "test_util.hpp"

using namespace fcss;

namespace {

FlowField<double> constant_flow(int h, int w, double dx, double dy) {
  FlowField<double> f(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) f.dx(y, x) = dx, f.dy(y, x) = dy;
  return f;
}

}  // namespace

TEST(Pck, ExactMappingAndMisses) {
  const auto flow = constant_flow(20, 20, 2.0, -1.0);
  const std::vector<Point> src{{3, 4}, {10, 10}, {15.5, 2.25}, {0, 19}};
  std::vector<Point> tgt;
  for (const auto& p : src) tgt.push_back({p.x + 2.0, p.y - 1.0});
  const Rect bbox{0, 0, 20, 10};
  EXPECT_EQ(pck(flow, src, tgt, bbox, 0.1), 1.0);
  std::vector<Point> far;
  for (const auto& p : tgt) far.push_back({p.x + 10, p.y});
  EXPECT_EQ(pck(flow, src, far, bbox, 0.1), 0.0);
  auto half = tgt;
  half[1].x += 10;
  half[3].y += 10;
  EXPECT_EQ(pck(flow, src, half, bbox, 0.1), 0.5);
}

TEST(Pck, RadiusIsInclusiveAndUsesLargerSide) {
  const auto flow = constant_flow(10, 10, 0, 0);
  const std::vector<Point> src{{5, 5}};
  // alpha * max(h, w) = 0.1 * 30 = 3.
  EXPECT_EQ(pck(flow, src, {{8, 5}}, Rect{0, 0, 10, 30}, 0.1), 1.0);
  EXPECT_EQ(pck(flow, src, {{8.01, 5}}, Rect{0, 0, 10, 30}, 0.1), 0.0);
}

TEST(Pck, MonotoneInAlpha) {
  Rng rng(1);
  FlowField<double> flow(16, 16);
  for (auto& v : flow.flow.data()) v = uniform(rng, -4.0, 4.0);
  std::vector<Point> src, tgt;
  for (int i = 0; i < 40; ++i) {
    src.push_back({uniform(rng, 0.0, 15.0), uniform(rng, 0.0, 15.0)});
    tgt.push_back({uniform(rng, 0.0, 15.0), uniform(rng, 0.0, 15.0)});
  }
  double prev = 0.0;
  for (double a = 0.0; a <= 2.0; a += 0.05) {
    const double v = pck(flow, src, tgt, Rect{0, 0, 16, 16}, a);
    EXPECT_GE(v, prev);
    prev = v;
  }
  EXPECT_EQ(prev, 1.0);
}

TEST(Pck, RejectsBadInput) {
  const auto flow = constant_flow(4, 4, 0, 0);
  EXPECT_THROW(pck(flow, {}, {}, Rect{0, 0, 4, 4}, 0.1), ConfigError);
  EXPECT_THROW(pck(flow, {{1, 1}}, {}, Rect{0, 0, 4, 4}, 0.1), ConfigError);
  EXPECT_THROW(pck(flow, {{5, 1}}, {{1, 1}}, Rect{0, 0, 4, 4}, 0.1), ConfigError);
}

TEST(FlowAccuracy, IdenticalAndShifted) {
  Rng rng(2);
  FlowField<double> gt(30, 40);
  for (auto& v : gt.flow.data()) v = uniform(rng, -5.0, 5.0);
  EXPECT_EQ(flow_accuracy(gt, gt), 1.0);
  auto off = gt;
  for (int y = 0; y < 30; ++y)
    for (int x = 0; x < 40; ++x) off.dx(y, x) += kFlowAccuracyThreshold + 1;
  EXPECT_EQ(flow_accuracy(off, gt), 0.0);
  EXPECT_EQ(flow_accuracy(off, gt, kFlowAccuracyThreshold, false), 0.0);
}

TEST(FlowAccuracy, CountedFraction) {
  // 100 x 100 needs no rescaling, so the count is exact either way.
  auto gt = constant_flow(100, 100, 1.0, 1.0);
  auto pred = gt;
  for (int y = 0; y < 100; ++y) gt.set_valid(y, 0, false);  // 9900 scored pixels
  for (int y = 0; y < 33; ++y)
    for (int x = 0; x < 100; ++x) pred.dx(y, x) += 4.999;  // inside
  for (int y = 33; y < 66; ++y)
    for (int x = 0; x < 100; ++x) pred.dy(y, x) -= 5.0;  // on the threshold: miss
  const double expected = (33.0 * 99 + 34.0 * 99) / 9900.0;
  EXPECT_DOUBLE_EQ(flow_accuracy(pred, gt), expected);
  EXPECT_DOUBLE_EQ(flow_accuracy(pred, gt, 5.0, false), expected);
}

TEST(FlowAccuracy, MonotoneInThreshold) {
  Rng rng(3);
  FlowField<double> gt(24, 36), pred(24, 36);
  for (auto& v : gt.flow.data()) v = uniform(rng, -5.0, 5.0);
  for (auto& v : pred.flow.data()) v = uniform(rng, -5.0, 5.0);
  double prev = 0.0;
  for (double t = 0.0; t <= 40.0; t += 1.0) {
    const double v = flow_accuracy(pred, gt, t);
    EXPECT_GE(v, prev);
    prev = v;
  }
  EXPECT_EQ(prev, 1.0);
}

TEST(FlowAccuracy, EmptyMaskAndShapeMismatchThrow) {
  FlowField<double> gt(4, 4);
  std::fill(gt.valid.begin(), gt.valid.end(), uint8_t{0});
  EXPECT_THROW(flow_accuracy(gt, gt), ConfigError);
  EXPECT_THROW(flow_accuracy(FlowField<double>(4, 5), FlowField<double>(4, 4)), ShapeError);
}

TEST(FlowAccuracy, RescaleScalesVectors) {
  const auto f = constant_flow(50, 20, 1.0, 2.0);
  const auto r = detail::rescale_flow(f, 100);
  EXPECT_EQ(r.height(), 100);
  EXPECT_EQ(r.width(), 40);
  EXPECT_NEAR(r.dx(10, 10), 39.0 / 19.0, 1e-12);
  EXPECT_NEAR(r.dy(10, 10), 2.0 * 99.0 / 49.0, 1e-12);
}

TEST(SynthPair, IdentityWarp) {
  const auto img = synth_texture<double>(32, 32, 1);
  const auto sp = synth_pair(img, Warp{});
  EXPECT_EQ(sp.pair.target, img);
  for (double v : sp.gt.flow.data()) EXPECT_EQ(v, 0.0);
  const auto zero = constant_flow(32, 32, 0, 0);
  EXPECT_EQ(pck(zero, sp.source_keypoints.points, sp.target_keypoints.points, sp.target_keypoints.bbox, 0.1), 1.0);
  EXPECT_EQ(sp.source_keypoints.points.size(), 25u);
}

TEST(SynthPair, PureTranslation) {
  const auto img = synth_texture<double>(32, 32, 2);
  const auto sp = synth_pair(img, Warp::translation(3, 0));
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      EXPECT_NEAR(sp.gt.dx(y, x), 3.0, 1e-12);
      EXPECT_NEAR(sp.gt.dy(y, x), 0.0, 1e-12);
      EXPECT_EQ(sp.gt.is_valid(y, x), x + 3 <= 31);
    }
  for (int y = 0; y < 32; ++y)
    for (int x = 3; x < 32; ++x) EXPECT_NEAR(sp.pair.target(0, y, x), img(0, y, x - 3), 1e-12);
}

TEST(SynthPair, SeededDeterminism) {
  const auto img = synth_texture<double>(32, 32, 3);
  const auto a = synth_pair(img, WarpBounds{}, 9), b = synth_pair(img, WarpBounds{}, 9);
  EXPECT_EQ(a.pair.target, b.pair.target);
  EXPECT_EQ(a.gt, b.gt);
  EXPECT_EQ(a.source_keypoints.points, b.source_keypoints.points);
  EXPECT_EQ(synth_texture<double>(16, 16, 4), synth_texture<double>(16, 16, 4));
}

TEST(SynthPair, GroundTruthWarpsTargetBackToSource) {
  const int S = 64;
  const auto img = synth_texture<double>(S, S, 5);
  const auto sp = synth_pair(img, WarpBounds{}, 5);
  const auto back = warp_image(sp.pair.target, sp.gt);
  double se = 0.0;
  long n = 0;
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      if (!sp.gt.is_valid(y, x)) continue;
      for (int c = 0; c < 3; ++c) {
        const double d = back(c, y, x) - img(c, y, x);
        se += d * d;
        ++n;
      }
    }
  ASSERT_GT(n, S * S);
  const double psnr = 10.0 * std::log10(1.0 / (se / n));
  EXPECT_GT(psnr, 30.0);
}

TEST(SynthPair, KeypointsAndBoxesInsideImage) {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    const auto sp = synth_pair(synth_texture<double>(48, 40, seed), WarpBounds{}, seed);
    EXPECT_NO_THROW(sp.pair.validate());
    for (const auto& p : sp.target_keypoints.points) {
      EXPECT_GE(p.x, 0.0);
      EXPECT_LE(p.x, 39.0);
      EXPECT_GE(p.y, 0.0);
      EXPECT_LE(p.y, 47.0);
    }
  }
}

TEST(SynthPair, RejectsNonInvertibleWarp) {
  Warp w;
  w.amplitude_x = 20.0;
  w.cycles = 2.0;
  EXPECT_THROW(synth_pair(synth_texture<double>(32, 32, 6), w), ConfigError);
  w = Warp{};
  w.scale = 0.0;
  EXPECT_THROW(synth_pair(synth_texture<double>(32, 32, 6), w), ConfigError);
}

TEST(SynthTexture, RangeAndShape) {
  const auto t = synth_texture<double>(20, 30, 7, 1);
  EXPECT_EQ(t.shape(), (Shape{1, 20, 30}));
  for (double v : t.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}
