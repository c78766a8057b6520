#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "fcss/tensor.hpp"
#include "test_util.hpp"

using namespace fcss;
using fcss::testing::dot;
using fcss::testing::max_rel_error;
using fcss::testing::numeric_gradient;
using fcss::testing::random_tensor;

namespace {

// Six nested loops with explicit edge clamping.
template <typename T>
Tensor<T> loop_conv(const Tensor<T>& in, const ConvParams<T>& p) {
  const int H = in.height(), W = in.width();
  Tensor<T> out(p.out_c, H, W);
  for (int o = 0; o < p.out_c; ++o)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double acc = p.bias[o];
        for (int i = 0; i < p.in_c; ++i)
          for (int ky = 0; ky < p.kh; ++ky)
            for (int kx = 0; kx < p.kw; ++kx) {
              int sy = y + ky - p.kh / 2, sx = x + kx - p.kw / 2;
              sy = sy < 0 ? 0 : (sy >= H ? H - 1 : sy);
              sx = sx < 0 ? 0 : (sx >= W ? W - 1 : sx);
              acc += static_cast<double>(p.weights[((o * p.in_c + i) * p.kh + ky) * p.kw + kx]) * in(i, sy, sx);
            }
        out(o, y, x) = static_cast<T>(acc);
      }
  return out;
}

template <typename T>
ConvParams<T> random_conv(Rng& rng, int out_c, int in_c, int k) {
  ConvParams<T> p(out_c, in_c, k, k);
  for (auto& w : p.weights) w = uniform<T>(rng, -1.0, 1.0);
  for (auto& b : p.bias) b = uniform<T>(rng, -1.0, 1.0);
  return p;
}

}  // namespace

TEST(Conv2d, IdentityKernelIsIdentity) {
  Rng rng(1);
  const auto in = random_tensor(rng, 3, 5, 7);
  ConvParams<double> p(3, 3, 1, 1);
  for (int c = 0; c < 3; ++c) p.weight(c, c, 0, 0) = 1.0;
  EXPECT_EQ(conv2d(in, p), in);
}

TEST(Conv2d, ZeroInputGivesBias) {
  ConvParams<double> p(2, 3, 3, 3);
  Rng rng(2);
  for (auto& w : p.weights) w = uniform(rng, -1.0, 1.0);
  p.bias = {0.25, -1.5};
  const auto out = conv2d(Tensor<double>(3, 4, 4), p);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      EXPECT_EQ(out(0, y, x), 0.25);
      EXPECT_EQ(out(1, y, x), -1.5);
    }
}

TEST(Conv2d, MatchesLoopNest) {
  Rng rng(3);
  const auto in = random_tensor(rng, 3, 8, 8);
  const auto p = random_conv<double>(rng, 4, 3, 3);
  const auto a = conv2d(in, p), b = loop_conv(in, p);
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_LE(std::abs(a.data()[i] - b.data()[i]), 1e-6 * std::max(1.0, std::abs(b.data()[i])));
}

TEST(Conv2d, SinglePrecisionMatchesLoopNest) {
  Rng rng(4);
  const auto in = random_tensor<float>(rng, 3, 8, 8);
  const auto p = random_conv<float>(rng, 4, 3, 3);
  const auto a = conv2d(in, p), b = loop_conv(in, p);
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_LE(std::abs(a.data()[i] - b.data()[i]), 1e-5f * std::max(1.0f, std::abs(b.data()[i])));
}

TEST(Conv2d, ChannelMismatchThrows) {
  ConvParams<double> p(2, 3, 3, 3);
  EXPECT_THROW(conv2d(Tensor<double>(2, 4, 4), p), ConfigError);
}

TEST(Conv2d, EvenKernelRejected) {
  EXPECT_THROW((ConvParams<double>(2, 3, 2, 3)), ConfigError);
}

TEST(Conv2dBackward, ZeroGradGivesZero) {
  Rng rng(5);
  const auto in = random_tensor(rng, 2, 5, 5);
  const auto p = random_conv<double>(rng, 3, 2, 3);
  const auto g = conv2d_backward(in, p, Tensor<double>(3, 5, 5));
  for (double v : g.input.data()) EXPECT_EQ(v, 0.0);
  for (double v : g.params.weights) EXPECT_EQ(v, 0.0);
  for (double v : g.params.bias) EXPECT_EQ(v, 0.0);
}

TEST(Conv2dBackward, IdentityKernelPassesGradient) {
  Rng rng(6);
  const auto in = random_tensor(rng, 2, 4, 6);
  ConvParams<double> p(2, 2, 1, 1);
  p.weight(0, 0, 0, 0) = p.weight(1, 1, 0, 0) = 1.0;
  const auto go = random_tensor(rng, 2, 4, 6);
  EXPECT_EQ(conv2d_backward(in, p, go).input, go);
}

TEST(Conv2dBackward, ShapeMismatchThrows) {
  ConvParams<double> p(2, 2, 3, 3);
  EXPECT_THROW(conv2d_backward(Tensor<double>(2, 4, 4), p, Tensor<double>(2, 4, 5)), ShapeError);
}

TEST(Conv2dBackward, MatchesFiniteDifferencesDouble) {
  for (uint64_t seed = 10; seed < 13; ++seed) {
    Rng rng(seed);
    auto in = random_tensor(rng, 3, 6, 7);
    auto p = random_conv<double>(rng, 4, 3, 3);
    const auto probe = random_tensor(rng, 4, 6, 7);
    const auto g = conv2d_backward(in, p, probe);
    auto loss = [&] { return dot(conv2d(in, p), probe); };
    EXPECT_LE(max_rel_error(g.input.data(), numeric_gradient(in.data(), loss, 1e-6)), 1e-6);
    EXPECT_LE(max_rel_error(g.params.weights, numeric_gradient(p.weights, loss, 1e-6)), 1e-6);
    EXPECT_LE(max_rel_error(g.params.bias, numeric_gradient(p.bias, loss, 1e-6)), 1e-6);
  }
}

// Single-precision analytic gradients against double-precision central
// differences of the same (float-representable) problem.
TEST(Conv2dBackward, SinglePrecisionMatchesFiniteDifferences) {
  Rng rng(20);
  auto in = random_tensor(rng, 3, 6, 7);
  auto p = random_conv<double>(rng, 4, 3, 3);
  auto probe = random_tensor(rng, 4, 6, 7);
  auto to_float = [](const Tensor<double>& t) {
    Tensor<float> f(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) f.data()[i] = static_cast<float>(t.data()[i]);
    return f;
  };
  const auto inf = to_float(in), probef = to_float(probe);
  ConvParams<float> pf(4, 3, 3, 3);
  for (std::size_t i = 0; i < p.weights.size(); ++i) pf.weights[i] = static_cast<float>(p.weights[i]);
  for (std::size_t i = 0; i < p.bias.size(); ++i) pf.bias[i] = static_cast<float>(p.bias[i]);
  for (std::size_t i = 0; i < in.size(); ++i) in.data()[i] = inf.data()[i];
  for (std::size_t i = 0; i < probe.size(); ++i) probe.data()[i] = probef.data()[i];
  for (std::size_t i = 0; i < p.weights.size(); ++i) p.weights[i] = pf.weights[i];
  for (std::size_t i = 0; i < p.bias.size(); ++i) p.bias[i] = pf.bias[i];
  const auto g = conv2d_backward(inf, pf, probef);
  auto loss = [&] { return dot(conv2d(in, p), probe); };
  EXPECT_LE(max_rel_error(g.input.data(), numeric_gradient(in.data(), loss, 1e-6)), 1e-4);
  EXPECT_LE(max_rel_error(g.params.weights, numeric_gradient(p.weights, loss, 1e-6)), 1e-4);
  EXPECT_LE(max_rel_error(g.params.bias, numeric_gradient(p.bias, loss, 1e-6)), 1e-4);
}

TEST(Relu, NegativeAndPositive) {
  Tensor<double> neg(1, 2, 2, -0.5), pos(1, 2, 2, 0.7);
  EXPECT_EQ(relu(neg), Tensor<double>(1, 2, 2, 0.0));
  EXPECT_EQ(relu(pos), pos);
}

TEST(Relu, BackwardMatchesFiniteDifferencesAwayFromKinks) {
  Rng rng(7);
  auto in = random_tensor(rng, 2, 4, 4);
  for (auto& v : in.data())
    if (std::abs(v) < 1e-3) v = 0.5;
  const auto probe = random_tensor(rng, 2, 4, 4);
  auto loss = [&] { return dot(relu(in), probe); };
  const auto g = relu_backward(in, probe);
  EXPECT_LE(max_rel_error(g.data(), numeric_gradient(in.data(), loss, 1e-6)), 1e-6);
}

TEST(BilinearResample, SameSizeIsIdentity) {
  Rng rng(8);
  const auto in = random_tensor(rng, 2, 5, 6);
  EXPECT_EQ(bilinear_resample(in, 5, 6), in);
}

TEST(BilinearResample, ConstantStaysConstant) {
  const Tensor<double> in(2, 3, 4, 0.375);
  const auto out = bilinear_resample(in, 7, 11);
  for (double v : out.data()) EXPECT_DOUBLE_EQ(v, 0.375);
}

TEST(BilinearResample, HandEvaluatedCentre) {
  Tensor<double> in(1, 2, 2);
  in(0, 0, 0) = 0;
  in(0, 0, 1) = 1;
  in(0, 1, 0) = 2;
  in(0, 1, 1) = 3;
  const auto out = bilinear_resample(in, 3, 3);
  EXPECT_DOUBLE_EQ(out(0, 1, 1), 1.5);
  EXPECT_DOUBLE_EQ(out(0, 0, 1), 0.5);
  EXPECT_DOUBLE_EQ(out(0, 2, 2), 3.0);
}

TEST(BilinearResample, SinglePixelAxisMapsToZero) {
  Tensor<double> in(1, 2, 3);
  for (int x = 0; x < 3; ++x) in(0, 0, x) = x, in(0, 1, x) = 10 + x;
  const auto out = bilinear_resample(in, 1, 3);
  EXPECT_DOUBLE_EQ(out(0, 0, 2), 2.0);
}

TEST(BilinearResample, BackwardMatchesFiniteDifferences) {
  Rng rng(9);
  auto in = random_tensor(rng, 2, 3, 4);
  const auto probe = random_tensor(rng, 2, 7, 9);
  auto loss = [&] { return dot(bilinear_resample(in, 7, 9), probe); };
  const auto g = bilinear_resample_backward(in.shape(), probe);
  EXPECT_LE(max_rel_error(g.data(), numeric_gradient(in.data(), loss, 1e-6)), 1e-6);
}

TEST(SpatialGradient, ConstantIsExactlyZero) {
  const auto g = spatial_gradient(Tensor<double>(2, 4, 5, 3.25));
  for (double v : g.gx.data()) EXPECT_EQ(v, 0.0);
  for (double v : g.gy.data()) EXPECT_EQ(v, 0.0);
}

TEST(SpatialGradient, RampHasUnitSlope) {
  Tensor<double> in(1, 4, 6);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 6; ++x) in(0, y, x) = x;
  const auto g = spatial_gradient(in);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 6; ++x) {
      EXPECT_DOUBLE_EQ(g.gx(0, y, x), 1.0);
      EXPECT_DOUBLE_EQ(g.gy(0, y, x), 0.0);
    }
}

TEST(SpatialGradient, InteriorMatchesDefinition) {
  Rng rng(10);
  const auto in = random_tensor(rng, 2, 5, 6);
  const auto g = spatial_gradient(in);
  for (int c = 0; c < 2; ++c)
    for (int y = 1; y < 4; ++y)
      for (int x = 1; x < 5; ++x) {
        EXPECT_DOUBLE_EQ(g.gx(c, y, x), (in(c, y, x + 1) - in(c, y, x - 1)) / 2);
        EXPECT_DOUBLE_EQ(g.gy(c, y, x), (in(c, y + 1, x) - in(c, y - 1, x)) / 2);
      }
}

TEST(SpatialGradient, DegenerateAxisIsZero) {
  Rng rng(11);
  const auto g = spatial_gradient(random_tensor(rng, 1, 1, 5));
  for (double v : g.gy.data()) EXPECT_EQ(v, 0.0);
}

TEST(L2Normalize, UnitVectorsUnchanged) {
  Tensor<double> in(2, 1, 2);
  in(0, 0, 0) = 1.0;
  in(1, 0, 1) = -1.0;
  const auto out = channelwise_l2_normalize(in);
  for (std::size_t i = 0; i < in.size(); ++i) EXPECT_NEAR(out.data()[i], in.data()[i], 1e-8);
}

TEST(L2Normalize, ZeroStaysZero) {
  const auto out = channelwise_l2_normalize(Tensor<double>(3, 2, 2));
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(L2Normalize, NormsAndBackward) {
  Rng rng(12);
  auto in = random_tensor(rng, 4, 5, 5);
  const auto out = channelwise_l2_normalize(in);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) {
      double n_in = 0, n_out = 0;
      for (int c = 0; c < 4; ++c) n_in += in(c, y, x) * in(c, y, x), n_out += out(c, y, x) * out(c, y, x);
      EXPECT_LE(std::sqrt(n_out), 1.0);
      if (std::sqrt(n_in) >= 0.1) {
        EXPECT_GE(std::sqrt(n_out), 1.0 - 1e-3);
      }
    }
  const auto probe = random_tensor(rng, 4, 5, 5);
  auto loss = [&] { return dot(channelwise_l2_normalize(in), probe); };
  const auto g = channelwise_l2_normalize_backward(in, probe);
  EXPECT_LE(max_rel_error(g.data(), numeric_gradient(in.data(), loss, 1e-6)), 1e-6);
}

TEST(AvgPool, BackwardMatchesFiniteDifferences) {
  Rng rng(13);
  auto in = random_tensor(rng, 2, 5, 7);
  const auto probe = random_tensor(rng, 2, 3, 4);
  auto loss = [&] { return dot(avg_pool2(in), probe); };
  const auto g = avg_pool2_backward(in.shape(), probe);
  EXPECT_LE(max_rel_error(g.data(), numeric_gradient(in.data(), loss, 1e-6)), 1e-6);
}

TEST(Composition, IdentityConvThenSameSizeResampleIsIdentity) {
  Rng rng(14);
  const auto in = random_tensor(rng, 2, 6, 5);
  ConvParams<double> p(2, 2, 1, 1);
  p.weight(0, 0, 0, 0) = p.weight(1, 1, 0, 0) = 1.0;
  EXPECT_EQ(bilinear_resample(conv2d(in, p), 6, 5), in);
}

TEST(Parallel, ConvIsIndependentOfThreadCount) {
  Rng rng(15);
  const auto in = random_tensor(rng, 3, 9, 9);
  const auto p = random_conv<double>(rng, 5, 3, 3);
  set_num_threads(1);
  const auto a = conv2d(in, p);
  set_num_threads(4);
  const auto b = conv2d(in, p);
  set_num_threads(1);
  EXPECT_EQ(a, b);
}
