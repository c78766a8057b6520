#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fcss/backbone.hpp"
#include "fcss/io.hpp"
#include "test_util.hpp"

using namespace fcss;
using fcss::testing::dot;
using fcss::testing::max_rel_error;
using fcss::testing::numeric_gradient;
using fcss::testing::random_tensor;

namespace {

BackboneConfig small_config() {
  BackboneConfig c;
  c.stages = {{2, 4, 3, 2}, {1, 5, 3, 2}, {1, 3, 3, 1}};
  return c;
}

double probe_loss(const FeaturePyramid<double>& pyr, const std::vector<Tensor<double>>& probes) {
  double s = 0.0;
  for (std::size_t k = 0; k < probes.size(); ++k) s += dot(pyr.levels[k].activation, probes[k]);
  return s;
}

}  // namespace

TEST(Backbone, DefaultPlanStridesAndShapes) {
  Rng rng(1);
  const auto cfg = BackboneConfig::default_plan();
  const auto params = init_backbone<double>(cfg, rng);
  const auto image = random_tensor(rng, 3, 64, 64, 0.0, 1.0);
  const auto pyr = backbone_forward(image, cfg, params);
  ASSERT_EQ(pyr.levels.size(), 3u);
  EXPECT_EQ(pyr.levels[0].stride, 2);
  EXPECT_EQ(pyr.levels[1].stride, 4);
  EXPECT_EQ(pyr.levels[2].stride, 4);
  EXPECT_EQ(pyr.levels[0].activation.shape(), (Shape{16, 32, 32}));
  EXPECT_EQ(pyr.levels[1].activation.shape(), (Shape{32, 16, 16}));
  EXPECT_EQ(pyr.levels[2].activation.shape(), (Shape{32, 16, 16}));
}

TEST(Backbone, OddSizesRoundUp) {
  Rng rng(2);
  const auto cfg = BackboneConfig::default_plan();
  const auto params = init_backbone<double>(cfg, rng);
  const auto pyr = backbone_forward(random_tensor(rng, 3, 37, 29, 0.0, 1.0), cfg, params);
  EXPECT_EQ(pyr.levels[0].activation.height(), 19);
  EXPECT_EQ(pyr.levels[0].activation.width(), 15);
  EXPECT_EQ(pyr.levels[2].activation.height(), 10);
  EXPECT_EQ(pyr.levels[2].activation.width(), 8);
}

TEST(Backbone, ZeroImageZeroBiasGivesZeroTaps) {
  Rng rng(3);
  const auto cfg = BackboneConfig::default_plan();
  const auto params = init_backbone<double>(cfg, rng);
  const auto pyr = backbone_forward(Tensor<double>(3, 16, 16), cfg, params);
  for (const auto& lvl : pyr.levels)
    for (double v : lvl.activation.data()) EXPECT_EQ(v, 0.0);
}

TEST(Backbone, GrayscaleIsBroadcast) {
  Rng rng(4);
  const auto cfg = small_config();
  const auto params = init_backbone<double>(cfg, rng);
  const auto gray = random_tensor(rng, 1, 12, 12, 0.0, 1.0);
  Tensor<double> rgb(3, 12, 12);
  for (int c = 0; c < 3; ++c) std::copy(gray.data().begin(), gray.data().end(), rgb.plane(c).begin());
  EXPECT_EQ(backbone_forward(gray, cfg, params), backbone_forward(rgb, cfg, params));
  EXPECT_THROW(backbone_forward(random_tensor(rng, 2, 12, 12), cfg, params), ConfigError);
}

TEST(Backbone, IdentitySingleStageTapIsNormalizedInput) {
  BackboneConfig cfg;
  cfg.stages = {{1, 3, 1, 1}};
  BackboneParams<double> params;
  params.stages.emplace_back().emplace_back(3, 3, 1, 1);
  for (int c = 0; c < 3; ++c) params.stages[0][0].weight(c, c, 0, 0) = 1.0;
  Rng rng(5);
  const auto image = random_tensor(rng, 3, 6, 7, 0.0, 1.0);
  const auto pyr = backbone_forward(image, cfg, params);
  ASSERT_EQ(pyr.levels.size(), 1u);
  EXPECT_EQ(pyr.levels[0].stride, 1);
  EXPECT_EQ(pyr.levels[0].activation, channelwise_l2_normalize(image));
}

TEST(Backbone, TapNormsBounded) {
  Rng rng(6);
  const auto cfg = BackboneConfig::default_plan();
  auto params = init_backbone<double>(cfg, rng);
  const auto image = random_tensor(rng, 3, 32, 32, 0.0, 1.0);
  const auto pyr = backbone_forward(image, cfg, params);
  for (const auto& lvl : pyr.levels) {
    const auto& a = lvl.activation;
    for (int y = 0; y < a.height(); ++y)
      for (int x = 0; x < a.width(); ++x) {
        double n = 0;
        for (int c = 0; c < a.channels(); ++c) n += a(c, y, x) * a(c, y, x);
        n = std::sqrt(n);
        EXPECT_LE(n, 1.0 + 1e-12);
        EXPECT_TRUE(n == 0.0 || n >= 1.0 - 1e-3);
      }
  }
}

TEST(Backbone, Deterministic) {
  Rng rng(7);
  const auto cfg = BackboneConfig::default_plan();
  const auto params = init_backbone<double>(cfg, rng);
  const auto image = random_tensor(rng, 3, 24, 24, 0.0, 1.0);
  EXPECT_EQ(backbone_forward(image, cfg, params), backbone_forward(image, cfg, params));
}

TEST(Backbone, ParamShapeMismatchThrows) {
  Rng rng(8);
  auto params = init_backbone<double>(small_config(), rng);
  EXPECT_THROW(backbone_forward(Tensor<double>(3, 8, 8), BackboneConfig::default_plan(), params), ConfigError);
}

TEST(BackboneBackward, ZeroTapGradientsGiveZero) {
  Rng rng(9);
  const auto cfg = small_config();
  const auto params = init_backbone<double>(cfg, rng);
  const auto image = random_tensor(rng, 3, 12, 12, 0.0, 1.0);
  const auto pyr = backbone_forward(image, cfg, params);
  std::vector<Tensor<double>> zeros;
  for (const auto& l : pyr.levels) zeros.emplace_back(l.activation.shape());
  const auto g = backbone_backward(image, cfg, params, zeros);
  for (const auto& stage : g.stages)
    for (const auto& layer : stage) {
      for (double v : layer.weights) EXPECT_EQ(v, 0.0);
      for (double v : layer.bias) EXPECT_EQ(v, 0.0);
    }
}

TEST(BackboneBackward, SingleLayerReducesToConvAndNormalizeAdjoints) {
  BackboneConfig cfg;
  cfg.stages = {{1, 4, 3, 1}};
  Rng rng(10);
  auto params = init_backbone<double>(cfg, rng);
  for (auto& b : params.stages[0][0].bias) b = 0.3;
  const auto image = random_tensor(rng, 3, 7, 8, 0.0, 1.0);
  const auto probe = random_tensor(rng, 4, 7, 8);
  const auto g = backbone_backward(image, cfg, params, {probe});
  const auto pre = conv2d(image, params.stages[0][0]);
  const auto g_relu = relu_backward(pre, channelwise_l2_normalize_backward(relu(pre), probe));
  const auto expected = conv2d_backward(image, params.stages[0][0], g_relu).params;
  EXPECT_EQ(g.stages[0][0].weights, expected.weights);
  EXPECT_EQ(g.stages[0][0].bias, expected.bias);
}

TEST(BackboneBackward, MatchesFiniteDifferences) {
  for (uint64_t seed : {11u, 12u}) {
    Rng rng(seed);
    const auto cfg = small_config();
    auto params = init_backbone<double>(cfg, rng);
    for (auto& stage : params.stages)
      for (auto& layer : stage)
        for (auto& b : layer.bias) b = uniform(rng, 0.05, 0.2);
    const auto image = random_tensor(rng, 3, 12, 12, 0.0, 1.0);
    const auto pyr = backbone_forward(image, cfg, params);
    std::vector<Tensor<double>> probes;
    for (const auto& l : pyr.levels)
      probes.push_back(random_tensor(rng, l.activation.channels(), l.activation.height(), l.activation.width()));
    const auto g = backbone_backward(image, cfg, params, probes);
    auto loss = [&] { return probe_loss(backbone_forward(image, cfg, params), probes); };
    for (std::size_t s = 0; s < params.stages.size(); ++s)
      for (std::size_t l = 0; l < params.stages[s].size(); ++l) {
        auto& layer = params.stages[s][l];
        EXPECT_LE(max_rel_error(g.stages[s][l].weights, numeric_gradient(layer.weights, loss, 1e-6)), 1e-4)
            << "stage " << s << " layer " << l;
        EXPECT_LE(max_rel_error(g.stages[s][l].bias, numeric_gradient(layer.bias, loss, 1e-6)), 1e-4)
            << "stage " << s << " layer " << l;
      }
  }
}

TEST(BackboneBackward, TapGradientsSuperpose) {
  Rng rng(13);
  const auto cfg = small_config();
  const auto params = init_backbone<double>(cfg, rng);
  const auto image = random_tensor(rng, 3, 12, 12, 0.0, 1.0);
  const auto pyr = backbone_forward(image, cfg, params);
  std::vector<Tensor<double>> probes;
  for (const auto& l : pyr.levels)
    probes.push_back(random_tensor(rng, l.activation.channels(), l.activation.height(), l.activation.width()));
  const auto joint = backbone_backward(image, cfg, params, probes);
  auto sum = params.zeros_like();
  for (std::size_t k = 0; k < probes.size(); ++k) {
    std::vector<Tensor<double>> single;
    for (std::size_t j = 0; j < probes.size(); ++j)
      single.push_back(j == k ? probes[j] : Tensor<double>(probes[j].shape()));
    const auto g = backbone_backward(image, cfg, params, single);
    for (std::size_t s = 0; s < sum.stages.size(); ++s)
      for (std::size_t l = 0; l < sum.stages[s].size(); ++l)
        for (std::size_t i = 0; i < sum.stages[s][l].weights.size(); ++i)
          sum.stages[s][l].weights[i] += g.stages[s][l].weights[i];
  }
  for (std::size_t s = 0; s < sum.stages.size(); ++s)
    for (std::size_t l = 0; l < sum.stages[s].size(); ++l)
      for (std::size_t i = 0; i < sum.stages[s][l].weights.size(); ++i)
        EXPECT_NEAR(sum.stages[s][l].weights[i], joint.stages[s][l].weights[i], 1e-12);
}

TEST(BackboneBackward, WrongTapCountThrows) {
  Rng rng(14);
  const auto cfg = small_config();
  const auto params = init_backbone<double>(cfg, rng);
  EXPECT_THROW(backbone_backward(Tensor<double>(3, 8, 8), cfg, params, {}), ShapeError);
}

TEST(InjectPyramid, RoundTripsBitExactly) {
  Rng rng(15);
  const auto cfg = BackboneConfig::default_plan();
  const auto params = init_backbone<double>(cfg, rng);
  const auto pyr = backbone_forward(random_tensor(rng, 3, 20, 20, 0.0, 1.0), cfg, params);
  const auto path = std::filesystem::temp_directory_path() / "fcss_test_pyramid.fcsp";
  save_pyramid(path, pyr);
  const auto back = inject_pyramid<double>(path);
  std::filesystem::remove(path);
  EXPECT_TRUE(back.frozen);
  ASSERT_EQ(back.levels.size(), pyr.levels.size());
  for (std::size_t k = 0; k < pyr.levels.size(); ++k) EXPECT_EQ(back.levels[k], pyr.levels[k]);
}

TEST(InjectPyramid, StrideOrder) {
  FeaturePyramid<double> ok;
  ok.levels = {{Tensor<double>(2, 4, 4), 2}, {Tensor<double>(2, 2, 2), 4}, {Tensor<double>(2, 2, 2), 4}};
  EXPECT_NO_THROW(ok.validate());
  FeaturePyramid<double> bad;
  bad.levels = {{Tensor<double>(2, 2, 2), 4}, {Tensor<double>(2, 4, 4), 2}};
  try {
    bad.validate();
    FAIL() << "decreasing strides accepted";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("stride order"), std::string::npos);
  }
  EXPECT_THROW(save_pyramid(std::filesystem::temp_directory_path() / "fcss_unused.fcsp", bad), ConfigError);

  // Hand-assembled file with strides 4 then 2.
  const auto path = std::filesystem::temp_directory_path() / "fcss_test_bad_pyramid.fcsp";
  {
    std::ofstream os(path, std::ios::binary);
    os.write("FCSP", 4);
    detail::put(os, kPyramidFileVersion);
    detail::put(os, uint32_t{2});
    for (const auto& lvl : bad.levels) {
      detail::put(os, static_cast<uint32_t>(lvl.stride));
      write_tensor(os, lvl.activation);
    }
  }
  EXPECT_THROW(inject_pyramid<double>(path), ConfigError);
  std::filesystem::remove(path);
}
