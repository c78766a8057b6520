#pragma once

// Small trainable feature extractor producing K normalized activation taps.
// Each stage optionally halves resolution with 2x2 average pooling, then runs
// a chain of conv + ReLU layers; the stage output is exposed as one tap after
// per-pixel L2 normalization and also feeds the next stage unnormalized.

#include <cmath>
#include <string>
#include <vector>

#include "fcss/error.hpp"
#include "fcss/random.hpp"
#include "fcss/tensor.hpp"

namespace fcss {

struct StageSpec {
  int num_convs = 2;
  int channels = 16;
  int kernel = 3;
  int downsample = 1;  // 1 or 2, applied at stage entry

  friend bool operator==(const StageSpec&, const StageSpec&) = default;
};

struct BackboneConfig {
  int in_channels = 3;
  std::vector<StageSpec> stages;

  // Three taps at strides 2, 4, 4.
  static BackboneConfig default_plan() {
    BackboneConfig c;
    c.stages = {{2, 16, 3, 2}, {2, 32, 3, 2}, {2, 32, 3, 1}};
    return c;
  }

  int levels() const { return static_cast<int>(stages.size()); }

  std::vector<int> strides() const {
    std::vector<int> s;
    int stride = 1;
    for (const auto& st : stages) {
      stride *= st.downsample;
      s.push_back(stride);
    }
    return s;
  }

  void validate() const {
    if (in_channels < 1) throw ConfigError("backbone needs at least one input channel");
    if (stages.empty()) throw ConfigError("backbone needs at least one stage (K >= 1)");
    for (const auto& st : stages) {
      if (st.num_convs < 1 || st.channels < 1)
        throw ConfigError("backbone stage needs at least one conv layer and channel");
      if (st.kernel < 1 || st.kernel % 2 == 0)
        throw ConfigError("backbone kernel size must be odd");
      if (st.downsample != 1 && st.downsample != 2)
        throw ConfigError("backbone downsample factor must be 1 or 2");
    }
  }

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

template <typename T>
struct BackboneParams {
  std::vector<std::vector<ConvParams<T>>> stages;

  void validate(const BackboneConfig& cfg) const {
    cfg.validate();
    if (stages.size() != cfg.stages.size())
      throw ConfigError("backbone params have " + std::to_string(stages.size()) +
                        " stages, config has " + std::to_string(cfg.stages.size()));
    int in_c = cfg.in_channels;
    for (std::size_t s = 0; s < stages.size(); ++s) {
      const auto& spec = cfg.stages[s];
      if (stages[s].size() != static_cast<std::size_t>(spec.num_convs))
        throw ConfigError("backbone stage " + std::to_string(s) + " layer count mismatch");
      for (const auto& layer : stages[s]) {
        layer.validate();
        if (layer.in_c != in_c || layer.out_c != spec.channels || layer.kh != spec.kernel ||
            layer.kw != spec.kernel)
          throw ConfigError("backbone stage " + std::to_string(s) + " layer shape mismatch");
        in_c = layer.out_c;
      }
    }
  }

  BackboneParams zeros_like() const {
    BackboneParams z;
    for (const auto& st : stages) {
      auto& out = z.stages.emplace_back();
      for (const auto& layer : st) out.push_back(layer.zeros_like());
    }
    return z;
  }

  friend bool operator==(const BackboneParams&, const BackboneParams&) = default;
};

// Uniform Glorot initialization with zero biases.
template <typename T>
BackboneParams<T> init_backbone(const BackboneConfig& cfg, Rng& rng) {
  cfg.validate();
  BackboneParams<T> p;
  int in_c = cfg.in_channels;
  for (const auto& spec : cfg.stages) {
    auto& stage = p.stages.emplace_back();
    for (int l = 0; l < spec.num_convs; ++l) {
      ConvParams<T> layer(spec.channels, in_c, spec.kernel, spec.kernel);
      const double fan = static_cast<double>(in_c + spec.channels) * spec.kernel * spec.kernel;
      const double a = std::sqrt(6.0 / fan);
      for (auto& w : layer.weights) w = uniform<T>(rng, -a, a);
      stage.push_back(std::move(layer));
      in_c = spec.channels;
    }
  }
  return p;
}

template <typename T>
struct PyramidLevel {
  Tensor<T> activation;
  int stride = 1;

  friend bool operator==(const PyramidLevel&, const PyramidLevel&) = default;
};

template <typename T>
struct FeaturePyramid {
  std::vector<PyramidLevel<T>> levels;
  // Set for injected pyramids: no backbone gradients exist for them.
  bool frozen = false;

  void validate() const {
    if (levels.empty()) throw ConfigError("feature pyramid has no levels");
    int prev = 0;
    for (std::size_t k = 0; k < levels.size(); ++k) {
      const int s = levels[k].stride;
      if (s < 1 || (s & (s - 1)) != 0)
        throw ConfigError("pyramid level " + std::to_string(k) +
                          " stride must be a power of two, got " + std::to_string(s));
      if (s < prev)
        throw ConfigError("pyramid stride order violated: level " + std::to_string(k) +
                          " has stride " + std::to_string(s) + " after " + std::to_string(prev));
      prev = s;
    }
  }

  friend bool operator==(const FeaturePyramid&, const FeaturePyramid&) = default;
};

// Grayscale images are broadcast to the configured channel count.
template <typename T>
Tensor<T> prepare_backbone_input(const Tensor<T>& image, int in_channels) {
  if (image.channels() == in_channels) return image;
  if (image.channels() != 1)
    throw ConfigError("backbone expects " + std::to_string(in_channels) +
                      " input channels (or 1 for grayscale), got " +
                      std::to_string(image.channels()));
  Tensor<T> out(in_channels, image.height(), image.width());
  for (int c = 0; c < in_channels; ++c)
    std::copy(image.plane(0).begin(), image.plane(0).end(), out.plane(c).begin());
  return out;
}

namespace detail {

template <typename T>
struct StageTrace {
  Tensor<T> entry;                    // stage input before pooling
  std::vector<Tensor<T>> layer_in;    // input to each conv
  std::vector<Tensor<T>> layer_pre;   // conv output before ReLU
  Tensor<T> output;                   // raw stage output
};

template <typename T>
std::vector<StageTrace<T>> run_backbone(const Tensor<T>& image, const BackboneConfig& cfg,
                                        const BackboneParams<T>& params) {
  params.validate(cfg);
  std::vector<StageTrace<T>> trace(cfg.stages.size());
  Tensor<T> x = prepare_backbone_input(image, cfg.in_channels);
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    auto& tr = trace[s];
    tr.entry = x;
    if (cfg.stages[s].downsample == 2) x = avg_pool2(x);
    for (const auto& layer : params.stages[s]) {
      tr.layer_in.push_back(x);
      tr.layer_pre.push_back(conv2d(x, layer));
      x = relu(tr.layer_pre.back());
    }
    tr.output = x;
  }
  return trace;
}

}  // namespace detail

template <typename T>
FeaturePyramid<T> backbone_forward(const Tensor<T>& image, const BackboneConfig& cfg,
                                   const BackboneParams<T>& params) {
  const auto trace = detail::run_backbone(image, cfg, params);
  const auto strides = cfg.strides();
  FeaturePyramid<T> pyr;
  for (std::size_t s = 0; s < trace.size(); ++s)
    pyr.levels.push_back({channelwise_l2_normalize(trace[s].output), strides[s]});
  return pyr;
}

// Adjoint of backbone_forward. grad_taps[k] is the gradient with respect to
// the k-th normalized tap; a stage output receives gradient both from its tap
// and from the deeper stages it feeds.
template <typename T>
BackboneParams<T> backbone_backward(const Tensor<T>& image, const BackboneConfig& cfg,
                                    const BackboneParams<T>& params,
                                    const std::vector<Tensor<T>>& grad_taps) {
  const auto trace = detail::run_backbone(image, cfg, params);
  if (grad_taps.size() != trace.size())
    throw ShapeError("backbone_backward: expected " + std::to_string(trace.size()) +
                     " tap gradients, got " + std::to_string(grad_taps.size()));
  BackboneParams<T> grads = params.zeros_like();
  Tensor<T> carry;  // gradient flowing into the raw output of stage s from stage s+1
  for (int s = static_cast<int>(trace.size()) - 1; s >= 0; --s) {
    const auto& tr = trace[s];
    if (grad_taps[s].shape() != tr.output.shape())
      throw ShapeError("backbone_backward: tap " + std::to_string(s) + " gradient shape " +
                       to_string(grad_taps[s].shape()) + " vs " + to_string(tr.output.shape()));
    Tensor<T> g = channelwise_l2_normalize_backward(tr.output, grad_taps[s]);
    if (carry.size() > 0) g += carry;
    for (int l = static_cast<int>(params.stages[s].size()) - 1; l >= 0; --l) {
      g = relu_backward(tr.layer_pre[l], g);
      auto cg = conv2d_backward(tr.layer_in[l], params.stages[s][l], g);
      grads.stages[s][l] = std::move(cg.params);
      g = std::move(cg.input);
    }
    if (cfg.stages[s].downsample == 2) g = avg_pool2_backward(tr.entry.shape(), g);
    carry = std::move(g);
  }
  return grads;
}

}  // namespace fcss
