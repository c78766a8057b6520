#pragma once

// Dense descriptor assembly: backbone taps -> per-level self-similarity ->
// gating and pooling -> upsampling to image resolution -> concatenation ->
// per-pixel L2 normalization.

#include <optional>
#include <string>
#include <vector>

#include "fcss/backbone.hpp"
#include "fcss/css.hpp"
#include "fcss/error.hpp"
#include "fcss/random.hpp"
#include "fcss/tensor.hpp"

namespace fcss {

template <typename T>
struct Model {
  BackboneConfig backbone_config;
  BackboneParams<T> backbone;
  SamplingPatterns<T> patterns;
  CssConfig css;

  int levels() const { return backbone_config.levels(); }
  int descriptor_dim() const { return patterns.total(); }

  void validate() const {
    backbone.validate(backbone_config);
    patterns.validate();
    css.validate();
    if (static_cast<int>(patterns.levels.size()) != backbone_config.levels())
      throw ConfigError("model has " + std::to_string(patterns.levels.size()) +
                        " pattern levels for " + std::to_string(backbone_config.levels()) +
                        " backbone taps");
  }

  friend bool operator==(const Model&, const Model&) = default;
};

// Default model: three taps, 64 patterns per level, 192-dimensional output.
template <typename T>
Model<T> make_model(Rng& rng, BackboneConfig bcfg = BackboneConfig::default_plan(),
                    CssConfig ccfg = {}) {
  Model<T> m;
  m.backbone_config = std::move(bcfg);
  m.css = ccfg;
  m.backbone = init_backbone<T>(m.backbone_config, rng);
  m.patterns = init_patterns<T>(m.backbone_config.levels(), m.css, rng,
                                m.css.shift_mode == ShiftMode::nearest);
  m.validate();
  return m;
}

template <typename T>
struct ModelGradients {
  BackboneParams<T> backbone;
  // Same layout as the model's patterns; log_bandwidth holds d/d(log lambda).
  SamplingPatterns<T> patterns;

  static ModelGradients zeros_like(const Model<T>& m) {
    ModelGradients g;
    g.backbone = m.backbone.zeros_like();
    for (const auto& lvl : m.patterns.levels) {
      auto& gl = g.patterns.levels.emplace_back();
      gl.s.assign(lvl.s.size(), {});
      gl.t.assign(lvl.t.size(), {});
    }
    return g;
  }

  ModelGradients& operator+=(const ModelGradients& o) {
    for (std::size_t s = 0; s < backbone.stages.size(); ++s)
      for (std::size_t l = 0; l < backbone.stages[s].size(); ++l) {
        auto& a = backbone.stages[s][l];
        const auto& b = o.backbone.stages[s][l];
        for (std::size_t i = 0; i < a.weights.size(); ++i) a.weights[i] += b.weights[i];
        for (std::size_t i = 0; i < a.bias.size(); ++i) a.bias[i] += b.bias[i];
      }
    for (std::size_t k = 0; k < patterns.levels.size(); ++k) {
      auto& a = patterns.levels[k];
      const auto& b = o.patterns.levels[k];
      for (std::size_t i = 0; i < a.s.size(); ++i) {
        a.s[i].x += b.s[i].x;
        a.s[i].y += b.s[i].y;
        a.t[i].x += b.t[i].x;
        a.t[i].y += b.t[i].y;
      }
      a.log_bandwidth += b.log_bandwidth;
    }
    return *this;
  }
};

struct LevelSpan {
  int level = 0;
  int begin = 0;  // first channel
  int end = 0;    // one past the last channel

  friend bool operator==(const LevelSpan&, const LevelSpan&) = default;
};

template <typename T>
struct DenseDescriptorField {
  Tensor<T> values;  // L x H x W
  std::vector<LevelSpan> level_spans;

  int dim() const { return values.channels(); }
  int height() const { return values.height(); }
  int width() const { return values.width(); }
};

template <typename T>
std::vector<T> descriptor_at(const DenseDescriptorField<T>& f, int y, int x) {
  if (y < 0 || x < 0 || y >= f.height() || x >= f.width())
    throw ShapeError("descriptor_at: pixel (" + std::to_string(x) + ", " + std::to_string(y) +
                     ") outside " + std::to_string(f.width()) + "x" + std::to_string(f.height()));
  std::vector<T> v(f.dim());
  for (int c = 0; c < f.dim(); ++c) v[c] = f.values(c, y, x);
  return v;
}

namespace detail {

inline void require_extractable(const BackboneConfig& cfg, int h, int w) {
  const auto strides = cfg.strides();
  const int deepest = strides.back();
  if (h < deepest || w < deepest)
    throw ShapeError("image " + std::to_string(w) + "x" + std::to_string(h) +
                     " is smaller than the deepest backbone stride " + std::to_string(deepest));
}

template <typename T>
struct LevelResponse {
  Tensor<T> css;     // raw self-similarity at feature resolution
  Tensor<T> pooled;  // gated and pooled, feature resolution
};

template <typename T>
std::vector<LevelResponse<T>> level_responses(const FeaturePyramid<T>& pyr, const Model<T>& m) {
  if (pyr.levels.size() != m.patterns.levels.size())
    throw ConfigError("pyramid has " + std::to_string(pyr.levels.size()) + " levels, model has " +
                      std::to_string(m.patterns.levels.size()));
  std::vector<LevelResponse<T>> out;
  for (std::size_t k = 0; k < pyr.levels.size(); ++k) {
    const auto& lvl = m.patterns.levels[k];
    auto css = css_forward(pyr.levels[k].activation, lvl, m.css.shift_mode);
    auto pooled = gate_and_pool(css, lvl.bandwidth(), m.css.pool_radius);
    out.push_back({std::move(css), std::move(pooled)});
  }
  return out;
}

template <typename T>
Tensor<T> concatenate_upsampled(const std::vector<LevelResponse<T>>& resp, int h, int w,
                                std::vector<LevelSpan>* spans) {
  int total = 0;
  for (const auto& r : resp) total += r.pooled.channels();
  Tensor<T> cat(total, h, w);
  int offset = 0;
  for (std::size_t k = 0; k < resp.size(); ++k) {
    const auto up = bilinear_resample(resp[k].pooled, h, w);
    std::copy(up.data().begin(), up.data().end(),
              cat.data().begin() + static_cast<std::ptrdiff_t>(offset * cat.plane_size()));
    if (spans) spans->push_back({static_cast<int>(k), offset, offset + up.channels()});
    offset += up.channels();
  }
  return cat;
}

}  // namespace detail

// Descriptor field from an explicit pyramid (backbone output or injected taps).
template <typename T>
DenseDescriptorField<T> extract_from_pyramid(const FeaturePyramid<T>& pyr, const Model<T>& m,
                                             int h, int w) {
  pyr.validate();
  const auto resp = detail::level_responses(pyr, m);
  DenseDescriptorField<T> f;
  f.values = channelwise_l2_normalize(detail::concatenate_upsampled(resp, h, w, &f.level_spans));
  return f;
}

template <typename T>
DenseDescriptorField<T> extract_dense(const Tensor<T>& image, const Model<T>& m) {
  m.validate();
  detail::require_extractable(m.backbone_config, image.height(), image.width());
  const auto pyr = backbone_forward(image, m.backbone_config, m.backbone);
  return extract_from_pyramid(pyr, m, image.height(), image.width());
}

// Pre-normalization responses (gated, pooled, upsampled, concatenated).
template <typename T>
Tensor<T> extract_unnormalized(const Tensor<T>& image, const Model<T>& m) {
  m.validate();
  detail::require_extractable(m.backbone_config, image.height(), image.width());
  const auto pyr = backbone_forward(image, m.backbone_config, m.backbone);
  return detail::concatenate_upsampled(detail::level_responses(pyr, m), image.height(),
                                       image.width(), nullptr);
}

// Adjoint of extract_dense with respect to every learnable parameter. With
// freeze_backbone the backbone gradients are left at zero and the backbone
// adjoint is skipped.
template <typename T>
ModelGradients<T> extract_backward(const Tensor<T>& image, const Model<T>& m,
                                   const Tensor<T>& grad_field, bool freeze_backbone = false) {
  m.validate();
  detail::require_extractable(m.backbone_config, image.height(), image.width());
  const int H = image.height(), W = image.width();
  if (grad_field.shape() != Shape{m.descriptor_dim(), H, W})
    throw ShapeError("extract_backward: grad_field shape " + to_string(grad_field.shape()) +
                     " vs field " + to_string(Shape{m.descriptor_dim(), H, W}));
  const auto pyr = backbone_forward(image, m.backbone_config, m.backbone);
  const auto resp = detail::level_responses(pyr, m);
  const auto cat = detail::concatenate_upsampled(resp, H, W, nullptr);
  const auto g_cat = channelwise_l2_normalize_backward(cat, grad_field);

  auto grads = ModelGradients<T>::zeros_like(m);
  std::vector<Tensor<T>> tap_grads;
  int offset = 0;
  for (std::size_t k = 0; k < resp.size(); ++k) {
    const auto& lvl = m.patterns.levels[k];
    const int Lk = lvl.size();
    Tensor<T> g_up(Lk, H, W);
    std::copy_n(g_cat.data().begin() + static_cast<std::ptrdiff_t>(offset * g_cat.plane_size()),
                g_up.size(), g_up.data().begin());
    offset += Lk;
    const auto g_pooled = bilinear_resample_backward(resp[k].pooled.shape(), g_up);
    const auto gp = gate_and_pool_backward(resp[k].css, lvl.bandwidth(), m.css.pool_radius, g_pooled);
    auto gc = css_backward(pyr.levels[k].activation, lvl, m.css.shift_mode, gp.css);
    auto& out = grads.patterns.levels[k];
    out.s = std::move(gc.s);
    out.t = std::move(gc.t);
    out.log_bandwidth = gp.bandwidth * lvl.bandwidth();  // chain through lambda = exp(theta)
    tap_grads.push_back(std::move(gc.act));
  }
  if (!freeze_backbone)
    grads.backbone = backbone_backward(image, m.backbone_config, m.backbone, tap_grads);
  return grads;
}

}  // namespace fcss
