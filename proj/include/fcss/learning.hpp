#pragma once

// Weakly-supervised training: correspondence-consistency mining inside
// object boxes, the correspondence contrastive loss, and SGD with momentum.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "fcss/descriptor.hpp"
#include "fcss/error.hpp"
#include "fcss/parallel.hpp"
#include "fcss/random.hpp"
#include "fcss/rect.hpp"
#include "fcss/tensor.hpp"

namespace fcss {

template <typename T>
struct ImagePairSample {
  Tensor<T> source;
  Tensor<T> target;
  Rect source_bbox;
  Rect target_bbox;

  void validate() const {
    source_bbox.require_within(source.width(), source.height(), "source bbox");
    target_bbox.require_within(target.width(), target.height(), "target bbox");
  }
};

// Source pixel (sx, sy) paired with target pixel (tx, ty).
struct PixelPair {
  int sx = 0;
  int sy = 0;
  int tx = 0;
  int ty = 0;

  friend bool operator==(const PixelPair&, const PixelPair&) = default;
};

struct TrainingBatch {
  std::vector<PixelPair> positives;
  std::vector<PixelPair> negatives;

  std::size_t size() const { return positives.size() + negatives.size(); }
  bool empty() const { return size() == 0; }

  friend bool operator==(const TrainingBatch&, const TrainingBatch&) = default;
};

struct LossConfig {
  double margin = 0.2;            // C, the maximal cost of a negative pair
  double positive_fraction = 0.5; // upper bound on positives per batch
  int batch_cap = 1024;           // N

  void validate() const {
    if (!(margin > 0.0)) throw ConfigError("contrastive margin must be positive");
    if (!(positive_fraction > 0.0 && positive_fraction < 1.0))
      throw ConfigError("positive fraction must lie in (0, 1)");
    if (batch_cap < 1) throw ConfigError("batch cap must be >= 1");
  }
};

struct MiningConfig {
  double tau = 1.0;       // forward-backward tolerance in pixels
  int candidates = 4096;  // source pixels sampled per pair before filtering
};

namespace detail {

// Pixel-major copy of the descriptors inside a box, for contiguous distance loops.
template <typename T>
struct BoxDescriptors {
  Rect box;
  int dim = 0;
  std::vector<T> rows;

  BoxDescriptors(const DenseDescriptorField<T>& f, Rect b) : box(b), dim(f.dim()) {
    rows.resize(static_cast<std::size_t>(b.area()) * dim);
    for (int y = 0; y < b.h; ++y)
      for (int x = 0; x < b.w; ++x)
        for (int c = 0; c < dim; ++c)
          rows[(static_cast<std::size_t>(y) * b.w + x) * dim + c] = f.values(c, b.y + y, b.x + x);
  }

  int count() const { return box.area(); }
  const T* row(int i) const { return rows.data() + static_cast<std::size_t>(i) * dim; }
  int index_of(int px, int py) const { return (py - box.y) * box.w + (px - box.x); }
  int px(int i) const { return box.x + i % box.w; }
  int py(int i) const { return box.y + i / box.w; }
};

template <typename T>
T squared_distance(const T* a, const T* b, int dim) {
  T acc = T(0);
  for (int c = 0; c < dim; ++c) {
    const T d = a[c] - b[c];
    acc += d * d;
  }
  return acc;
}

// Exact nearest neighbour; the first minimum in scan order wins ties.
template <typename T>
int nearest_row(const T* query, const BoxDescriptors<T>& db) {
  int best = 0;
  T best_d = std::numeric_limits<T>::infinity();
  for (int j = 0; j < db.count(); ++j) {
    const T d = squared_distance(query, db.row(j), db.dim);
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  return best;
}

template <typename T>
void require_same_dim(const DenseDescriptorField<T>& a, const DenseDescriptorField<T>& b) {
  if (a.dim() != b.dim())
    throw ShapeError("descriptor fields have different dimensions: " + std::to_string(a.dim()) +
                     " vs " + std::to_string(b.dim()));
}

}  // namespace detail

// Samples up to `candidates` distinct source pixels in box_a, matches each to
// its nearest descriptor in box_b, matches that back into box_a, and labels
// the pair positive when the round trip lands within tau of the start.
template <typename T>
TrainingBatch mine_correspondences(const DenseDescriptorField<T>& field_a,
                                   const DenseDescriptorField<T>& field_b, Rect box_a, Rect box_b,
                                   const MiningConfig& cfg, Rng& rng) {
  detail::require_same_dim(field_a, field_b);
  box_a.require_within(field_a.width(), field_a.height(), "mine_correspondences source");
  box_b.require_within(field_b.width(), field_b.height(), "mine_correspondences target");
  if (cfg.tau < 0.0) throw ConfigError("forward-backward tolerance must be >= 0");

  const detail::BoxDescriptors<T> da(field_a, box_a), db(field_b, box_b);
  std::vector<int> all(da.count());
  std::iota(all.begin(), all.end(), 0);
  std::vector<int> sampled;
  if (cfg.candidates >= da.count()) {
    sampled = std::move(all);
  } else {
    sampled.reserve(std::max(cfg.candidates, 0));
    std::sample(all.begin(), all.end(), std::back_inserter(sampled), std::max(cfg.candidates, 0),
                rng);
  }

  std::vector<int> forward(sampled.size());
  parallel_for(0, static_cast<int>(sampled.size()),
               [&](int n) { forward[n] = detail::nearest_row(da.row(sampled[n]), db); });
  std::vector<int> back(db.count(), -1);
  std::vector<int> needed;
  for (int j : forward)
    if (back[j] < 0) {
      back[j] = 0;
      needed.push_back(j);
    }
  parallel_for(0, static_cast<int>(needed.size()),
               [&](int n) { back[needed[n]] = detail::nearest_row(db.row(needed[n]), da); });

  TrainingBatch batch;
  const double tau2 = cfg.tau * cfg.tau;
  for (std::size_t n = 0; n < sampled.size(); ++n) {
    const int i = sampled[n], j = forward[n], r = back[j];
    const PixelPair p{da.px(i), da.py(i), db.px(j), db.py(j)};
    const double dx = da.px(r) - p.sx, dy = da.py(r) - p.sy;
    (dx * dx + dy * dy <= tau2 ? batch.positives : batch.negatives).push_back(p);
  }
  return batch;
}

// Caps positives at positive_fraction of the batch (when negatives exist),
// then caps the total at batch_cap, subsampling each side at random.
inline TrainingBatch select_batch(const TrainingBatch& mined, const LossConfig& cfg, Rng& rng) {
  cfg.validate();
  std::size_t n_pos = mined.positives.size(), n_neg = mined.negatives.size();
  if (n_pos > 0 && n_neg > 0) {
    const double ratio = cfg.positive_fraction / (1.0 - cfg.positive_fraction);
    n_pos = std::min(n_pos, std::max<std::size_t>(1, static_cast<std::size_t>(n_neg * ratio)));
    n_neg = std::min(n_neg, std::max<std::size_t>(1, static_cast<std::size_t>(n_pos / ratio)));
  }
  const std::size_t total = n_pos + n_neg, cap = static_cast<std::size_t>(cfg.batch_cap);
  if (total > cap) {
    const std::size_t keep_pos = std::min(n_pos, std::max<std::size_t>(n_pos > 0 ? 1 : 0, n_pos * cap / total));
    n_neg = std::min(n_neg, cap - keep_pos);
    n_pos = keep_pos;
  }
  TrainingBatch out;
  std::sample(mined.positives.begin(), mined.positives.end(), std::back_inserter(out.positives),
              n_pos, rng);
  std::sample(mined.negatives.begin(), mined.negatives.end(), std::back_inserter(out.negatives),
              n_neg, rng);
  return out;
}

template <typename T>
struct ContrastiveResult {
  double loss = 0.0;
  Tensor<T> grad_a;
  Tensor<T> grad_b;
};

// loss = 1/(2N) sum [ l d^2 + (1 - l) max(0, C - d^2) ] over the batch.
template <typename T>
ContrastiveResult<T> contrastive_loss(const TrainingBatch& batch,
                                      const DenseDescriptorField<T>& field_a,
                                      const DenseDescriptorField<T>& field_b, double margin) {
  if (batch.empty()) throw ConfigError("contrastive_loss: empty batch");
  if (!(margin > 0.0)) throw ConfigError("contrastive_loss: margin must be positive");
  detail::require_same_dim(field_a, field_b);
  const int L = field_a.dim();
  const double N = static_cast<double>(batch.size());
  ContrastiveResult<T> r{0.0, Tensor<T>(field_a.values.shape()), Tensor<T>(field_b.values.shape())};
  auto accumulate = [&](const PixelPair& p, bool positive) {
    if (!Rect::full(field_a.width(), field_a.height()).contains(p.sx, p.sy) ||
        !Rect::full(field_b.width(), field_b.height()).contains(p.tx, p.ty))
      throw ShapeError("contrastive_loss: sample pixel outside its field");
    double d2 = 0.0;
    for (int c = 0; c < L; ++c) {
      const double d = field_a.values(c, p.sy, p.sx) - field_b.values(c, p.ty, p.tx);
      d2 += d * d;
    }
    double scale;
    if (positive) {
      r.loss += d2 / (2.0 * N);
      scale = 1.0 / N;
    } else if (d2 < margin) {
      r.loss += (margin - d2) / (2.0 * N);
      scale = -1.0 / N;
    } else {
      return;
    }
    for (int c = 0; c < L; ++c) {
      const T g = static_cast<T>(scale * (field_a.values(c, p.sy, p.sx) - field_b.values(c, p.ty, p.tx)));
      r.grad_a(c, p.sy, p.sx) += g;
      r.grad_b(c, p.ty, p.tx) -= g;
    }
  };
  for (const auto& p : batch.positives) accumulate(p, true);
  for (const auto& p : batch.negatives) accumulate(p, false);
  return r;
}

// Mean Euclidean descriptor distance over a set of pairs (0 when empty).
template <typename T>
double mean_pair_distance(const std::vector<PixelPair>& pairs, const DenseDescriptorField<T>& a,
                          const DenseDescriptorField<T>& b) {
  if (pairs.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& p : pairs) {
    double d2 = 0.0;
    for (int c = 0; c < a.dim(); ++c) {
      const double d = a.values(c, p.sy, p.sx) - b.values(c, p.ty, p.tx);
      d2 += d * d;
    }
    sum += std::sqrt(d2);
  }
  return sum / static_cast<double>(pairs.size());
}

struct TrainConfig {
  double learning_rate = 0.1;
  double momentum = 0.9;
  bool freeze_backbone = true;
  MiningConfig mining{};
  LossConfig loss{};
};

template <typename T>
struct OptimizerState {
  ModelGradients<T> velocity;
  bool initialized = false;
};

struct PairStats {
  double loss = 0.0;
  int positives = 0;  // mined, before batch selection
  int negatives = 0;
  double mean_positive_distance = 0.0;
};

struct EpochStats {
  std::vector<PairStats> pairs;

  double mean_loss() const {
    if (pairs.empty()) return 0.0;
    double s = 0.0;
    for (const auto& p : pairs) s += p.loss;
    return s / static_cast<double>(pairs.size());
  }
  // Average over pairs that mined at least one positive.
  double mean_positive_distance() const {
    double s = 0.0;
    int n = 0;
    for (const auto& p : pairs)
      if (p.positives > 0) {
        s += p.mean_positive_distance;
        ++n;
      }
    return n > 0 ? s / n : 0.0;
  }
  long total_positives() const {
    long n = 0;
    for (const auto& p : pairs) n += p.positives;
    return n;
  }
  long total_negatives() const {
    long n = 0;
    for (const auto& p : pairs) n += p.negatives;
    return n;
  }
};

namespace detail {

template <typename T>
void momentum_step(std::vector<T>& param, std::vector<T>& vel, const std::vector<T>& grad,
                   double lr, double mu) {
  for (std::size_t i = 0; i < param.size(); ++i) {
    vel[i] = static_cast<T>(mu * vel[i] - lr * grad[i]);
    if (vel[i] != T(0)) param[i] += vel[i];
  }
}

template <typename T>
void momentum_step(T& param, T& vel, T grad, double lr, double mu) {
  vel = static_cast<T>(mu * vel - lr * grad);
  if (vel != T(0)) param += vel;
}

}  // namespace detail

// One SGD-with-momentum step. Offsets are projected back into the pattern disk.
template <typename T>
void apply_update(Model<T>& m, OptimizerState<T>& st, const ModelGradients<T>& g,
                  const TrainConfig& cfg) {
  if (!st.initialized) {
    st.velocity = ModelGradients<T>::zeros_like(m);
    st.initialized = true;
  }
  const double lr = cfg.learning_rate, mu = cfg.momentum;
  if (!cfg.freeze_backbone)
    for (std::size_t s = 0; s < m.backbone.stages.size(); ++s)
      for (std::size_t l = 0; l < m.backbone.stages[s].size(); ++l) {
        auto& p = m.backbone.stages[s][l];
        auto& v = st.velocity.backbone.stages[s][l];
        const auto& gr = g.backbone.stages[s][l];
        detail::momentum_step(p.weights, v.weights, gr.weights, lr, mu);
        detail::momentum_step(p.bias, v.bias, gr.bias, lr, mu);
      }
  for (std::size_t k = 0; k < m.patterns.levels.size(); ++k) {
    auto& p = m.patterns.levels[k];
    auto& v = st.velocity.patterns.levels[k];
    const auto& gr = g.patterns.levels[k];
    for (std::size_t i = 0; i < p.s.size(); ++i) {
      detail::momentum_step(p.s[i].x, v.s[i].x, gr.s[i].x, lr, mu);
      detail::momentum_step(p.s[i].y, v.s[i].y, gr.s[i].y, lr, mu);
      detail::momentum_step(p.t[i].x, v.t[i].x, gr.t[i].x, lr, mu);
      detail::momentum_step(p.t[i].y, v.t[i].y, gr.t[i].y, lr, mu);
    }
    detail::momentum_step(p.log_bandwidth, v.log_bandwidth, gr.log_bandwidth, lr, mu);
  }
  m.patterns.clamp_to_radius(m.css.pattern_radius);
}

// Processes every pair once: extract both fields, mine, select a batch,
// back-propagate the contrastive loss, update. Pairs whose mined batch is
// empty are recorded but skipped.
template <typename T>
EpochStats train_epoch(const std::vector<ImagePairSample<T>>& pairs, Model<T>& m,
                       OptimizerState<T>& st, const TrainConfig& cfg, Rng& rng) {
  cfg.loss.validate();
  EpochStats stats;
  for (const auto& pair : pairs) {
    pair.validate();
    const auto fa = extract_dense(pair.source, m);
    const auto fb = extract_dense(pair.target, m);
    const auto mined = mine_correspondences(fa, fb, pair.source_bbox, pair.target_bbox, cfg.mining, rng);
    PairStats ps;
    ps.positives = static_cast<int>(mined.positives.size());
    ps.negatives = static_cast<int>(mined.negatives.size());
    ps.mean_positive_distance = mean_pair_distance(mined.positives, fa, fb);
    const auto batch = select_batch(mined, cfg.loss, rng);
    if (!batch.empty()) {
      const auto loss = contrastive_loss(batch, fa, fb, cfg.loss.margin);
      ps.loss = loss.loss;
      auto grads = extract_backward(pair.source, m, loss.grad_a, cfg.freeze_backbone);
      grads += extract_backward(pair.target, m, loss.grad_b, cfg.freeze_backbone);
      apply_update(m, st, grads, cfg);
    }
    stats.pairs.push_back(ps);
  }
  return stats;
}

}  // namespace fcss
