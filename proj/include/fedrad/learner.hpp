#pragma once

// Per-voxel linear softmax classifier over three hand-crafted intensity
// features. Small enough that gradients can be checked exactly and a full
// federated experiment trains in seconds.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fedrad/core/bytes.hpp"
#include "fedrad/core/error.hpp"
#include "fedrad/core/rng.hpp"
#include "fedrad/dataset.hpp"
#include "fedrad/dataset_io.hpp"

namespace fedrad {

inline constexpr std::size_t kNumFeatures = 3;                       // raw, smoothed, gradient magnitude
inline constexpr std::size_t kFeatureWidth = kNumFeatures + 1;       // + bias
inline constexpr std::size_t kWeightLength = kNumClasses * kFeatureWidth;

/// Fraction of each batch drawn from annotated (foreground) voxels when any exist.
inline constexpr double kForegroundOversample = 1.0 / 3.0;

struct FeatureConfig {
  std::array<double, kNumFeatures> shift{0.0, 0.0, 0.0};
  std::array<double, kNumFeatures> scale{1.0, 1.0, 1.0};
  double clip_lo = -std::numeric_limits<double>::infinity();
  double clip_hi = std::numeric_limits<double>::infinity();

  friend bool operator==(const FeatureConfig&, const FeatureConfig&) = default;
};

/// Flat model parameters (or a delta), laid out [class][feature], bias last.
struct WeightVector {
  std::vector<double> values;

  WeightVector() : values(kWeightLength, 0.0) {}
  explicit WeightVector(std::vector<double> v) : values(std::move(v)) {}

  std::size_t size() const noexcept { return values.size(); }
  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }
  double at(std::size_t cls, std::size_t feature) const { return values[cls * kFeatureWidth + feature]; }

  bool all_finite() const {
    return std::all_of(values.begin(), values.end(), [](double x) { return std::isfinite(x); });
  }

  friend bool operator==(const WeightVector&, const WeightVector&) = default;
};

inline WeightVector operator-(const WeightVector& a, const WeightVector& b) {
  if (a.size() != b.size()) throw Error("weight vectors differ in length");
  WeightVector out(std::vector<double>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

struct TrainConfig {
  std::uint32_t epochs = 20;
  std::uint32_t batches_per_epoch = 50;
  std::uint32_t batch_size = 64;
  double learning_rate = 0.5;
  std::uint64_t seed = 0;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

inline void check_train_config(const TrainConfig& c) {
  if (c.epochs == 0 || c.batches_per_epoch == 0 || c.batch_size == 0)
    throw ConfigError("train config: epochs, batches_per_epoch and batch_size must be positive");
  if (!(c.learning_rate >= 0.0) || !std::isfinite(c.learning_rate))
    throw ConfigError("train config: learning_rate must be finite and non-negative");
}

// ---------------------------------------------------------------------------
// features

/// Row-major voxels x kFeatureWidth matrix.
struct FeatureMap {
  std::size_t voxels = 0;
  std::vector<double> data;

  std::span<const double, kFeatureWidth> row(std::size_t i) const {
    return std::span<const double, kFeatureWidth>(data.data() + i * kFeatureWidth, kFeatureWidth);
  }
};

inline FeatureMap extract_features(const Volume& volume, const FeatureConfig& cfg) {
  for (double s : cfg.scale)
    if (!(s > 0.0) || !std::isfinite(s)) throw Error("feature config: scale must be positive and finite");

  const auto& g = volume.intensities;
  const Dims dims = g.dims();
  const std::size_t n = g.size();

  std::vector<double> clipped(n);
  for (std::size_t i = 0; i < n; ++i) clipped[i] = std::clamp(static_cast<double>(g[i]), cfg.clip_lo, cfg.clip_hi);

  auto clampi = [](std::ptrdiff_t v, std::uint32_t extent) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(extent) - 1));
  };
  auto at = [&](std::ptrdiff_t z, std::ptrdiff_t y, std::ptrdiff_t x) {
    return clipped[g.index(clampi(z, dims.d), clampi(y, dims.h), clampi(x, dims.w))];
  };

  FeatureMap fm;
  fm.voxels = n;
  fm.data.resize(n * kFeatureWidth);
  for (std::ptrdiff_t z = 0; z < static_cast<std::ptrdiff_t>(dims.d); ++z)
    for (std::ptrdiff_t y = 0; y < static_cast<std::ptrdiff_t>(dims.h); ++y)
      for (std::ptrdiff_t x = 0; x < static_cast<std::ptrdiff_t>(dims.w); ++x) {
        double box = 0.0;
        for (int dz = -1; dz <= 1; ++dz)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) box += at(z + dz, y + dy, x + dx);
        box /= 27.0;
        const double gz = 0.5 * (at(z + 1, y, x) - at(z - 1, y, x));
        const double gy = 0.5 * (at(z, y + 1, x) - at(z, y - 1, x));
        const double gx = 0.5 * (at(z, y, x + 1) - at(z, y, x - 1));
        const double grad = std::sqrt(gz * gz + gy * gy + gx * gx);

        const std::size_t i = g.index(static_cast<std::size_t>(z), static_cast<std::size_t>(y),
                                      static_cast<std::size_t>(x));
        double* row = fm.data.data() + i * kFeatureWidth;
        row[0] = (clipped[i] - cfg.shift[0]) / cfg.scale[0];
        row[1] = (box - cfg.shift[1]) / cfg.scale[1];
        row[2] = (grad - cfg.shift[2]) / cfg.scale[2];
        row[3] = 1.0;
      }
  return fm;
}

// ---------------------------------------------------------------------------
// forward / loss

using ClassProbs = std::array<double, kNumClasses>;

inline ClassProbs logits(const WeightVector& w, std::span<const double, kFeatureWidth> x) {
  ClassProbs z{};
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    double acc = 0.0;
    for (std::size_t f = 0; f < kFeatureWidth; ++f) acc += w[c * kFeatureWidth + f] * x[f];
    z[c] = acc;
  }
  return z;
}

inline ClassProbs softmax(const ClassProbs& z) {
  const double m = *std::max_element(z.begin(), z.end());
  ClassProbs p{};
  double sum = 0.0;
  for (std::size_t c = 0; c < kNumClasses; ++c) sum += (p[c] = std::exp(z[c] - m));
  for (auto& v : p) v /= sum;
  return p;
}

inline void check_weights(const WeightVector& w) {
  if (w.size() != kWeightLength)
    throw Error("weight vector has length " + std::to_string(w.size()) + ", expected " +
                std::to_string(kWeightLength));
  if (!w.all_finite()) throw Error("weight vector contains non-finite entries");
}

/// Per-voxel class probabilities, voxels x kNumClasses row-major.
inline std::vector<double> forward(const WeightVector& w, const FeatureMap& features) {
  check_weights(w);
  std::vector<double> probs(features.voxels * kNumClasses);
  for (std::size_t i = 0; i < features.voxels; ++i) {
    const auto p = softmax(logits(w, features.row(i)));
    std::copy(p.begin(), p.end(), probs.begin() + static_cast<std::ptrdiff_t>(i * kNumClasses));
  }
  return probs;
}

struct Example {
  std::array<double, kFeatureWidth> x{};
  std::uint8_t label = 0;
};

struct LossAndGrad {
  double loss = 0.0;
  WeightVector grad;
};

/// Mean cross-entropy over the batch and its gradient.
inline LossAndGrad loss_and_grad(const WeightVector& w, std::span<const Example> batch) {
  if (batch.empty()) throw Error("loss_and_grad: empty batch");
  LossAndGrad out;
  for (const auto& ex : batch) {
    if (ex.label >= kNumClasses) throw Error("loss_and_grad: label out of range");
    const auto z = logits(w, ex.x);
    const double m = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double v : z) sum += std::exp(v - m);
    const double log_norm = m + std::log(sum);
    out.loss += log_norm - z[ex.label];
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      const double residual = std::exp(z[c] - log_norm) - (c == ex.label ? 1.0 : 0.0);
      for (std::size_t f = 0; f < kFeatureWidth; ++f) out.grad[c * kFeatureWidth + f] += residual * ex.x[f];
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.loss *= inv;
  for (auto& g : out.grad.values) g *= inv;
  return out;
}

// ---------------------------------------------------------------------------
// training

/// Every labelled voxel of a training set, with an index of the foreground ones.
struct TrainingPool {
  std::vector<Example> examples;
  std::vector<std::size_t> foreground;

  bool empty() const noexcept { return examples.empty(); }
};

inline TrainingPool build_training_pool(std::span<const Sample> samples, const FeatureConfig& cfg) {
  TrainingPool pool;
  for (const auto& s : samples) {
    if (s.volume.intensities.dims() != s.mask.dims()) throw Error("training sample " + s.sample_id + ": dims mismatch");
    const auto fm = extract_features(s.volume, cfg);
    for (std::size_t i = 0; i < fm.voxels; ++i) {
      Example ex;
      const auto r = fm.row(i);
      std::copy(r.begin(), r.end(), ex.x.begin());
      ex.label = s.mask.labels[i];
      if (ex.label != 0) pool.foreground.push_back(pool.examples.size());
      pool.examples.push_back(ex);
    }
  }
  return pool;
}

/// SGD for `config.epochs` epochs of `batches_per_epoch` sampled batches.
/// `epoch_losses`, when given, receives the mean batch loss of each epoch.
inline WeightVector train_epochs(WeightVector w, const TrainingPool& pool, const TrainConfig& config,
                                 std::vector<double>* epoch_losses = nullptr) {
  check_train_config(config);
  check_weights(w);
  if (pool.empty()) throw Error("train_epochs: empty training set");
  Rng rng(config.seed);
  std::vector<Example> batch(config.batch_size);
  for (std::uint32_t e = 0; e < config.epochs; ++e) {
    double epoch_loss = 0.0;
    for (std::uint32_t b = 0; b < config.batches_per_epoch; ++b) {
      for (auto& ex : batch) {
        if (!pool.foreground.empty() && rng.uniform() < kForegroundOversample)
          ex = pool.examples[pool.foreground[rng.below(pool.foreground.size())]];
        else
          ex = pool.examples[rng.below(pool.examples.size())];
      }
      const auto lg = loss_and_grad(w, batch);
      epoch_loss += lg.loss;
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= config.learning_rate * lg.grad[i];
    }
    if (epoch_losses) epoch_losses->push_back(epoch_loss / config.batches_per_epoch);
  }
  return w;
}

// ---------------------------------------------------------------------------
// prediction

inline std::uint8_t argmax_lowest(const double* p) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < kNumClasses; ++c)
    if (p[c] > p[best]) best = c;
  return static_cast<std::uint8_t>(best);
}

inline LabelMask labels_from_probs(const std::vector<double>& probs, const Volume& volume) {
  LabelMask m{volume.id, Grid3<std::uint8_t>(volume.intensities.dims(), 0)};
  for (std::size_t i = 0; i < m.labels.size(); ++i) m.labels[i] = argmax_lowest(probs.data() + i * kNumClasses);
  return m;
}

inline LabelMask predict(const WeightVector& w, const Volume& volume, const FeatureConfig& cfg) {
  return labels_from_probs(forward(w, extract_features(volume, cfg)), volume);
}

/// One ensemble member: weights, the feature normalization they were trained
/// with, and the member's share of the probability average.
struct EnsembleMember {
  WeightVector weights;
  FeatureConfig features;
  double share = 1.0;
};

/// Weighted mean of member probability fields.
inline std::vector<double> ensemble_probs(std::span<const EnsembleMember> members, const Volume& volume) {
  if (members.empty()) throw Error("ensemble: no members");
  for (const auto& m : members) {
    check_weights(m.weights);
    if (!(m.share > 0.0)) throw Error("ensemble: member share must be positive");
  }
  std::vector<double> acc(volume.intensities.size() * kNumClasses, 0.0);
  double total = 0.0;
  const FeatureConfig* cached_cfg = nullptr;
  FeatureMap fm;
  for (const auto& m : members) {
    if (!cached_cfg || !(*cached_cfg == m.features)) {
      fm = extract_features(volume, m.features);
      cached_cfg = &m.features;
    }
    const auto p = forward(m.weights, fm);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += m.share * p[i];
    total += m.share;
  }
  for (auto& v : acc) v /= total;
  return acc;
}

inline LabelMask ensemble_predict(std::span<const EnsembleMember> members, const Volume& volume) {
  return labels_from_probs(ensemble_probs(members, volume), volume);
}

/// Equal-share ensemble of models sharing one feature configuration.
inline LabelMask ensemble_predict(std::span<const WeightVector> weights, const Volume& volume,
                                  const FeatureConfig& cfg) {
  if (weights.empty()) throw Error("ensemble: no members");
  for (const auto& w : weights)
    if (w.size() != weights.front().size()) throw Error("ensemble: members differ in length");
  std::vector<EnsembleMember> members;
  for (const auto& w : weights) members.push_back({w, cfg, 1.0});
  return ensemble_predict(members, volume);
}

// ---------------------------------------------------------------------------
// weight files: "FRWT", version u16, C u32, F u32, then C*(F+1) f64 entries

inline constexpr std::uint16_t kWeightFileVersion = 1;

inline std::vector<std::byte> encode_weights(const WeightVector& w) {
  ByteWriter out;
  out.raw(std::string_view("FRWT"));
  out.u16(kWeightFileVersion);
  out.u32(kNumClasses);
  out.u32(kNumFeatures);
  for (double v : w.values) out.f64(v);
  return out.take();
}

inline WeightVector decode_weights(std::span<const std::byte> bytes) {
  try {
    ByteReader r(bytes);
    auto magic = r.raw(4);
    if (std::string(reinterpret_cast<const char*>(magic.data()), 4) != "FRWT") throw IoError("weights: bad magic");
    if (r.u16() != kWeightFileVersion) throw IoError("weights: unsupported version");
    const auto c = r.u32(), f = r.u32();
    if (c != kNumClasses || f != kNumFeatures) throw IoError("weights: unexpected shape");
    std::vector<double> v(static_cast<std::size_t>(c) * (f + 1));
    for (auto& x : v) x = r.f64();
    if (r.remaining() != 0) throw IoError("weights: trailing bytes");
    return WeightVector(std::move(v));
  } catch (const TruncatedInput&) {
    throw IoError("weights: truncated");
  }
}

inline void save_weights(const std::filesystem::path& p, const WeightVector& w) { write_file(p, encode_weights(w)); }
inline WeightVector load_weights(const std::filesystem::path& p) { return decode_weights(read_file(p)); }

}  // namespace fedrad
