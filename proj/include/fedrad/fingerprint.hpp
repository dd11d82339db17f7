#pragma once

// Configuration synchronization: each site summarizes its training data, the
// server averages the summaries, and every participant derives the same
// feature normalization and initial weights from that average.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedrad/core/digest.hpp"
#include "fedrad/core/error.hpp"
#include "fedrad/core/rng.hpp"
#include "fedrad/dataset.hpp"
#include "fedrad/learner.hpp"

namespace fedrad {

struct DatasetFingerprint {
  std::uint64_t n_samples = 0;
  double intensity_mean = 0.0;
  double intensity_std = 0.0;
  double intensity_p00_5 = 0.0;
  double intensity_p99_5 = 0.0;
  Spacing mean_spacing{0.0, 0.0, 0.0};
  std::array<double, kNumClasses> class_frequency{};

  friend bool operator==(const DatasetFingerprint&, const DatasetFingerprint&) = default;
};

inline constexpr double kStdFloor = 1e-6;

/// Canonical JSON: sorted keys, shortest round-trip doubles, no whitespace.
inline nlohmann::json to_json(const DatasetFingerprint& fp) {
  return {{"class_frequency", fp.class_frequency}, {"intensity_mean", fp.intensity_mean},
          {"intensity_p00_5", fp.intensity_p00_5}, {"intensity_p99_5", fp.intensity_p99_5},
          {"intensity_std", fp.intensity_std},     {"mean_spacing", fp.mean_spacing},
          {"n_samples", fp.n_samples}};
}

inline DatasetFingerprint fingerprint_from_json(const nlohmann::json& j) {
  DatasetFingerprint fp;
  fp.n_samples = j.at("n_samples").get<std::uint64_t>();
  fp.intensity_mean = j.at("intensity_mean").get<double>();
  fp.intensity_std = j.at("intensity_std").get<double>();
  fp.intensity_p00_5 = j.at("intensity_p00_5").get<double>();
  fp.intensity_p99_5 = j.at("intensity_p99_5").get<double>();
  fp.mean_spacing = j.at("mean_spacing").get<Spacing>();
  fp.class_frequency = j.at("class_frequency").get<std::array<double, kNumClasses>>();
  return fp;
}

inline std::string canonical_string(const DatasetFingerprint& fp) { return to_json(fp).dump(); }
inline Digest fingerprint_digest(const DatasetFingerprint& fp) { return sha256(canonical_string(fp)); }

/// Smallest value whose empirical CDF reaches q. Depends only on the value
/// distribution, so duplicating the data leaves it unchanged.
inline double lower_quantile(const std::vector<double>& sorted, double q) {
  const auto n = static_cast<double>(sorted.size());
  auto rank = static_cast<std::ptrdiff_t>(std::ceil(q * n)) - 1;
  rank = std::clamp<std::ptrdiff_t>(rank, 0, static_cast<std::ptrdiff_t>(sorted.size()) - 1);
  return sorted[static_cast<std::size_t>(rank)];
}

inline DatasetFingerprint compute_fingerprint(std::span<const Sample> train) {
  if (train.empty()) throw Error("compute_fingerprint: empty training set");
  DatasetFingerprint fp;
  fp.n_samples = train.size();

  std::vector<double> values;
  std::array<std::uint64_t, kNumClasses> class_voxels{};
  for (const auto& s : train) {
    for (float v : s.volume.intensities.storage()) values.push_back(v);
    for (auto l : s.mask.labels.storage())
      if (l < kNumClasses) ++class_voxels[l];
    for (int ax = 0; ax < 3; ++ax) fp.mean_spacing[ax] += s.volume.spacing[ax];
  }
  if (values.empty()) throw Error("compute_fingerprint: training set has no voxels");
  for (auto& s : fp.mean_spacing) s /= static_cast<double>(train.size());

  double sum = 0.0;
  for (double v : values) sum += v;
  fp.intensity_mean = sum / static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - fp.intensity_mean) * (v - fp.intensity_mean);
  fp.intensity_std = std::sqrt(ss / static_cast<double>(values.size()));

  std::sort(values.begin(), values.end());
  fp.intensity_p00_5 = lower_quantile(values, 0.005);
  fp.intensity_p99_5 = lower_quantile(values, 0.995);

  std::uint64_t total = 0;
  for (auto c : class_voxels) total += c;
  for (int c = 0; c < kNumClasses; ++c)
    fp.class_frequency[c] = total ? static_cast<double>(class_voxels[c]) / static_cast<double>(total) : 0.0;
  return fp;
}

/// Unweighted field-wise mean; n_samples is summed. Inputs are put in a
/// canonical order first so the floating-point result does not depend on
/// arrival order. Means are accumulated as offsets from the first input, which
/// makes the average of identical fingerprints exact.
inline DatasetFingerprint average_fingerprints(std::span<const DatasetFingerprint> fps) {
  if (fps.empty()) throw Error("average_fingerprints: no fingerprints");
  std::vector<std::pair<std::string, const DatasetFingerprint*>> ordered;
  for (const auto& fp : fps) ordered.emplace_back(canonical_string(fp), &fp);
  std::sort(ordered.begin(), ordered.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  const auto n = static_cast<double>(fps.size());
  const DatasetFingerprint& base = *ordered.front().second;
  auto mean_of = [&](auto field) {
    double off = 0.0;
    for (const auto& [key, fp] : ordered) off += field(*fp) - field(base);
    return field(base) + off / n;
  };

  DatasetFingerprint avg;
  for (const auto& [key, fp] : ordered) avg.n_samples += fp->n_samples;
  avg.intensity_mean = mean_of([](const DatasetFingerprint& f) { return f.intensity_mean; });
  avg.intensity_std = mean_of([](const DatasetFingerprint& f) { return f.intensity_std; });
  avg.intensity_p00_5 = mean_of([](const DatasetFingerprint& f) { return f.intensity_p00_5; });
  avg.intensity_p99_5 = mean_of([](const DatasetFingerprint& f) { return f.intensity_p99_5; });
  for (int ax = 0; ax < 3; ++ax)
    avg.mean_spacing[ax] = mean_of([ax](const DatasetFingerprint& f) { return f.mean_spacing[ax]; });
  for (int c = 0; c < kNumClasses; ++c)
    avg.class_frequency[c] = mean_of([c](const DatasetFingerprint& f) { return f.class_frequency[c]; });
  return avg;
}

/// Everything a participant needs to start training, derived identically everywhere.
struct ModelSetup {
  FeatureConfig features;
  TrainConfig train;
  WeightVector init;
  Digest fingerprint_digest{};
};

inline constexpr double kInitStd = 0.01;

inline ModelSetup derive_config(const DatasetFingerprint& fp, std::uint64_t experiment_seed,
                                const TrainConfig& base = {}) {
  ModelSetup setup;
  const double scale = std::max(fp.intensity_std, kStdFloor);
  setup.features.shift = {fp.intensity_mean, fp.intensity_mean, 0.0};
  setup.features.scale = {scale, scale, scale};
  setup.features.clip_lo = fp.intensity_p00_5;
  setup.features.clip_hi = fp.intensity_p99_5;

  setup.train = base;
  setup.train.seed = experiment_seed;

  setup.fingerprint_digest = fingerprint_digest(fp);
  std::uint64_t key = 0;
  for (int i = 0; i < 8; ++i) key |= static_cast<std::uint64_t>(setup.fingerprint_digest[i]) << (8 * i);
  Rng rng(derive_seed(experiment_seed, key));
  for (auto& v : setup.init.values) v = rng.normal(0.0, kInitStd);
  return setup;
}

inline nlohmann::json to_json(const FeatureConfig& f) {
  return {{"shift", f.shift}, {"scale", f.scale}, {"clip_lo", f.clip_lo}, {"clip_hi", f.clip_hi}};
}

inline FeatureConfig feature_config_from_json(const nlohmann::json& j) {
  FeatureConfig f;
  f.shift = j.at("shift").get<std::array<double, kNumFeatures>>();
  f.scale = j.at("scale").get<std::array<double, kNumFeatures>>();
  f.clip_lo = j.at("clip_lo").get<double>();
  f.clip_hi = j.at("clip_hi").get<double>();
  return f;
}

}  // namespace fedrad
