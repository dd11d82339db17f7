#pragma once

// Synthetic multi-site CT-like datasets: generation, stratified splitting,
// connected-component analysis and per-site descriptive statistics.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fedrad/core/error.hpp"
#include "fedrad/core/grid.hpp"
#include "fedrad/core/rng.hpp"

namespace fedrad {

enum class Label : std::uint8_t { background = 0, cons = 1, ggo = 2, pe = 3 };

inline constexpr int kNumClasses = 4;
inline constexpr std::array<Label, 3> kLesionClasses{Label::cons, Label::ggo, Label::pe};

inline constexpr std::string_view class_name(Label c) noexcept {
  switch (c) {
    case Label::background: return "background";
    case Label::cons: return "Cons";
    case Label::ggo: return "GGO";
    case Label::pe: return "PE";
  }
  return "?";
}

inline constexpr int to_int(Label c) noexcept { return static_cast<int>(c); }

struct Volume {
  std::string id;
  Grid3<float> intensities;
  Spacing spacing{1.0, 1.0, 1.0};

  friend bool operator==(const Volume&, const Volume&) = default;
};

struct LabelMask {
  std::string ref_id;  // sample the annotation claims to belong to
  Grid3<std::uint8_t> labels;

  const Dims& dims() const noexcept { return labels.dims(); }
  bool contains(Label c) const {
    const auto v = static_cast<std::uint8_t>(c);
    return std::find(labels.storage().begin(), labels.storage().end(), v) != labels.storage().end();
  }
  std::size_t count(Label c) const {
    const auto v = static_cast<std::uint8_t>(c);
    return static_cast<std::size_t>(std::count(labels.storage().begin(), labels.storage().end(), v));
  }

  friend bool operator==(const LabelMask&, const LabelMask&) = default;
};

enum class Provenance { manual, auto_preprocessed };

inline constexpr std::string_view to_string(Provenance p) noexcept {
  return p == Provenance::manual ? "manual" : "auto_preprocessed";
}
inline Provenance provenance_from_string(std::string_view s) {
  if (s == "manual") return Provenance::manual;
  if (s == "auto_preprocessed") return Provenance::auto_preprocessed;
  throw IoError("unknown provenance '" + std::string(s) + "'");
}

struct Sample {
  std::string sample_id;
  Volume volume;
  LabelMask mask;
  std::string site_id;
  Provenance provenance = Provenance::manual;
  // Set by the loader when the on-disk payload could not be decoded; the
  // grids are then empty.
  std::string payload_error;

  friend bool operator==(const Sample&, const Sample&) = default;
};

enum class CcRegime { few_large, many_small };

inline constexpr std::string_view to_string(CcRegime r) noexcept {
  return r == CcRegime::few_large ? "few_large" : "many_small";
}
inline CcRegime cc_regime_from_string(std::string_view s) {
  if (s == "few_large") return CcRegime::few_large;
  if (s == "many_small") return CcRegime::many_small;
  throw ConfigError("unknown cc_count_regime '" + std::string(s) + "'");
}

struct SiteProfile {
  std::string site_id;
  std::uint32_t n_samples = 10;
  Dims grid_dims{24, 24, 24};
  Spacing spacing{1.0, 1.0, 1.0};
  double intensity_mean = -750.0;  // background (lung parenchyma) level, HU-like
  double intensity_std = 80.0;
  std::array<double, kNumClasses> class_prevalence{0.0, 0.5, 0.5, 0.2};  // [0] unused
  double lesion_volume_scale = 1.0;
  CcRegime cc_count_regime = CcRegime::few_large;
  std::uint64_t seed = 0;
};

struct SiteDataset {
  std::string site_id;
  std::vector<Sample> train;
  std::vector<Sample> test;

  std::size_t size() const noexcept { return train.size() + test.size(); }
};

/// Intensity offset of each class above the site's background level.
inline constexpr std::array<double, kNumClasses> kClassContrast{0.0, 700.0, 350.0, 950.0};

inline constexpr double kDefaultTestFraction = 0.2;

// ---------------------------------------------------------------------------
// split

/// Indices chosen for the test set, plus the complement, both ascending.
struct SplitPlan {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// round-half-up
inline std::size_t round_count(double x) { return static_cast<std::size_t>(std::floor(x + 0.5 + 1e-9)); }

/// Stratified split over index space. `in_stratum[i]` marks samples holding the
/// stratification class; the stratum and its complement are split independently.
inline SplitPlan split_indices(const std::vector<bool>& in_stratum, double test_fraction, std::uint64_t seed) {
  const std::size_t n = in_stratum.size();
  if (n < 2) throw Error("split: need at least 2 samples");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw Error("split: test_fraction must lie in (0, 1)");

  std::vector<std::size_t> stratum, rest;
  for (std::size_t i = 0; i < n; ++i) (in_stratum[i] ? stratum : rest).push_back(i);

  // Both sides keep at least one sample.
  const std::size_t total = std::clamp<std::size_t>(round_count(test_fraction * static_cast<double>(n)), 1, n - 1);
  std::size_t from_stratum = std::min(round_count(test_fraction * static_cast<double>(stratum.size())), total);
  std::size_t from_rest = total - from_stratum;
  if (from_rest > rest.size()) {
    from_rest = rest.size();
    from_stratum = total - from_rest;
  }

  Rng rng(seed);
  rng.shuffle(stratum.begin(), stratum.end());
  rng.shuffle(rest.begin(), rest.end());

  SplitPlan plan;
  std::vector<bool> is_test(n, false);
  for (std::size_t k = 0; k < from_stratum; ++k) is_test[stratum[k]] = true;
  for (std::size_t k = 0; k < from_rest; ++k) is_test[rest[k]] = true;
  for (std::size_t i = 0; i < n; ++i) (is_test[i] ? plan.test : plan.train).push_back(i);
  return plan;
}

inline std::pair<std::vector<Sample>, std::vector<Sample>> split(std::vector<Sample> samples, double test_fraction,
                                                                 Label stratify_class, std::uint64_t seed) {
  std::vector<bool> in_stratum(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) in_stratum[i] = samples[i].mask.contains(stratify_class);
  const auto plan = split_indices(in_stratum, test_fraction, seed);

  std::pair<std::vector<Sample>, std::vector<Sample>> out;
  for (auto i : plan.train) out.first.push_back(std::move(samples[i]));
  for (auto i : plan.test) out.second.push_back(std::move(samples[i]));
  return out;
}

// ---------------------------------------------------------------------------
// generation

namespace detail {

struct Box {
  std::array<int, 3> lo, hi;  // inclusive
};

inline bool separated(const Box& a, const Box& b) {
  // At least one clear voxel between the boxes along some axis, so lesions
  // never touch under 26-connectivity.
  for (int ax = 0; ax < 3; ++ax)
    if (a.hi[ax] + 1 < b.lo[ax] || b.hi[ax] + 1 < a.lo[ax]) return true;
  return false;
}

/// Paints axis-aligned ellipsoids of one class into the mask without touching
/// previously placed blobs. Returns the number actually placed.
inline int place_blobs(Grid3<std::uint8_t>& labels, std::vector<Box>& placed, Label cls, int count, double r_lo,
                       double r_hi, Rng& rng) {
  const Dims dims = labels.dims();
  int done = 0;
  for (int b = 0; b < count; ++b) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      std::array<double, 3> radius{};
      std::array<int, 3> half{};
      for (int ax = 0; ax < 3; ++ax) {
        radius[ax] = rng.uniform(r_lo, r_hi);
        half[ax] = static_cast<int>(std::floor(radius[ax]));
      }
      Box box{};
      bool fits = true;
      std::array<int, 3> centre{};
      for (int ax = 0; ax < 3; ++ax) {
        const int extent = static_cast<int>(dims[ax]);
        const int lo = 1 + half[ax], hi = extent - 2 - half[ax];
        if (lo > hi) {
          fits = false;
          break;
        }
        centre[ax] = static_cast<int>(rng.between(lo, hi));
        box.lo[ax] = centre[ax] - half[ax];
        box.hi[ax] = centre[ax] + half[ax];
      }
      if (!fits) continue;
      if (!std::all_of(placed.begin(), placed.end(), [&](const Box& o) { return separated(box, o); })) continue;

      for (int z = box.lo[0]; z <= box.hi[0]; ++z)
        for (int y = box.lo[1]; y <= box.hi[1]; ++y)
          for (int x = box.lo[2]; x <= box.hi[2]; ++x) {
            const double dz = (z - centre[0]) / radius[0];
            const double dy = (y - centre[1]) / radius[1];
            const double dx = (x - centre[2]) / radius[2];
            if (dz * dz + dy * dy + dx * dx <= 1.0)
              labels(static_cast<std::size_t>(z), static_cast<std::size_t>(y), static_cast<std::size_t>(x)) =
                  static_cast<std::uint8_t>(cls);
          }
      placed.push_back(box);
      ++done;
      break;
    }
  }
  return done;
}

}  // namespace detail

inline void check_profile(const SiteProfile& p) {
  if (p.site_id.empty()) throw ConfigError("profile: empty site_id");
  if (p.n_samples < 2) throw ConfigError("profile '" + p.site_id + "': n_samples must be >= 2");
  if (p.grid_dims.d < 8 || p.grid_dims.h < 8 || p.grid_dims.w < 8)
    throw ConfigError("profile '" + p.site_id + "': grid_dims components must be >= 8 to place lesions");
  for (double s : p.spacing)
    if (!(s > 0.0) || !std::isfinite(s)) throw ConfigError("profile '" + p.site_id + "': spacing must be > 0");
  for (int c = 1; c < kNumClasses; ++c)
    if (!(p.class_prevalence[c] >= 0.0 && p.class_prevalence[c] <= 1.0))
      throw ConfigError("profile '" + p.site_id + "': class prevalence outside [0, 1]");
  if (!(p.intensity_std >= 0.0) || !std::isfinite(p.intensity_mean))
    throw ConfigError("profile '" + p.site_id + "': bad intensity parameters");
  if (!(p.lesion_volume_scale > 0.0)) throw ConfigError("profile '" + p.site_id + "': lesion_volume_scale must be > 0");
}

inline std::string sample_name(const std::string& site, std::size_t k) {
  std::string n = std::to_string(k);
  if (n.size() < 3) n.insert(0, 3 - n.size(), '0');
  return site + "-" + n;
}

/// One synthetic sample; sample k of a profile always draws from the same stream.
inline Sample generate_sample(const SiteProfile& p, std::size_t k) {
  Rng rng(derive_seed(p.seed, k + 1));
  Sample s;
  s.sample_id = sample_name(p.site_id, k);
  s.site_id = p.site_id;
  s.provenance = p.cc_count_regime == CcRegime::few_large ? Provenance::manual : Provenance::auto_preprocessed;

  s.mask.ref_id = s.sample_id;
  s.mask.labels = Grid3<std::uint8_t>(p.grid_dims, 0);

  std::array<bool, kNumClasses> present{};
  for (auto c : kLesionClasses) present[to_int(c)] = rng.bernoulli(p.class_prevalence[to_int(c)]);

  std::vector<detail::Box> placed;
  for (auto c : kLesionClasses) {
    if (!present[to_int(c)]) continue;
    if (p.cc_count_regime == CcRegime::few_large) {
      const int n = static_cast<int>(rng.between(1, 3));
      detail::place_blobs(s.mask.labels, placed, c, n, 1.5 * p.lesion_volume_scale, 3.5 * p.lesion_volume_scale, rng);
    } else {
      const int n = static_cast<int>(rng.between(5, 20));
      detail::place_blobs(s.mask.labels, placed, c, n, 0.6 * p.lesion_volume_scale, 1.4 * p.lesion_volume_scale, rng);
    }
  }

  s.volume.id = s.sample_id;
  // stored as f32 on disk
  for (int ax = 0; ax < 3; ++ax) s.volume.spacing[ax] = static_cast<double>(static_cast<float>(p.spacing[ax]));
  s.volume.intensities = Grid3<float>(p.grid_dims, 0.0f);
  const auto& lab = s.mask.labels.storage();
  auto& vox = s.volume.intensities.storage();
  for (std::size_t i = 0; i < vox.size(); ++i)
    vox[i] = static_cast<float>(rng.normal(p.intensity_mean + kClassContrast[lab[i]], p.intensity_std));
  return s;
}

inline SiteDataset generate_site_dataset(const SiteProfile& profile, double test_fraction = kDefaultTestFraction) {
  check_profile(profile);
  std::vector<Sample> samples;
  samples.reserve(profile.n_samples);
  for (std::size_t k = 0; k < profile.n_samples; ++k) samples.push_back(generate_sample(profile, k));
  auto [train, test] = split(std::move(samples), test_fraction, Label::pe, derive_seed(profile.seed, 0));
  return SiteDataset{profile.site_id, std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// connected components

struct Component {
  std::size_t voxels = 0;
  double volume_ml = 0.0;
};

/// Maximal 26-connected components of `cls`, in scan order of their first voxel.
inline std::vector<Component> connected_components(const LabelMask& mask, Label cls, const Spacing& spacing) {
  const auto& g = mask.labels;
  const Dims dims = g.dims();
  const auto target = static_cast<std::uint8_t>(cls);
  const std::size_t n = g.size();

  // Two-pass labelling with union-find over the 13 already-visited neighbours.
  std::vector<std::size_t> parent(n, SIZE_MAX);
  auto find = [&](std::size_t a) {
    while (parent[a] != a) {
      parent[a] = parent[parent[a]];
      a = parent[a];
    }
    return a;
  };
  auto unite = [&](std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (b < a) std::swap(a, b);
    parent[b] = a;
  };

  for (std::size_t z = 0; z < dims.d; ++z)
    for (std::size_t y = 0; y < dims.h; ++y)
      for (std::size_t x = 0; x < dims.w; ++x) {
        const std::size_t i = g.index(z, y, x);
        if (g[i] != target) continue;
        parent[i] = i;
        for (int dz = -1; dz <= 0; ++dz)
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              // previously scanned half of the neighbourhood only
              if (dz == 0 && (dy > 0 || (dy == 0 && dx >= 0))) continue;
              const auto nz = static_cast<std::ptrdiff_t>(z) + dz;
              const auto ny = static_cast<std::ptrdiff_t>(y) + dy;
              const auto nx = static_cast<std::ptrdiff_t>(x) + dx;
              if (nz < 0 || ny < 0 || nx < 0 || ny >= static_cast<std::ptrdiff_t>(dims.h) ||
                  nx >= static_cast<std::ptrdiff_t>(dims.w))
                continue;
              const std::size_t j = g.index(static_cast<std::size_t>(nz), static_cast<std::size_t>(ny),
                                            static_cast<std::size_t>(nx));
              if (g[j] == target) unite(i, j);
            }
      }

  std::vector<Component> out;
  std::vector<std::size_t> slot(n, SIZE_MAX);
  const double ml_per_voxel = voxel_volume_mm3(spacing) / 1000.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (parent[i] == SIZE_MAX) continue;
    const std::size_t root = find(i);
    if (slot[root] == SIZE_MAX) {
      slot[root] = out.size();
      out.push_back({});
    }
    ++out[slot[root]].voxels;
  }
  for (auto& c : out) c.volume_ml = static_cast<double>(c.voxels) * ml_per_voxel;
  return out;
}

// ---------------------------------------------------------------------------
// descriptive statistics

struct Summary {
  std::size_t count = 0;
  double min = 0.0, max = 0.0, mean = 0.0, median = 0.0;
};

inline Summary summarize_values(std::vector<double> v) {
  Summary s;
  s.count = v.size();
  if (v.empty()) return s;
  std::sort(v.begin(), v.end());
  s.min = v.front();
  s.max = v.back();
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  const std::size_t m = v.size() / 2;
  s.median = v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  return s;
}

struct ClassCharacteristics {
  Label label = Label::cons;
  std::size_t samples_with_class = 0;
  std::vector<double> volume_ml;  // per sample containing the class
  Summary volume_summary;
  std::vector<double> component_counts;  // per sample containing the class
  Summary component_summary;
};

struct DataCharacteristics {
  std::string site_id;
  std::size_t n_samples = 0;
  std::vector<double> voxel_volume_mm3;  // per sample
  Summary voxel_volume_summary;
  std::vector<double> histogram_edges;  // fixed, shared by all sites
  std::vector<double> histogram;        // relative mass per bin, sums to 1
  std::array<ClassCharacteristics, 3> classes;
};

/// Fixed HU bin edges, -1100..1100 in steps of 50; out-of-range values land in the edge bins.
inline std::vector<double> histogram_edges() {
  std::vector<double> e;
  for (int v = -1100; v <= 1100; v += 50) e.push_back(v);
  return e;
}

inline DataCharacteristics site_statistics(const SiteDataset& ds) {
  if (ds.size() == 0) throw Error("site_statistics: empty dataset");
  DataCharacteristics out;
  out.site_id = ds.site_id;
  out.histogram_edges = histogram_edges();
  const std::size_t bins = out.histogram_edges.size() - 1;
  std::vector<std::uint64_t> counts(bins, 0);
  std::uint64_t total = 0;
  for (std::size_t k = 0; k < 3; ++k) out.classes[k].label = kLesionClasses[k];

  auto visit = [&](const Sample& s) {
    ++out.n_samples;
    out.voxel_volume_mm3.push_back(voxel_volume_mm3(s.volume.spacing));
    const double lo = out.histogram_edges.front(), width = 50.0;
    for (float v : s.volume.intensities.storage()) {
      auto b = static_cast<std::ptrdiff_t>(std::floor((static_cast<double>(v) - lo) / width));
      b = std::clamp<std::ptrdiff_t>(b, 0, static_cast<std::ptrdiff_t>(bins) - 1);
      ++counts[static_cast<std::size_t>(b)];
      ++total;
    }
    for (std::size_t k = 0; k < 3; ++k) {
      auto& cc = out.classes[k];
      const auto n_vox = s.mask.count(cc.label);
      if (n_vox == 0) continue;
      ++cc.samples_with_class;
      cc.volume_ml.push_back(static_cast<double>(n_vox) * voxel_volume_mm3(s.volume.spacing) / 1000.0);
      cc.component_counts.push_back(
          static_cast<double>(connected_components(s.mask, cc.label, s.volume.spacing).size()));
    }
  };
  for (const auto& s : ds.train) visit(s);
  for (const auto& s : ds.test) visit(s);

  out.histogram.resize(bins);
  for (std::size_t b = 0; b < bins; ++b)
    out.histogram[b] = total ? static_cast<double>(counts[b]) / static_cast<double>(total) : 0.0;
  out.voxel_volume_summary = summarize_values(out.voxel_volume_mm3);
  for (auto& cc : out.classes) {
    cc.volume_summary = summarize_values(cc.volume_ml);
    cc.component_summary = summarize_values(cc.component_counts);
  }
  return out;
}

}  // namespace fedrad
