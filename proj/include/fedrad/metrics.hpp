#pragma once

// Segmentation quality per (sample, class): overlap (DSC), surface agreement
// (NSD, HSD) and volume error (NAVE), plus the per-site means that feed ranking.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fedrad/core/error.hpp"
#include "fedrad/core/grid.hpp"
#include "fedrad/dataset.hpp"

namespace fedrad {

enum class Metric { DSC, NSD, HSD, NAVE };
inline constexpr std::array<Metric, 4> kAllMetrics{Metric::DSC, Metric::NSD, Metric::HSD, Metric::NAVE};
inline constexpr std::size_t kNumMetrics = kAllMetrics.size();

inline constexpr std::string_view to_string(Metric m) noexcept {
  switch (m) {
    case Metric::DSC: return "DSC";
    case Metric::NSD: return "NSD";
    case Metric::HSD: return "HSD";
    case Metric::NAVE: return "NAVE";
  }
  return "?";
}

inline Metric metric_from_string(std::string_view s) {
  for (auto m : kAllMetrics)
    if (to_string(m) == s) return m;
  throw Error("unknown metric '" + std::string(s) + "'");
}

/// Whether a larger value is better.
inline constexpr bool higher_is_better(Metric m) noexcept { return m == Metric::DSC || m == Metric::NSD; }

/// Values used when the reference contains the class but the prediction does not.
inline constexpr std::array<double, 4> kFalseNegativeValue{0.0, 0.0, 260.0, 20.0};

inline constexpr double kNsdToleranceMm = 1.0;
inline constexpr double kDistanceEps = 1e-9;

enum class HausdorffMode { max, p95 };

namespace detail {

inline void require_same_dims(const LabelMask& a, const LabelMask& b) {
  if (!(a.dims() == b.dims())) throw Error("metric: prediction and reference dims differ");
}

inline std::vector<std::uint8_t> class_indicator(const LabelMask& m, Label cls) {
  std::vector<std::uint8_t> out(m.labels.size());
  const auto c = static_cast<std::uint8_t>(cls);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = m.labels[i] == c;
  return out;
}

/// Class voxels with at least one 6-neighbour outside the class; the grid
/// exterior counts as outside.
inline std::vector<std::uint8_t> boundary(const std::vector<std::uint8_t>& in, const Dims& d) {
  std::vector<std::uint8_t> out(in.size(), 0);
  const auto at = [&](std::size_t z, std::size_t y, std::size_t x) { return in[(z * d.h + y) * d.w + x]; };
  for (std::size_t z = 0; z < d.d; ++z)
    for (std::size_t y = 0; y < d.h; ++y)
      for (std::size_t x = 0; x < d.w; ++x) {
        if (!at(z, y, x)) continue;
        const bool edge = z == 0 || y == 0 || x == 0 || z + 1 == d.d || y + 1 == d.h || x + 1 == d.w;
        out[(z * d.h + y) * d.w + x] =
            edge || !at(z - 1, y, x) || !at(z + 1, y, x) || !at(z, y - 1, x) || !at(z, y + 1, x) ||
            !at(z, y, x - 1) || !at(z, y, x + 1);
      }
  return out;
}

/// 1-D lower envelope of parabolas (Felzenszwalb & Huttenlocher) on samples
/// spaced `step` mm apart. Infinite entries are not sites.
inline void edt_1d(std::vector<double>& f, double step, std::vector<double>& out, std::vector<std::size_t>& v,
                   std::vector<double>& z) {
  const std::size_t n = f.size();
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::size_t k = 0;
  bool any = false;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    const double xq = static_cast<double>(q) * step;
    if (!any) {
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      any = true;
      continue;
    }
    double s;
    for (;;) {
      const double xv = static_cast<double>(v[k]) * step;
      s = ((f[q] + xq * xq) - (f[v[k]] + xv * xv)) / (2.0 * (xq - xv));
      if (s <= z[k] && k > 0) --k;
      else break;
    }
    if (s <= z[k]) {  // k == 0: the new parabola dominates everywhere
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = inf;
  }
  if (!any) {
    std::fill(out.begin(), out.end(), inf);
    return;
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    const double xq = static_cast<double>(q) * step;
    while (z[k + 1] < xq) ++k;
    const double dx = xq - static_cast<double>(v[k]) * step;
    out[q] = dx * dx + f[v[k]];
  }
}

/// Squared distance (mm^2) from every voxel center to the nearest set voxel.
inline std::vector<double> squared_distance_map(const std::vector<std::uint8_t>& sites, const Dims& d,
                                                const Spacing& spacing) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> g(sites.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = sites[i] ? 0.0 : inf;
  const std::array<std::size_t, 3> ext{d.d, d.h, d.w};
  const std::array<std::size_t, 3> stride{static_cast<std::size_t>(d.h) * d.w, d.w, 1};
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const std::size_t n = ext[axis];
    std::vector<double> f(n), out(n), z(n + 1);
    std::vector<std::size_t> v(n);
    const std::size_t a1 = axis == 0 ? 1 : 0, a2 = axis == 2 ? 1 : 2;
    for (std::size_t i = 0; i < ext[a1]; ++i)
      for (std::size_t j = 0; j < ext[a2]; ++j) {
        const std::size_t base = i * stride[a1] + j * stride[a2];
        for (std::size_t q = 0; q < n; ++q) f[q] = g[base + q * stride[axis]];
        edt_1d(f, spacing[axis], out, v, z);
        for (std::size_t q = 0; q < n; ++q) g[base + q * stride[axis]] = out[q];
      }
  }
  return g;
}

struct SurfacePair {
  std::vector<double> a_to_b;  // distance (mm) of each boundary voxel of A to the boundary of B
  std::vector<double> b_to_a;
};

inline SurfacePair surface_distances(const LabelMask& pred, const LabelMask& ref, Label cls, const Spacing& spacing) {
  require_same_dims(pred, ref);
  const Dims d = pred.dims();
  const auto bp = boundary(class_indicator(pred, cls), d);
  const auto br = boundary(class_indicator(ref, cls), d);
  const bool has_p = std::find(bp.begin(), bp.end(), 1) != bp.end();
  const bool has_r = std::find(br.begin(), br.end(), 1) != br.end();
  if (!has_p || !has_r) throw Error("surface metric: class absent from one of the masks");
  const auto dist_to_r = squared_distance_map(br, d, spacing);
  const auto dist_to_p = squared_distance_map(bp, d, spacing);
  SurfacePair s;
  for (std::size_t i = 0; i < bp.size(); ++i) {
    if (bp[i]) s.a_to_b.push_back(std::sqrt(dist_to_r[i]));
    if (br[i]) s.b_to_a.push_back(std::sqrt(dist_to_p[i]));
  }
  return s;
}

/// Linear-interpolation percentile (q in [0, 100]).
inline double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace detail

inline double dsc(const LabelMask& pred, const LabelMask& ref, Label cls) {
  detail::require_same_dims(pred, ref);
  const auto c = static_cast<std::uint8_t>(cls);
  std::size_t p = 0, r = 0, both = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool in_p = pred.labels[i] == c, in_r = ref.labels[i] == c;
    p += in_p;
    r += in_r;
    both += in_p && in_r;
  }
  if (p + r == 0) throw Error("dsc: class absent from both masks");
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + r);
}

inline double nsd(const LabelMask& pred, const LabelMask& ref, Label cls, const Spacing& spacing,
                  double tau_mm = kNsdToleranceMm) {
  const auto s = detail::surface_distances(pred, ref, cls, spacing);
  std::size_t within = 0;
  for (double x : s.a_to_b) within += x <= tau_mm + kDistanceEps;
  for (double x : s.b_to_a) within += x <= tau_mm + kDistanceEps;
  return static_cast<double>(within) / static_cast<double>(s.a_to_b.size() + s.b_to_a.size());
}

inline double hsd(const LabelMask& pred, const LabelMask& ref, Label cls, const Spacing& spacing,
                  HausdorffMode mode = HausdorffMode::max) {
  const auto s = detail::surface_distances(pred, ref, cls, spacing);
  if (mode == HausdorffMode::p95)
    return std::max(detail::percentile(s.a_to_b, 95.0), detail::percentile(s.b_to_a, 95.0));
  return std::max(*std::max_element(s.a_to_b.begin(), s.a_to_b.end()),
                  *std::max_element(s.b_to_a.begin(), s.b_to_a.end()));
}

/// |V_pred - V_ref| / V_ref.
inline double nave(const LabelMask& pred, const LabelMask& ref, Label cls, const Spacing& spacing) {
  detail::require_same_dims(pred, ref);
  const double vv = voxel_volume_mm3(spacing);
  const double vp = static_cast<double>(pred.count(cls)) * vv;
  const double vr = static_cast<double>(ref.count(cls)) * vv;
  if (!(vr > 0.0)) throw Error("nave: class absent from reference");
  return std::abs(vp - vr) / vr;
}

enum class RecordStatus { Scored, FNDefaulted, FPSkipped, TNSkipped };

inline constexpr std::string_view to_string(RecordStatus s) noexcept {
  switch (s) {
    case RecordStatus::Scored: return "Scored";
    case RecordStatus::FNDefaulted: return "FNDefaulted";
    case RecordStatus::FPSkipped: return "FPSkipped";
    case RecordStatus::TNSkipped: return "TNSkipped";
  }
  return "?";
}

inline RecordStatus record_status_from_string(std::string_view s) {
  for (auto st : {RecordStatus::Scored, RecordStatus::FNDefaulted, RecordStatus::FPSkipped, RecordStatus::TNSkipped})
    if (to_string(st) == s) return st;
  throw Error("unknown record status '" + std::string(s) + "'");
}

inline constexpr bool included(RecordStatus s) noexcept {
  return s == RecordStatus::Scored || s == RecordStatus::FNDefaulted;
}

struct MetricRecord {
  std::string sample_id;
  Label cls = Label::background;
  Metric metric = Metric::DSC;
  double value = std::numeric_limits<double>::quiet_NaN();  // NaN when skipped
  RecordStatus status = RecordStatus::TNSkipped;
};

struct ScoreOptions {
  double nsd_tau_mm = kNsdToleranceMm;
  HausdorffMode hausdorff = HausdorffMode::max;
};

/// Four records (one per metric) for one class of one sample.
inline std::vector<MetricRecord> score_pair(const LabelMask& pred, const LabelMask& ref, Label cls,
                                            const Spacing& spacing, const std::string& sample_id = {},
                                            const ScoreOptions& opts = {}) {
  detail::require_same_dims(pred, ref);
  const bool in_ref = ref.contains(cls), in_pred = pred.contains(cls);
  std::vector<MetricRecord> out;
  auto add = [&](Metric m, double v, RecordStatus st) { out.push_back({sample_id, cls, m, v, st}); };
  if (in_ref && in_pred) {
    add(Metric::DSC, dsc(pred, ref, cls), RecordStatus::Scored);
    add(Metric::NSD, nsd(pred, ref, cls, spacing, opts.nsd_tau_mm), RecordStatus::Scored);
    add(Metric::HSD, hsd(pred, ref, cls, spacing, opts.hausdorff), RecordStatus::Scored);
    add(Metric::NAVE, nave(pred, ref, cls, spacing), RecordStatus::Scored);
  } else if (in_ref) {
    for (std::size_t k = 0; k < kNumMetrics; ++k) add(kAllMetrics[k], kFalseNegativeValue[k], RecordStatus::FNDefaulted);
  } else {
    const auto st = in_pred ? RecordStatus::FPSkipped : RecordStatus::TNSkipped;
    for (auto m : kAllMetrics) add(m, std::numeric_limits<double>::quiet_NaN(), st);
  }
  return out;
}

/// Records for every lesion class of one test sample.
inline std::vector<MetricRecord> score_sample(const LabelMask& pred, const Sample& test, const ScoreOptions& opts = {}) {
  std::vector<MetricRecord> out;
  for (auto cls : kLesionClasses) {
    auto r = score_pair(pred, test.mask, cls, test.volume.spacing, test.sample_id, opts);
    out.insert(out.end(), r.begin(), r.end());
  }
  return out;
}

struct MetricSummary {
  std::string site_id;
  std::array<double, kNumMetrics> mean{};
  std::size_t n_test = 0;     // distinct samples seen
  std::size_t n_classes = 0;  // distinct classes seen
  std::size_t included = 0;   // (sample, class) pairs entering the means

  double operator[](Metric m) const { return mean[static_cast<std::size_t>(m)]; }
};

inline MetricSummary summarize(const std::vector<MetricRecord>& records, const std::string& site_id) {
  MetricSummary s;
  s.site_id = site_id;
  std::array<double, kNumMetrics> sum{};
  std::array<std::size_t, kNumMetrics> count{};
  std::vector<std::string> samples;
  std::vector<Label> classes;
  for (const auto& r : records) {
    if (std::find(samples.begin(), samples.end(), r.sample_id) == samples.end()) samples.push_back(r.sample_id);
    if (std::find(classes.begin(), classes.end(), r.cls) == classes.end()) classes.push_back(r.cls);
    if (!included(r.status)) continue;
    const auto k = static_cast<std::size_t>(r.metric);
    sum[k] += r.value;
    ++count[k];
  }
  s.n_test = samples.size();
  s.n_classes = classes.size();
  s.included = count[0];
  for (std::size_t k = 0; k < kNumMetrics; ++k) {
    if (count[k] == 0) throw Error("summarize: site '" + site_id + "' has no scorable records");
    s.mean[k] = sum[k] / static_cast<double>(count[k]);
  }
  return s;
}

}  // namespace fedrad
