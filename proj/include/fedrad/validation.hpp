#pragma once

// Data-readiness checks run on every sample before it is used for training or
// evaluation, and a corruption injector that produces each failure on demand.

#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fedrad/core/error.hpp"
#include "fedrad/core/rng.hpp"
#include "fedrad/dataset.hpp"
#include "fedrad/dataset_io.hpp"

namespace fedrad {

enum class FindingCode {
  DimsMismatch,
  LabelOutOfRange,
  NonFiniteIntensity,
  NonPositiveSpacing,
  ReferenceMismatch,
  EmptyVolume,
  HeaderCorrupt,
};

inline constexpr std::array<FindingCode, 7> kAllFindingCodes{
    FindingCode::DimsMismatch,      FindingCode::LabelOutOfRange, FindingCode::NonFiniteIntensity,
    FindingCode::NonPositiveSpacing, FindingCode::ReferenceMismatch, FindingCode::EmptyVolume,
    FindingCode::HeaderCorrupt};

inline constexpr std::string_view to_string(FindingCode c) noexcept {
  switch (c) {
    case FindingCode::DimsMismatch: return "DimsMismatch";
    case FindingCode::LabelOutOfRange: return "LabelOutOfRange";
    case FindingCode::NonFiniteIntensity: return "NonFiniteIntensity";
    case FindingCode::NonPositiveSpacing: return "NonPositiveSpacing";
    case FindingCode::ReferenceMismatch: return "ReferenceMismatch";
    case FindingCode::EmptyVolume: return "EmptyVolume";
    case FindingCode::HeaderCorrupt: return "HeaderCorrupt";
  }
  return "?";
}

struct ValidationFinding {
  std::string sample_id;
  FindingCode code;
  std::string detail;
};

inline bool has_code(const std::vector<ValidationFinding>& fs, FindingCode c) {
  for (const auto& f : fs)
    if (f.code == c) return true;
  return false;
}

/// All rule violations of one sample; empty when it is ready for use.
inline std::vector<ValidationFinding> validate_sample(const Sample& s) {
  std::vector<ValidationFinding> out;
  auto add = [&](FindingCode c, std::string detail) { out.push_back({s.sample_id, c, std::move(detail)}); };

  if (!s.payload_error.empty()) {
    add(FindingCode::HeaderCorrupt, s.payload_error);
    return out;
  }

  const auto& vol = s.volume.intensities;
  const auto& lab = s.mask.labels;
  const bool vol_ok = vol.dims().voxels() > 0 && vol.size() == vol.dims().voxels();
  if (!vol_ok) add(FindingCode::EmptyVolume, "volume has no voxels");

  if (!(vol.dims() == lab.dims()) || lab.size() != lab.dims().voxels()) {
    auto fmt = [](const Dims& d) {
      return std::to_string(d.d) + "x" + std::to_string(d.h) + "x" + std::to_string(d.w);
    };
    add(FindingCode::DimsMismatch, "volume " + fmt(vol.dims()) + " vs mask " + fmt(lab.dims()));
  }

  std::size_t bad_labels = 0;
  int first_bad = -1;
  for (auto v : lab.storage())
    if (v >= kNumClasses) {
      if (first_bad < 0) first_bad = v;
      ++bad_labels;
    }
  if (bad_labels)
    add(FindingCode::LabelOutOfRange,
        std::to_string(bad_labels) + " voxel(s) outside {0..3}, e.g. " + std::to_string(first_bad));

  std::size_t non_finite = 0;
  for (float v : vol.storage())
    if (!std::isfinite(v)) ++non_finite;
  if (non_finite) add(FindingCode::NonFiniteIntensity, std::to_string(non_finite) + " non-finite voxel(s)");

  for (int ax = 0; ax < 3; ++ax)
    if (!(s.volume.spacing[ax] > 0.0) || !std::isfinite(s.volume.spacing[ax])) {
      add(FindingCode::NonPositiveSpacing, "axis " + std::to_string(ax) + " spacing " +
                                               std::to_string(s.volume.spacing[ax]));
      break;
    }

  if (s.volume.id != s.sample_id || s.mask.ref_id != s.sample_id)
    add(FindingCode::ReferenceMismatch,
        "sample '" + s.sample_id + "' volume '" + s.volume.id + "' mask '" + s.mask.ref_id + "'");
  return out;
}

struct ValidationReport {
  std::string site_id;
  std::vector<std::pair<std::string, bool>> samples;  // (sample_id, passed), in dataset order
  std::vector<ValidationFinding> findings;
  std::map<FindingCode, std::size_t> counts;

  std::size_t failures() const {
    std::size_t n = 0;
    for (const auto& [id, ok] : samples) n += !ok;
    return n;
  }
  std::vector<std::string> excluded() const {
    std::vector<std::string> ids;
    for (const auto& [id, ok] : samples)
      if (!ok) ids.push_back(id);
    return ids;
  }
};

inline ValidationReport validate_dataset(const SiteDataset& ds) {
  ValidationReport r;
  r.site_id = ds.site_id;
  for (auto c : kAllFindingCodes) r.counts[c] = 0;
  auto visit = [&](const Sample& s) {
    auto fs = validate_sample(s);
    r.samples.emplace_back(s.sample_id, fs.empty());
    for (auto& f : fs) {
      ++r.counts[f.code];
      r.findings.push_back(std::move(f));
    }
  };
  for (const auto& s : ds.train) visit(s);
  for (const auto& s : ds.test) visit(s);
  return r;
}

inline nlohmann::json to_json(const ValidationReport& r) {
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [c, n] : r.counts) counts[std::string(to_string(c))] = n;
  nlohmann::json findings = nlohmann::json::array();
  for (const auto& f : r.findings)
    findings.push_back({{"sample_id", f.sample_id}, {"code", to_string(f.code)}, {"detail", f.detail}});
  return {{"site_id", r.site_id},
          {"n_samples", r.samples.size()},
          {"n_failed", r.failures()},
          {"counts", counts},
          {"excluded", r.excluded()},
          {"findings", findings}};
}

/// Returns a copy of `s` broken so that validate_sample reports `kind`.
inline Sample inject_corruption(Sample s, FindingCode kind, std::uint64_t seed) {
  Rng rng(seed);
  auto pick_voxel = [&](std::size_t n) -> std::size_t {
    if (n == 0) throw Error("inject_corruption: sample has no voxels");
    return static_cast<std::size_t>(rng.below(n));
  };
  switch (kind) {
    case FindingCode::DimsMismatch: {
      Dims d = s.mask.dims();
      if (d.d > 1) --d.d;
      else ++d.d;
      s.mask.labels = Grid3<std::uint8_t>(d, 0);
      return s;
    }
    case FindingCode::LabelOutOfRange:
      s.mask.labels[pick_voxel(s.mask.labels.size())] = static_cast<std::uint8_t>(rng.between(kNumClasses, 255));
      return s;
    case FindingCode::NonFiniteIntensity: {
      static constexpr std::array<float, 3> kBad{std::numeric_limits<float>::quiet_NaN(),
                                                 std::numeric_limits<float>::infinity(),
                                                 -std::numeric_limits<float>::infinity()};
      s.volume.intensities[pick_voxel(s.volume.intensities.size())] = kBad[rng.below(kBad.size())];
      return s;
    }
    case FindingCode::NonPositiveSpacing:
      s.volume.spacing[rng.below(3)] = rng.bernoulli(0.5) ? 0.0 : -rng.uniform(0.1, 5.0);
      return s;
    case FindingCode::ReferenceMismatch:
      if (rng.bernoulli(0.5)) s.mask.ref_id += "-other";
      else s.volume.id += "-other";
      return s;
    case FindingCode::EmptyVolume:
      s.volume.intensities = Grid3<float>(Dims{0, 0, 0});
      return s;
    case FindingCode::HeaderCorrupt: {
      // Damage the serialized volume and run it through the real decoder.
      auto bytes = encode_volume(s.volume);
      switch (rng.below(4)) {
        case 0: bytes[rng.below(4)] ^= std::byte{0x5a}; break;                       // magic
        case 1: bytes[4] = std::byte{0xff}; break;                                     // version
        case 2: bytes[6] = std::byte{0x07}; break;                                     // dtype
        default: bytes.resize(kGridHeaderSize + rng.below(bytes.size() - kGridHeaderSize)); break;  // truncation
      }
      try {
        (void)decode_volume(bytes, s.sample_id);
        throw Error("inject_corruption: damaged header still decoded");
      } catch (const IoError& e) {
        s.payload_error = e.what();
      }
      s.volume.intensities = {};
      s.mask.labels = {};
      return s;
    }
  }
  throw Error("inject_corruption: unsupported finding code");
}

}  // namespace fedrad
