#pragma once

// On-disk layout of a site: one directory holding manifest.json plus one
// volume grid and one mask grid per sample. Each grid file starts with a
// 32-byte little-endian header:
//
//   0  magic "FRVD"
//   4  version u16
//   6  dtype u8      (1 = f32 intensities, 2 = u8 labels)
//   7  dims 3 x u32  (D, H, W)
//  19  spacing 3 x f32 (mm)
//  31  reserved u8 (0)
//
// followed by D*H*W raw values.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedrad/core/bytes.hpp"
#include "fedrad/core/error.hpp"
#include "fedrad/dataset.hpp"

namespace fedrad {

inline constexpr std::array<char, 4> kGridMagic{'F', 'R', 'V', 'D'};
inline constexpr std::uint16_t kGridVersion = 1;
inline constexpr std::size_t kGridHeaderSize = 32;

enum class GridDtype : std::uint8_t { f32 = 1, u8 = 2 };

namespace detail {

inline void write_grid_header(ByteWriter& w, GridDtype dtype, const Dims& dims, const Spacing& spacing) {
  w.raw(std::string_view(kGridMagic.data(), kGridMagic.size()));
  w.u16(kGridVersion);
  w.u8(static_cast<std::uint8_t>(dtype));
  w.u32(dims.d);
  w.u32(dims.h);
  w.u32(dims.w);
  for (double s : spacing) w.f32(static_cast<float>(s));
  w.u8(0);
}

struct GridHeader {
  GridDtype dtype;
  Dims dims;
  Spacing spacing;
};

inline GridHeader read_grid_header(ByteReader& r, std::size_t total) {
  if (total < kGridHeaderSize) throw IoError("grid: file shorter than header");
  auto magic = r.raw(4);
  for (std::size_t i = 0; i < 4; ++i)
    if (static_cast<char>(magic[i]) != kGridMagic[i]) throw IoError("grid: bad magic");
  if (r.u16() != kGridVersion) throw IoError("grid: unsupported version");
  const auto dt = r.u8();
  if (dt != 1 && dt != 2) throw IoError("grid: unknown dtype code " + std::to_string(dt));
  GridHeader h{static_cast<GridDtype>(dt), {}, {}};
  h.dims.d = r.u32();
  h.dims.h = r.u32();
  h.dims.w = r.u32();
  for (auto& s : h.spacing) s = static_cast<double>(r.f32());
  r.u8();
  const std::size_t elem = h.dtype == GridDtype::f32 ? 4 : 1;
  // dims are untrusted; compare without overflowing
  const std::uint64_t plane = static_cast<std::uint64_t>(h.dims.d) * h.dims.h;
  const std::uint64_t row_bytes = static_cast<std::uint64_t>(h.dims.w) * elem;
  const bool matches = row_bytes == 0 ? r.remaining() == 0
                                      : (r.remaining() % row_bytes == 0 && r.remaining() / row_bytes == plane);
  if (!matches) throw IoError("grid: payload size does not match header dims");
  return h;
}

}  // namespace detail

inline std::vector<std::byte> encode_volume(const Volume& v) {
  ByteWriter w;
  detail::write_grid_header(w, GridDtype::f32, v.intensities.dims(), v.spacing);
  for (float x : v.intensities.storage()) w.f32(x);
  return w.take();
}

inline std::vector<std::byte> encode_mask(const LabelMask& m, const Spacing& spacing) {
  ByteWriter w;
  detail::write_grid_header(w, GridDtype::u8, m.dims(), spacing);
  for (auto x : m.labels.storage()) w.u8(x);
  return w.take();
}

inline Volume decode_volume(std::span<const std::byte> bytes, std::string id) {
  try {
    ByteReader r(bytes);
    const auto h = detail::read_grid_header(r, bytes.size());
    if (h.dtype != GridDtype::f32) throw IoError("grid: volume must be f32");
    std::vector<float> data(h.dims.voxels());
    for (auto& x : data) x = r.f32();
    return Volume{std::move(id), Grid3<float>(h.dims, std::move(data)), h.spacing};
  } catch (const TruncatedInput&) {
    throw IoError("grid: truncated");
  }
}

/// Decodes a mask; the spacing stored alongside it is returned through `spacing` when non-null.
inline LabelMask decode_mask(std::span<const std::byte> bytes, std::string ref_id, Spacing* spacing = nullptr) {
  try {
    ByteReader r(bytes);
    const auto h = detail::read_grid_header(r, bytes.size());
    if (h.dtype != GridDtype::u8) throw IoError("grid: mask must be u8");
    std::vector<std::uint8_t> data(h.dims.voxels());
    for (auto& x : data) x = r.u8();
    if (spacing) *spacing = h.spacing;
    return LabelMask{std::move(ref_id), Grid3<std::uint8_t>(h.dims, std::move(data))};
  } catch (const TruncatedInput&) {
    throw IoError("grid: truncated");
  }
}

inline std::vector<std::byte> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<std::byte> out(raw.size());
  std::memcpy(out.data(), raw.data(), raw.size());
  return out;
}

inline void write_file(const std::filesystem::path& p, std::span<const std::byte> bytes) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + p.string());
}

inline void write_text(const std::filesystem::path& p, std::string_view text) {
  write_file(p, std::as_bytes(std::span<const char>(text.data(), text.size())));
}

inline std::string read_text(const std::filesystem::path& p) {
  auto b = read_file(p);
  return std::string(reinterpret_cast<const char*>(b.data()), b.size());
}

inline std::string volume_file_name(const std::string& sample_id) { return sample_id + ".vol.frvd"; }
inline std::string mask_file_name(const std::string& sample_id) { return sample_id + ".seg.frvd"; }

/// Writes `ds` as a site directory. `experiment_digest` may be empty.
inline void write_site_dir(const SiteDataset& ds, const std::filesystem::path& dir, std::uint64_t seed,
                           const std::string& experiment_digest = {}) {
  std::filesystem::create_directories(dir);
  nlohmann::json samples = nlohmann::json::array();
  auto add = [&](const Sample& s, const char* split) {
    write_file(dir / volume_file_name(s.sample_id), encode_volume(s.volume));
    write_file(dir / mask_file_name(s.sample_id), encode_mask(s.mask, s.volume.spacing));
    samples.push_back({{"sample_id", s.sample_id},
                       {"split", split},
                       {"provenance", to_string(s.provenance)},
                       {"volume_ref", s.volume.id},
                       {"mask_ref", s.mask.ref_id},
                       {"volume_file", volume_file_name(s.sample_id)},
                       {"mask_file", mask_file_name(s.sample_id)}});
  };
  for (const auto& s : ds.train) add(s, "train");
  for (const auto& s : ds.test) add(s, "test");
  nlohmann::json manifest{{"site_id", ds.site_id}, {"seed", seed}, {"samples", samples}};
  if (!experiment_digest.empty()) manifest["experiment_digest"] = experiment_digest;
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

struct SiteManifest {
  std::string site_id;
  std::uint64_t seed = 0;
  std::string experiment_digest;
  nlohmann::json samples;
};

inline SiteManifest read_manifest(const std::filesystem::path& dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(dir / "manifest.json"));
    SiteManifest m;
    m.site_id = j.at("site_id").get<std::string>();
    m.seed = j.value("seed", std::uint64_t{0});
    m.experiment_digest = j.value("experiment_digest", std::string{});
    m.samples = j.at("samples");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("manifest in " + dir.string() + ": " + e.what());
  }
}

/// Loads a site directory. Samples whose grid files cannot be decoded are
/// still returned, with `payload_error` set, so validation can report them.
inline SiteDataset read_site_dir(const std::filesystem::path& dir) {
  const auto m = read_manifest(dir);
  SiteDataset ds{m.site_id, {}, {}};
  for (const auto& e : m.samples) {
    Sample s;
    try {
      s.sample_id = e.at("sample_id").get<std::string>();
      s.provenance = provenance_from_string(e.value("provenance", std::string("manual")));
    } catch (const nlohmann::json::exception& ex) {
      throw IoError("manifest entry: " + std::string(ex.what()));
    }
    s.site_id = m.site_id;
    try {
      s.volume = decode_volume(read_file(dir / e.at("volume_file").get<std::string>()),
                               e.value("volume_ref", s.sample_id));
      s.mask = decode_mask(read_file(dir / e.at("mask_file").get<std::string>()), e.value("mask_ref", s.sample_id));
    } catch (const IoError& ex) {
      s.volume = Volume{s.sample_id, {}, {}};
      s.mask = LabelMask{s.sample_id, {}};
      s.payload_error = ex.what();
    }
    (e.value("split", std::string("train")) == "test" ? ds.test : ds.train).push_back(std::move(s));
  }
  return ds;
}

}  // namespace fedrad
