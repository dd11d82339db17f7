#pragma once

// Resumable server snapshot, written after every aggregation.
//
//   "FRCK" | version u16 | experiment digest (32 bytes) | t u32 | seed u64 |
//   fingerprint digest (32 bytes) | w_global (u32 n + n f64) |
//   site flags (u32 n + n x (str id, u8 done)) | rng state (str)

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "fedrad/core/bytes.hpp"
#include "fedrad/core/digest.hpp"
#include "fedrad/core/error.hpp"
#include "fedrad/dataset_io.hpp"
#include "fedrad/learner.hpp"

namespace fedrad::proto {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  Digest experiment_digest{};
  std::uint32_t t = 0;  // completed rounds
  WeightVector w_global;
  Digest fingerprint_digest{};
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, bool>> site_flags;  // participated in round t
  std::string rng_state;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

class CheckpointMismatch : public Error {
 public:
  using Error::Error;
};

inline std::vector<std::byte> encode_checkpoint(const Checkpoint& c) {
  ByteWriter w;
  w.raw(std::string_view("FRCK"));
  w.u16(kCheckpointVersion);
  w.raw(std::as_bytes(std::span(c.experiment_digest)));
  w.u32(c.t);
  w.u64(c.seed);
  w.raw(std::as_bytes(std::span(c.fingerprint_digest)));
  w.f64s(c.w_global.values);
  w.u32(static_cast<std::uint32_t>(c.site_flags.size()));
  for (const auto& [site, done] : c.site_flags) {
    w.str(site);
    w.u8(done ? 1 : 0);
  }
  w.str(c.rng_state);
  return w.take();
}

inline Checkpoint decode_checkpoint(std::span<const std::byte> bytes) {
  try {
    ByteReader r(bytes);
    auto magic = r.raw(4);
    if (std::string(reinterpret_cast<const char*>(magic.data()), 4) != "FRCK") throw IoError("checkpoint: bad magic");
    if (r.u16() != kCheckpointVersion) throw IoError("checkpoint: unsupported version");
    Checkpoint c;
    auto read_digest = [&](Digest& d) {
      auto raw = r.raw(d.size());
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::to_integer<std::uint8_t>(raw[i]);
    };
    read_digest(c.experiment_digest);
    c.t = r.u32();
    c.seed = r.u64();
    read_digest(c.fingerprint_digest);
    c.w_global = WeightVector(r.f64s());
    const auto n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) {
      auto site = r.str();
      c.site_flags.emplace_back(std::move(site), r.u8() != 0);
    }
    c.rng_state = r.str();
    if (r.remaining()) throw IoError("checkpoint: trailing bytes");
    return c;
  } catch (const TruncatedInput&) {
    throw IoError("checkpoint: truncated");
  }
}

/// Writes via a temporary file and rename, so a crash mid-write leaves the
/// previous checkpoint intact.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  auto tmp = path;
  tmp += ".tmp";
  write_file(tmp, encode_checkpoint(c));
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

/// Loads a checkpoint and refuses it unless it belongs to this experiment.
inline Checkpoint resume(const std::filesystem::path& path, const Digest& experiment_digest, std::uint64_t seed) {
  auto c = load_checkpoint(path);
  if (c.experiment_digest != experiment_digest)
    throw CheckpointMismatch("checkpoint " + path.string() + " was written by experiment " +
                             to_hex(c.experiment_digest) + ", not " + to_hex(experiment_digest));
  if (c.seed != seed)
    throw CheckpointMismatch("checkpoint seed " + std::to_string(c.seed) + " differs from experiment seed " +
                             std::to_string(seed));
  return c;
}

}  // namespace fedrad::proto
