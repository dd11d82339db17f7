#pragma once

// Wire format. Every message travels in one frame:
//
//   magic "FR" | version u8 | msg_type u8 | payload_len u32 LE | payload
//
// Payload fields are little-endian; strings and weight arrays carry a u32
// element count.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "fedrad/core/bytes.hpp"
#include "fedrad/core/error.hpp"
#include "fedrad/fingerprint.hpp"
#include "fedrad/learner.hpp"

namespace fedrad::proto {

inline constexpr std::uint8_t kProtocolVersion = 1;
inline constexpr std::size_t kFrameHeaderSize = 8;
inline constexpr std::uint32_t kMaxPayload = 16u << 20;

struct Register {
  std::string site_id;
  friend bool operator==(const Register&, const Register&) = default;
};
struct FingerprintSubmit {
  DatasetFingerprint fp;
  friend bool operator==(const FingerprintSubmit&, const FingerprintSubmit&) = default;
};
struct ConfigBroadcast {
  DatasetFingerprint fp_avg;
  std::uint64_t seed = 0;
  TrainConfig train;
  friend bool operator==(const ConfigBroadcast&, const ConfigBroadcast&) = default;
};
struct RoundStart {
  std::uint32_t t = 0;
  WeightVector w_global;
  friend bool operator==(const RoundStart&, const RoundStart&) = default;
};
struct DeltaUpload {
  std::uint32_t t = 0;
  std::string site_id;
  WeightVector delta;
  friend bool operator==(const DeltaUpload&, const DeltaUpload&) = default;
};
struct CheckpointNotice {
  std::uint32_t t = 0;
  friend bool operator==(const CheckpointNotice&, const CheckpointNotice&) = default;
};
struct FinalModel {
  WeightVector w_final;
  friend bool operator==(const FinalModel&, const FinalModel&) = default;
};
struct Heartbeat {
  friend bool operator==(const Heartbeat&, const Heartbeat&) = default;
};
struct Abort {
  std::string reason;
  friend bool operator==(const Abort&, const Abort&) = default;
};

using Message = std::variant<Register, FingerprintSubmit, ConfigBroadcast, RoundStart, DeltaUpload, CheckpointNotice,
                             FinalModel, Heartbeat, Abort>;

enum class MsgType : std::uint8_t {
  register_site = 1,
  fingerprint_submit = 2,
  config_broadcast = 3,
  round_start = 4,
  delta_upload = 5,
  checkpoint_notice = 6,
  final_model = 7,
  heartbeat = 8,
  abort = 9,
};

/// Variant index i maps to msg_type i + 1.
inline MsgType type_of(const Message& m) { return static_cast<MsgType>(m.index() + 1); }

inline std::string_view type_name(const Message& m) {
  static constexpr std::string_view kNames[] = {"Register",         "FingerprintSubmit", "ConfigBroadcast",
                                                "RoundStart",       "DeltaUpload",       "CheckpointNotice",
                                                "FinalModel",       "Heartbeat",         "Abort"};
  return kNames[m.index()];
}

enum class FrameErrorCode { bad_magic, bad_version, truncated, unknown_type, malformed, oversized };

inline std::string_view to_string(FrameErrorCode c) {
  switch (c) {
    case FrameErrorCode::bad_magic: return "bad magic";
    case FrameErrorCode::bad_version: return "bad version";
    case FrameErrorCode::truncated: return "truncated";
    case FrameErrorCode::unknown_type: return "unknown message type";
    case FrameErrorCode::malformed: return "malformed payload";
    case FrameErrorCode::oversized: return "payload too large";
  }
  return "?";
}

class FrameError : public Error {
 public:
  explicit FrameError(FrameErrorCode code) : Error(std::string("frame: ") + std::string(to_string(code))), code_(code) {}
  FrameErrorCode code() const noexcept { return code_; }

 private:
  FrameErrorCode code_;
};

namespace detail {

inline void put(ByteWriter& w, const DatasetFingerprint& fp) {
  w.u64(fp.n_samples);
  w.f64(fp.intensity_mean);
  w.f64(fp.intensity_std);
  w.f64(fp.intensity_p00_5);
  w.f64(fp.intensity_p99_5);
  for (double s : fp.mean_spacing) w.f64(s);
  for (double f : fp.class_frequency) w.f64(f);
}
inline DatasetFingerprint get_fp(ByteReader& r) {
  DatasetFingerprint fp;
  fp.n_samples = r.u64();
  fp.intensity_mean = r.f64();
  fp.intensity_std = r.f64();
  fp.intensity_p00_5 = r.f64();
  fp.intensity_p99_5 = r.f64();
  for (auto& s : fp.mean_spacing) s = r.f64();
  for (auto& f : fp.class_frequency) f = r.f64();
  return fp;
}
inline void put(ByteWriter& w, const TrainConfig& c) {
  w.u32(c.epochs);
  w.u32(c.batches_per_epoch);
  w.u32(c.batch_size);
  w.f64(c.learning_rate);
  w.u64(c.seed);
}
inline TrainConfig get_train(ByteReader& r) {
  TrainConfig c;
  c.epochs = r.u32();
  c.batches_per_epoch = r.u32();
  c.batch_size = r.u32();
  c.learning_rate = r.f64();
  c.seed = r.u64();
  return c;
}

struct PayloadWriter {
  ByteWriter& w;
  void operator()(const Register& m) { w.str(m.site_id); }
  void operator()(const FingerprintSubmit& m) { put(w, m.fp); }
  void operator()(const ConfigBroadcast& m) {
    put(w, m.fp_avg);
    w.u64(m.seed);
    put(w, m.train);
  }
  void operator()(const RoundStart& m) {
    w.u32(m.t);
    w.f64s(m.w_global.values);
  }
  void operator()(const DeltaUpload& m) {
    w.u32(m.t);
    w.str(m.site_id);
    w.f64s(m.delta.values);
  }
  void operator()(const CheckpointNotice& m) { w.u32(m.t); }
  void operator()(const FinalModel& m) { w.f64s(m.w_final.values); }
  void operator()(const Heartbeat&) {}
  void operator()(const Abort& m) { w.str(m.reason); }
};

inline Message read_payload(MsgType type, ByteReader& r) {
  switch (type) {
    case MsgType::register_site: return Register{r.str()};
    case MsgType::fingerprint_submit: return FingerprintSubmit{get_fp(r)};
    case MsgType::config_broadcast: {
      ConfigBroadcast m;
      m.fp_avg = get_fp(r);
      m.seed = r.u64();
      m.train = get_train(r);
      return m;
    }
    case MsgType::round_start: {
      RoundStart m;
      m.t = r.u32();
      m.w_global = WeightVector(r.f64s());
      return m;
    }
    case MsgType::delta_upload: {
      DeltaUpload m;
      m.t = r.u32();
      m.site_id = r.str();
      m.delta = WeightVector(r.f64s());
      return m;
    }
    case MsgType::checkpoint_notice: return CheckpointNotice{r.u32()};
    case MsgType::final_model: return FinalModel{WeightVector(r.f64s())};
    case MsgType::heartbeat: return Heartbeat{};
    case MsgType::abort: return Abort{r.str()};
  }
  throw FrameError(FrameErrorCode::unknown_type);
}

}  // namespace detail

inline std::vector<std::byte> encode_frame(const Message& msg) {
  ByteWriter w;
  w.u8('F');
  w.u8('R');
  w.u8(kProtocolVersion);
  w.u8(static_cast<std::uint8_t>(type_of(msg)));
  w.u32(0);
  std::visit(detail::PayloadWriter{w}, msg);
  const auto payload = w.size() - kFrameHeaderSize;
  if (payload > kMaxPayload) throw FrameError(FrameErrorCode::oversized);
  w.patch_u32(4, static_cast<std::uint32_t>(payload));
  return w.take();
}

struct FrameHeader {
  MsgType type;
  std::uint32_t payload_len;
};

/// Validates the fixed header at the front of `buf`.
inline FrameHeader decode_header(std::span<const std::byte> buf) {
  auto byte = [&](std::size_t i) { return std::to_integer<std::uint8_t>(buf[i]); };
  if (buf.size() < 1) throw FrameError(FrameErrorCode::truncated);
  if (byte(0) != 'F') throw FrameError(FrameErrorCode::bad_magic);
  if (buf.size() < 2) throw FrameError(FrameErrorCode::truncated);
  if (byte(1) != 'R') throw FrameError(FrameErrorCode::bad_magic);
  if (buf.size() < 3) throw FrameError(FrameErrorCode::truncated);
  if (byte(2) != kProtocolVersion) throw FrameError(FrameErrorCode::bad_version);
  if (buf.size() < 4) throw FrameError(FrameErrorCode::truncated);
  if (byte(3) < 1 || byte(3) > 9) throw FrameError(FrameErrorCode::unknown_type);
  if (buf.size() < kFrameHeaderSize) throw FrameError(FrameErrorCode::truncated);
  ByteReader r(buf.subspan(4, 4));
  const auto len = r.u32();
  if (len > kMaxPayload) throw FrameError(FrameErrorCode::oversized);
  return {static_cast<MsgType>(byte(3)), len};
}

struct DecodedFrame {
  Message message;
  std::size_t consumed = 0;
};

/// Decodes the first frame of `buf`; bytes after it are left untouched.
inline DecodedFrame decode_frame(std::span<const std::byte> buf) {
  const auto h = decode_header(buf);
  if (buf.size() - kFrameHeaderSize < h.payload_len) throw FrameError(FrameErrorCode::truncated);
  ByteReader r(buf.subspan(kFrameHeaderSize, h.payload_len));
  try {
    auto msg = detail::read_payload(h.type, r);
    if (r.remaining() != 0) throw FrameError(FrameErrorCode::malformed);
    return {std::move(msg), kFrameHeaderSize + h.payload_len};
  } catch (const TruncatedInput&) {
    throw FrameError(FrameErrorCode::malformed);
  }
}

}  // namespace fedrad::proto
