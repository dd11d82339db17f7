#pragma once

// Central server: a transport-agnostic coordinator that owns all round state,
// and a driver loop that feeds it messages and deadlines from a transport.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fedrad/core/digest.hpp"
#include "fedrad/core/error.hpp"
#include "fedrad/core/log.hpp"
#include "fedrad/core/rng.hpp"
#include "fedrad/fedproto/aggregate.hpp"
#include "fedrad/fedproto/checkpoint.hpp"
#include "fedrad/fedproto/messages.hpp"
#include "fedrad/fedproto/transport.hpp"
#include "fedrad/fingerprint.hpp"

namespace fedrad::proto {

struct ServerConfig {
  std::vector<std::string> expected_sites;
  std::uint64_t seed = 0;
  TrainConfig train;
  std::uint32_t rounds = 1;
  AggregationMode mode = AggregationMode::strict;
  double join_timeout_s = 60.0;
  double round_timeout_s = 60.0;
  Digest experiment_digest{};
  std::filesystem::path checkpoint_path;  // empty: keep checkpoints in memory only
  std::optional<std::uint32_t> halt_after_round;  // stop without notice, as if killed
};

enum class RunStatus { completed, aborted, halted };

inline std::string_view to_string(RunStatus s) {
  switch (s) {
    case RunStatus::completed: return "completed";
    case RunStatus::aborted: return "aborted";
    case RunStatus::halted: return "halted";
  }
  return "?";
}

struct RoundLog {
  std::uint32_t t = 0;
  std::vector<std::string> responders;  // ascending
  std::vector<std::string> excluded;
};

struct ServerResult {
  RunStatus status = RunStatus::aborted;
  WeightVector weights;
  std::uint32_t rounds_completed = 0;
  std::string reason;
  std::vector<RoundLog> rounds;
  std::optional<Checkpoint> last_checkpoint;
  std::optional<FeatureConfig> features;  // derived from the averaged fingerprint, once known
};

/// A message for one site, or for every connected site when `to` is empty.
struct Outbound {
  std::optional<std::string> to;
  Message msg;
};

inline void check_server_config(const ServerConfig& c) {
  if (c.expected_sites.empty()) throw ConfigError("server: no sites expected");
  std::set<std::string> ids(c.expected_sites.begin(), c.expected_sites.end());
  if (ids.size() != c.expected_sites.size()) throw ConfigError("server: duplicate site id");
  if (!(c.join_timeout_s > 0) || !(c.round_timeout_s > 0)) throw ConfigError("server: timeouts must be positive");
  check_train_config(c.train);
}

class ServerCoordinator {
 public:
  enum class Phase { joining, training, done };

  explicit ServerCoordinator(ServerConfig cfg, std::optional<Checkpoint> resume_from = {})
      : cfg_(std::move(cfg)), rng_(cfg_.seed), resume_(std::move(resume_from)) {
    check_server_config(cfg_);
    active_.insert(cfg_.expected_sites.begin(), cfg_.expected_sites.end());
    if (resume_) {
      if (resume_->experiment_digest != cfg_.experiment_digest || resume_->seed != cfg_.seed)
        throw CheckpointMismatch("checkpoint belongs to a different experiment");
      completed_ = resume_->t;
      w_ = resume_->w_global;
      result_.last_checkpoint = resume_;
      for (const auto& [site, done] : resume_->site_flags)
        if (done) last_responders_.push_back(site);
    }
  }

  Phase phase() const { return phase_; }
  bool finished() const { return phase_ == Phase::done; }
  /// Changes whenever a new waiting period starts; the driver re-arms its deadline on change.
  std::uint64_t epoch() const { return epoch_; }
  double timeout() const { return phase_ == Phase::joining ? cfg_.join_timeout_s : cfg_.round_timeout_s; }
  std::uint32_t current_round() const { return completed_ + 1; }
  const ServerResult& result() const { return result_; }

  /// `from` is the site the sending connection registered as.
  std::vector<Outbound> on_message(const std::string& from, const Message& msg) {
    std::vector<Outbound> out;
    if (finished()) return out;
    if (!active_.count(from)) {
      log().warn("server: ignoring {} from unexpected site '{}'", type_name(msg), from);
      return out;
    }
    if (const auto* m = std::get_if<FingerprintSubmit>(&msg)) on_fingerprint(from, *m, out);
    else if (const auto* m = std::get_if<DeltaUpload>(&msg)) on_delta(from, *m, out);
    else if (const auto* m = std::get_if<Abort>(&msg)) on_client_abort(from, *m, out);
    else if (std::holds_alternative<Register>(msg) || std::holds_alternative<Heartbeat>(msg)) {
    } else {
      log().warn("server: unexpected {} from '{}'", type_name(msg), from);
    }
    return out;
  }

  std::vector<Outbound> on_deadline() {
    std::vector<Outbound> out;
    if (finished()) return out;
    if (phase_ == Phase::joining) {
      std::vector<std::string> missing;
      for (const auto& s : active_)
        if (!fingerprints_.count(s)) missing.push_back(s);
      if (cfg_.mode == AggregationMode::tolerant && !fingerprints_.empty()) {
        for (const auto& s : missing) {
          log().warn("server: site '{}' did not join in time; excluded", s);
          active_.erase(s);
        }
        start_training(out);
      } else {
        abort(out, "join timeout: " + join(missing) + " missing");
      }
      return out;
    }
    std::vector<std::string> missing;
    for (const auto& s : active_)
      if (!received_.count(s)) missing.push_back(s);
    if (cfg_.mode == AggregationMode::tolerant && !received_.empty()) {
      log().warn("server: round {} aggregated without {}", current_round(), join(missing));
      finish_round(out, missing);
    } else {
      abort(out, "round " + std::to_string(current_round()) + " timeout: " + join(missing) + " missing");
    }
    return out;
  }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ",") + x;
    return s.empty() ? "none" : s;
  }

  void on_fingerprint(const std::string& from, const FingerprintSubmit& m, std::vector<Outbound>& out) {
    if (phase_ == Phase::joining) {
      fingerprints_[from] = m.fp;
      if (fingerprints_.size() == active_.size()) start_training(out);
      return;
    }
    // A site reconnecting mid-experiment: resend the config and, unless its
    // delta is already in, the open round.
    out.push_back({from, *config_});
    if (!received_.count(from)) out.push_back({from, RoundStart{current_round(), w_}});
  }

  void start_training(std::vector<Outbound>& out) {
    std::vector<DatasetFingerprint> fps;
    for (const auto& s : active_) fps.push_back(fingerprints_.at(s));
    const auto fp_avg = average_fingerprints(fps);
    const auto setup = derive_config(fp_avg, cfg_.seed, cfg_.train);
    fp_digest_ = setup.fingerprint_digest;
    if (resume_ && resume_->fingerprint_digest != fp_digest_) {
      abort(out, "resumed sites produced a different averaged fingerprint than the checkpoint");
      return;
    }
    if (!resume_) w_ = setup.init;
    result_.features = setup.features;
    config_ = ConfigBroadcast{fp_avg, cfg_.seed, setup.train};
    out.push_back({std::nullopt, *config_});
    phase_ = Phase::training;
    next_round_or_finish(out);
  }

  void next_round_or_finish(std::vector<Outbound>& out) {
    received_.clear();
    ++epoch_;
    if (completed_ >= cfg_.rounds) {
      out.push_back({std::nullopt, FinalModel{w_}});
      result_.status = RunStatus::completed;
      result_.weights = w_;
      result_.rounds_completed = completed_;
      phase_ = Phase::done;
      return;
    }
    out.push_back({std::nullopt, RoundStart{current_round(), w_}});
  }

  void on_delta(const std::string& from, const DeltaUpload& m, std::vector<Outbound>& out) {
    if (phase_ != Phase::training) return;
    if (m.t != current_round()) {
      log().info("server: stale delta for round {} from '{}' (open round {})", m.t, from, current_round());
      return;
    }
    if (m.site_id != from) {
      log().warn("server: delta claims site '{}' on connection of '{}'; ignored", m.site_id, from);
      return;
    }
    if (m.delta.size() != w_.size() || !m.delta.all_finite()) {
      abort(out, "invalid delta from '" + from + "'");
      return;
    }
    if (received_.count(from)) return;
    received_[from] = m.delta;
    if (received_.size() == active_.size()) finish_round(out, {});
  }

  void on_client_abort(const std::string& from, const Abort& m, std::vector<Outbound>& out) {
    if (cfg_.mode == AggregationMode::strict) {
      abort(out, "site '" + from + "' aborted: " + m.reason);
      return;
    }
    log().warn("server: site '{}' aborted ({}); excluded", from, m.reason);
    active_.erase(from);
    received_.erase(from);
    fingerprints_.erase(from);
    if (active_.empty()) {
      abort(out, "no sites left");
      return;
    }
    if (phase_ == Phase::joining && fingerprints_.size() == active_.size()) start_training(out);
    else if (phase_ == Phase::training && received_.size() == active_.size() && !received_.empty())
      finish_round(out, {});
  }

  void finish_round(std::vector<Outbound>& out, std::vector<std::string> excluded) {
    std::vector<SiteDelta> deltas;
    RoundLog entry{current_round(), {}, std::move(excluded)};
    for (const auto& [site, d] : received_) {
      deltas.push_back({site, d});
      entry.responders.push_back(site);
    }
    w_ = aggregate(w_, deltas, deltas.size());
    completed_ = current_round();
    result_.rounds.push_back(entry);
    last_responders_ = entry.responders;
    write_checkpoint(last_responders_);
    out.push_back({std::nullopt, CheckpointNotice{completed_}});
    if (cfg_.halt_after_round && *cfg_.halt_after_round == completed_) {
      result_.status = RunStatus::halted;
      result_.weights = w_;
      result_.rounds_completed = completed_;
      result_.reason = "halted after round " + std::to_string(completed_);
      phase_ = Phase::done;
      return;
    }
    next_round_or_finish(out);
  }

  void write_checkpoint(const std::vector<std::string>& responders) {
    Checkpoint c;
    c.experiment_digest = cfg_.experiment_digest;
    c.t = completed_;
    c.w_global = w_;
    c.fingerprint_digest = fp_digest_;
    c.seed = cfg_.seed;
    for (const auto& s : cfg_.expected_sites)
      c.site_flags.emplace_back(s, std::find(responders.begin(), responders.end(), s) != responders.end());
    c.rng_state = rng_.state();
    if (!cfg_.checkpoint_path.empty()) save_checkpoint(cfg_.checkpoint_path, c);
    result_.last_checkpoint = std::move(c);
  }

  void abort(std::vector<Outbound>& out, std::string reason) {
    log().error("server: aborting: {}", reason);
    // Partial deltas of the open round are discarded; the checkpoint holds the last completed round.
    if (phase_ == Phase::training) write_checkpoint(last_responders_);
    out.push_back({std::nullopt, Abort{reason}});
    result_.status = RunStatus::aborted;
    result_.weights = w_;
    result_.rounds_completed = completed_;
    result_.reason = std::move(reason);
    phase_ = Phase::done;
  }

  ServerConfig cfg_;
  Rng rng_;  // seeded for completeness of the checkpoint; no server-side draws
  std::optional<Checkpoint> resume_;
  Phase phase_ = Phase::joining;
  std::uint64_t epoch_ = 0;
  std::set<std::string> active_;
  std::map<std::string, DatasetFingerprint> fingerprints_;
  std::map<std::string, WeightVector> received_;
  std::optional<ConfigBroadcast> config_;
  Digest fp_digest_{};
  WeightVector w_;
  std::uint32_t completed_ = 0;
  std::vector<std::string> last_responders_;
  ServerResult result_;
};

/// Runs the coordinator over `transport` until the experiment completes,
/// aborts or halts.
inline ServerResult run_server(const ServerConfig& cfg, ServerTransport& transport,
                               std::optional<Checkpoint> resume_from = {}) {
  ServerCoordinator core(cfg, std::move(resume_from));
  std::map<PeerId, std::string> site_of;
  std::map<std::string, PeerId> peer_of;

  auto dispatch = [&](const std::vector<Outbound>& out) {
    for (const auto& o : out) {
      if (o.to) {
        if (auto it = peer_of.find(*o.to); it != peer_of.end()) transport.send(it->second, o.msg);
      } else {
        for (const auto& [site, peer] : peer_of) transport.send(peer, o.msg);
      }
    }
  };

  auto epoch = core.epoch();
  double deadline = transport.now() + core.timeout();
  while (!core.finished()) {
    auto in = transport.receive_until(deadline);
    if (!in) {
      if (transport.now() >= deadline) dispatch(core.on_deadline());
    } else {
      if (const auto* reg = std::get_if<Register>(&in->msg)) {
        if (auto old = site_of.find(in->peer); old != site_of.end() && old->second != reg->site_id) {
          log().warn("server: connection re-registering as '{}' ignored", reg->site_id);
          continue;
        }
        site_of[in->peer] = reg->site_id;
        peer_of[reg->site_id] = in->peer;
        log().info("server: site '{}' registered", reg->site_id);
      }
      auto it = site_of.find(in->peer);
      if (it == site_of.end()) {
        log().warn("server: {} from unregistered connection ignored", type_name(in->msg));
        continue;
      }
      dispatch(core.on_message(it->second, in->msg));
    }
    if (core.epoch() != epoch) {
      epoch = core.epoch();
      deadline = transport.now() + core.timeout();
    }
  }
  return core.result();
}

}  // namespace fedrad::proto
