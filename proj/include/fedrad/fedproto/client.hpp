#pragma once

// Site participant: a message-driven core plus a driver for blocking transports.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedrad/core/error.hpp"
#include "fedrad/core/log.hpp"
#include "fedrad/dataset.hpp"
#include "fedrad/dataset_io.hpp"
#include "fedrad/fedproto/messages.hpp"
#include "fedrad/fedproto/rounds.hpp"
#include "fedrad/fedproto/transport.hpp"
#include "fedrad/fingerprint.hpp"

namespace fedrad::proto {

inline constexpr const char* kFinalModelFile = "final_model.frwt";
inline constexpr const char* kClientStateFile = "client_state.json";

struct ClientConfig {
  std::string site_id;
  std::vector<Sample> train;               // validated training split
  std::filesystem::path state_dir;         // empty: nothing persisted
  std::optional<std::uint64_t> expected_seed;  // local copy of the experiment, checked against the broadcast
  std::optional<TrainConfig> expected_train;
  std::optional<std::uint32_t> crash_after_round;  // stop right after uploading this round's delta
};

enum class ClientStatus { running, completed, aborted, crashed };

class SiteClient {
 public:
  explicit SiteClient(ClientConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.site_id.empty()) throw ConfigError("client: empty site id");
    if (cfg_.train.empty()) throw ConfigError("client '" + cfg_.site_id + "': no training samples");
  }

  ClientStatus status() const { return status_; }
  const std::string& site_id() const { return cfg_.site_id; }
  const std::optional<WeightVector>& final_weights() const { return final_; }
  std::uint32_t last_acked() const { return last_acked_; }
  const std::string& abort_reason() const { return abort_reason_; }

  /// Opening messages; sent again after every reconnect.
  std::vector<Message> start() {
    if (!fp_) fp_ = compute_fingerprint(cfg_.train);
    return {Register{cfg_.site_id}, FingerprintSubmit{*fp_}};
  }

  std::vector<Message> on_message(const Message& msg) {
    std::vector<Message> out;
    if (status_ != ClientStatus::running) return out;
    if (const auto* m = std::get_if<ConfigBroadcast>(&msg)) {
      on_config(*m, out);
    } else if (const auto* m = std::get_if<RoundStart>(&msg)) {
      on_round(*m, out);
    } else if (const auto* m = std::get_if<CheckpointNotice>(&msg)) {
      last_acked_ = std::max(last_acked_, m->t);
      persist_state();
    } else if (const auto* m = std::get_if<FinalModel>(&msg)) {
      final_ = m->w_final;
      if (!cfg_.state_dir.empty()) save_weights(cfg_.state_dir / kFinalModelFile, m->w_final);
      status_ = ClientStatus::completed;
      persist_state();
    } else if (const auto* m = std::get_if<Abort>(&msg)) {
      abort_reason_ = m->reason;
      status_ = ClientStatus::aborted;
      log().warn("client '{}': server aborted: {}", cfg_.site_id, m->reason);
    }
    return out;
  }

 private:
  void on_config(const ConfigBroadcast& m, std::vector<Message>& out) {
    std::string mismatch;
    if (cfg_.expected_seed && *cfg_.expected_seed != m.seed) mismatch = "seed";
    TrainConfig got = m.train;
    got.seed = 0;
    if (cfg_.expected_train) {
      TrainConfig want = *cfg_.expected_train;
      want.seed = 0;
      if (!(want == got)) mismatch += mismatch.empty() ? "train config" : ", train config";
    }
    if (!mismatch.empty()) {
      abort_reason_ = "configuration mismatch: " + mismatch;
      out.push_back(Abort{abort_reason_});
      status_ = ClientStatus::aborted;
      return;
    }
    setup_ = derive_config(m.fp_avg, m.seed, m.train);
    seed_ = m.seed;
    pool_ = build_training_pool(cfg_.train, setup_->features);
  }

  void on_round(const RoundStart& m, std::vector<Message>& out) {
    if (!setup_) {
      log().warn("client '{}': round {} before configuration; ignored", cfg_.site_id, m.t);
      return;
    }
    if (m.t < last_round_) log().warn("client '{}': round index went back from {} to {}", cfg_.site_id, last_round_, m.t);
    last_round_ = m.t;
    const auto trained = local_round(m.w_global, pool_, setup_->train, seed_, cfg_.site_id, m.t);
    out.push_back(DeltaUpload{m.t, cfg_.site_id, trained - m.w_global});
    if (cfg_.crash_after_round && *cfg_.crash_after_round == m.t) status_ = ClientStatus::crashed;
  }

  void persist_state() const {
    if (cfg_.state_dir.empty()) return;
    nlohmann::json j{{"site_id", cfg_.site_id}, {"last_acked_round", last_acked_}, {"completed", final_.has_value()}};
    write_text(cfg_.state_dir / kClientStateFile, j.dump(2) + "\n");
  }

  ClientConfig cfg_;
  ClientStatus status_ = ClientStatus::running;
  std::optional<DatasetFingerprint> fp_;
  std::optional<ModelSetup> setup_;
  std::uint64_t seed_ = 0;
  TrainingPool pool_;
  std::uint32_t last_round_ = 0;
  std::uint32_t last_acked_ = 0;
  std::optional<WeightVector> final_;
  std::string abort_reason_;
};

struct ClientRunOptions {
  double receive_timeout_s = 1.0;
  double idle_limit_s = 3600.0;  // give up after this long without any message
  int max_reconnects = 10;
};

struct ClientResult {
  ClientStatus status = ClientStatus::aborted;
  std::optional<WeightVector> weights;
  std::uint32_t last_acked = 0;
  std::string reason;
};

inline ClientResult run_client(SiteClient& client, ClientTransport& transport, const ClientRunOptions& opts = {}) {
  auto send_all = [&](const std::vector<Message>& msgs) {
    for (const auto& m : msgs)
      if (!transport.send(m)) return false;
    return true;
  };
  int reconnects = 0;
  double idle = 0.0;
  bool connected = send_all(client.start());
  std::string reason;
  while (client.status() == ClientStatus::running) {
    if (!connected) {
      if (++reconnects > opts.max_reconnects || !transport.reconnect()) {
        reason = "server unreachable";
        break;
      }
      log().info("client '{}': reconnected", client.site_id());
      connected = send_all(client.start());
      continue;
    }
    auto ev = transport.receive(opts.receive_timeout_s);
    if (std::holds_alternative<Disconnected>(ev)) {
      connected = false;
      continue;
    }
    if (std::holds_alternative<Timeout>(ev)) {
      idle += opts.receive_timeout_s;
      if (idle >= opts.idle_limit_s) {
        reason = "no message from server within idle limit";
        break;
      }
      continue;
    }
    idle = 0.0;
    connected = send_all(client.on_message(std::get<Message>(ev)));
  }
  transport.close();
  ClientResult r;
  r.status = client.status() == ClientStatus::running ? ClientStatus::aborted : client.status();
  r.weights = client.final_weights();
  r.last_acked = client.last_acked();
  r.reason = reason.empty() ? client.abort_reason() : reason;
  return r;
}

}  // namespace fedrad::proto
