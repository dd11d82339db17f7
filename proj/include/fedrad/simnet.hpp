#pragma once

// Discrete-event network simulation on a virtual clock. The real server
// driver runs against SimTransport; site clients live inside the event loop
// and every message still travels as an encoded frame.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "fedrad/core/error.hpp"
#include "fedrad/fedproto/client.hpp"
#include "fedrad/fedproto/messages.hpp"
#include "fedrad/fedproto/server.hpp"
#include "fedrad/fedproto/transport.hpp"

namespace fedrad::sim {

struct SiteLink {
  std::string site_id;
  double latency_ms = 0.0;
  double speed_factor = 1.0;
  std::set<std::uint32_t> offline_rounds;
  std::optional<std::uint32_t> crash_at_round;
};

/// Sites that cannot take part in round `t`.
inline std::set<std::string> apply_fault_schedule(const std::vector<SiteLink>& links, std::uint32_t t) {
  std::set<std::string> out;
  for (const auto& l : links)
    if (l.offline_rounds.count(t) || (l.crash_at_round && t >= *l.crash_at_round)) out.insert(l.site_id);
  return out;
}

inline void check_links(const std::vector<SiteLink>& links, const std::vector<std::string>& sites) {
  std::set<std::string> covered;
  for (const auto& l : links) {
    if (!(l.speed_factor > 0.0) || !std::isfinite(l.speed_factor))
      throw ConfigError("link '" + l.site_id + "': speed_factor must be positive");
    if (!(l.latency_ms >= 0.0) || !std::isfinite(l.latency_ms))
      throw ConfigError("link '" + l.site_id + "': latency_ms must be non-negative");
    if (l.crash_at_round && *l.crash_at_round < 1)
      throw ConfigError("link '" + l.site_id + "': crash_at_round must be at least 1");
    if (l.offline_rounds.count(0)) throw ConfigError("link '" + l.site_id + "': rounds are numbered from 1");
    if (!covered.insert(l.site_id).second) throw ConfigError("duplicate link for '" + l.site_id + "'");
  }
  for (const auto& s : sites)
    if (!covered.count(s)) throw ConfigError("no link declared for site '" + s + "'");
  if (covered.size() != sites.size()) throw ConfigError("link declared for a site that is not in the roster");
}

struct TimingRow {
  std::uint32_t round = 0;
  std::string site;
  double train_s = 0.0;
  double latency_s = 0.0;  // download + upload
  double idle_s = 0.0;
  double wall_s = 0.0;

  double busy_s() const { return train_s + latency_s; }
};

struct TimingReport {
  std::vector<TimingRow> rows;  // by round, then site

  std::string to_csv() const {
    std::string s = "round,site,train_s,latency_s,idle_s,wall_s\n";
    for (const auto& r : rows)
      s += fmt::format("{},{},{},{},{},{}\n", r.round, r.site, r.train_s, r.latency_s, r.idle_s, r.wall_s);
    return s;
  }

  double total_wall_s() const {
    double total = 0.0;
    std::uint32_t last = 0;
    for (const auto& r : rows)
      if (r.round != last) {
        total += r.wall_s;
        last = r.round;
      }
    return total;
  }
};

inline constexpr double kDefaultBatchCostS = 0.2;

struct SimExperiment {
  proto::ServerConfig server;
  std::vector<proto::ClientConfig> clients;
  double batch_cost_s = kDefaultBatchCostS;
};

struct SimResult {
  proto::ServerResult server;
  TimingReport timing;
  std::map<std::string, proto::ClientStatus> client_status;
  std::map<std::string, std::optional<WeightVector>> client_final;
};

/// In-process transport on a virtual clock. Events are ordered by
/// (time, site index, sequence number).
class SimTransport final : public proto::ServerTransport {
 public:
  SimTransport(std::vector<proto::SiteClient>& clients, const std::vector<SiteLink>& links, double batch_cost_s,
               std::uint32_t batches_per_epoch)
      : clients_(clients), batch_cost_s_(batch_cost_s), batches_(batches_per_epoch) {
    for (std::size_t i = 0; i < clients_.size(); ++i) {
      index_[clients_[i].site_id()] = i;
      for (const auto& l : links)
        if (l.site_id == clients_[i].site_id()) links_.push_back(l);
    }
    // every site connects at t = 0
    for (std::size_t i = 0; i < clients_.size(); ++i)
      for (const auto& m : clients_[i].start()) to_server(i, 0.0, m);
  }

  double now() override { return clock_; }

  std::optional<proto::Inbound> receive_until(double deadline) override {
    while (!queue_.empty() && queue_.top().time <= deadline) {
      Event ev = queue_.top();
      queue_.pop();
      clock_ = std::max(clock_, ev.time);
      const auto decoded = proto::decode_frame(ev.frame).message;
      if (ev.to_server) return proto::Inbound{ev.site + 1, decoded};
      deliver_to_client(ev.site, decoded);
    }
    clock_ = std::max(clock_, deadline);
    return std::nullopt;
  }

  void send(proto::PeerId peer, const proto::Message& msg) override {
    const std::size_t i = peer - 1;
    if (i >= clients_.size()) return;
    if (const auto* rs = std::get_if<proto::RoundStart>(&msg)) begin_round(rs->t);
    if (std::holds_alternative<proto::CheckpointNotice>(msg) || std::holds_alternative<proto::Abort>(msg) ||
        std::holds_alternative<proto::FinalModel>(msg))
      end_round();
    push(clock_ + latency_s(i), i, false, msg);
  }

  /// Delivers what is still in flight to the clients once the server has stopped.
  void drain() {
    while (!queue_.empty()) {
      Event ev = queue_.top();
      queue_.pop();
      clock_ = std::max(clock_, ev.time);
      if (!ev.to_server) deliver_to_client(ev.site, proto::decode_frame(ev.frame).message);
    }
  }

  TimingReport report() const {
    TimingReport r;
    for (const auto& rt : rounds_) {
      if (!rt.end) continue;
      bool all = true;
      double wall = 0.0;
      for (std::size_t i = 0; i < clients_.size(); ++i) {
        if (rt.responded.count(i)) wall = std::max(wall, busy(i));
        else all = false;
      }
      // with a missing site the round lasted until the server gave up waiting
      if (!all) wall = *rt.end - rt.start;
      for (std::size_t i = 0; i < clients_.size(); ++i) {
        TimingRow row;
        row.round = rt.t;
        row.site = clients_[i].site_id();
        if (rt.responded.count(i)) {
          row.train_s = train_s(i);
          row.latency_s = 2.0 * latency_s(i);
        }
        row.wall_s = wall;
        row.idle_s = wall - row.busy_s();
        r.rows.push_back(row);
      }
    }
    return r;
  }

 private:
  struct Event {
    double time;
    std::size_t site;
    std::uint64_t seq;
    bool to_server;
    std::vector<std::byte> frame;

    bool operator>(const Event& o) const {
      if (time != o.time) return time > o.time;
      if (site != o.site) return site > o.site;
      return seq > o.seq;
    }
  };

  struct RoundTiming {
    std::uint32_t t = 0;
    double start = 0.0;
    std::optional<double> end;
    std::set<std::size_t> responded;
  };

  double latency_s(std::size_t i) const { return links_[i].latency_ms / 1000.0; }
  double train_s(std::size_t i) const { return links_[i].speed_factor * (batches_ * batch_cost_s_); }
  double busy(std::size_t i) const { return train_s(i) + 2.0 * latency_s(i); }

  bool unavailable(std::size_t i, std::uint32_t t) const {
    const auto& l = links_[i];
    return l.offline_rounds.count(t) || (l.crash_at_round && t >= *l.crash_at_round);
  }

  void begin_round(std::uint32_t t) {
    if (!rounds_.empty() && rounds_.back().t == t && !rounds_.back().end) return;
    rounds_.push_back({t, clock_, std::nullopt, {}});
  }

  void end_round() {
    if (!rounds_.empty() && !rounds_.back().end) rounds_.back().end = clock_;
  }

  void push(double time, std::size_t site, bool to_server, const proto::Message& msg) {
    queue_.push(Event{time, site, seq_++, to_server, proto::encode_frame(msg)});
  }

  void to_server(std::size_t i, double sent_at, const proto::Message& msg) {
    push(sent_at + latency_s(i), i, true, msg);
  }

  void deliver_to_client(std::size_t i, const proto::Message& msg) {
    auto& client = clients_[i];
    const auto* rs = std::get_if<proto::RoundStart>(&msg);
    if (rs) {
      current_t_ = rs->t;
      if (unavailable(i, rs->t)) return;
    } else if (current_t_ && unavailable(i, current_t_)) {
      return;  // a site that is down also misses notices
    }
    const double compute = rs ? train_s(i) : 0.0;
    for (const auto& out : client.on_message(msg)) {
      if (rs && std::holds_alternative<proto::DeltaUpload>(out) && !rounds_.empty() && !rounds_.back().end)
        rounds_.back().responded.insert(i);
      to_server(i, clock_ + compute, out);
    }
  }

  std::vector<proto::SiteClient>& clients_;
  std::vector<SiteLink> links_;
  std::map<std::string, std::size_t> index_;
  double batch_cost_s_;
  std::uint32_t batches_;
  double clock_ = 0.0;
  std::uint64_t seq_ = 0;
  std::uint32_t current_t_ = 0;
  std::priority_queue<Event, std::vector<Event>, std::greater<>> queue_;
  std::vector<RoundTiming> rounds_;
};

/// Runs a complete experiment on the virtual clock. `resume_from` continues
/// from a checkpoint exactly as `fedrad serve --resume` would.
inline SimResult run_simulated(const SimExperiment& exp, const std::vector<SiteLink>& links,
                               std::optional<proto::Checkpoint> resume_from = {}) {
  std::vector<std::string> sites;
  for (const auto& c : exp.clients) sites.push_back(c.site_id);
  check_links(links, sites);
  if (!(exp.batch_cost_s >= 0.0)) throw ConfigError("batch_cost_s must be non-negative");
  for (const auto& l : links)
    if (l.crash_at_round && resume_from && *l.crash_at_round <= resume_from->t)
      throw ConfigError("site '" + l.site_id + "' crashes before the resumed round");

  std::vector<proto::SiteClient> clients;
  for (const auto& c : exp.clients) clients.emplace_back(c);
  SimTransport transport(clients, links, exp.batch_cost_s, exp.server.train.batches_per_epoch);

  SimResult r;
  r.server = proto::run_server(exp.server, transport, std::move(resume_from));
  transport.drain();
  r.timing = transport.report();
  for (const auto& c : clients) {
    r.client_status[c.site_id()] = c.status();
    r.client_final[c.site_id()] = c.final_weights();
  }
  return r;
}

}  // namespace fedrad::sim
