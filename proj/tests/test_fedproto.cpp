#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>

#include "fedrad/fedproto/aggregate.hpp"
#include "fedrad/fedproto/checkpoint.hpp"
#include "fedrad/fedproto/client.hpp"
#include "fedrad/fedproto/messages.hpp"
#include "fedrad/fedproto/server.hpp"
#include "fedrad/simnet.hpp"
#include "oracles/sequential_fl.hpp"
#include "support/fl_harness.hpp"

using namespace fedrad;
using namespace fedrad::proto;
namespace fs = std::filesystem;

namespace {

WeightVector wv(std::vector<double> v) { return WeightVector(std::move(v)); }

WeightVector random_weights(Rng& rng) {
  WeightVector w;
  for (auto& x : w.values) x = rng.normal(0.0, 1.0);
  return w;
}

std::vector<Message> one_of_each(Rng& rng) {
  DatasetFingerprint fp;
  fp.n_samples = 7;
  fp.intensity_mean = rng.normal(0, 100);
  fp.intensity_std = 12.5;
  fp.intensity_p00_5 = -900;
  fp.intensity_p99_5 = 300;
  fp.mean_spacing = {0.7, 0.7, 2.5};
  fp.class_frequency = {0.9, 0.05, 0.03, 0.02};
  TrainConfig tc;
  tc.seed = rng.next_u64();
  return {Register{"site-é"},
          FingerprintSubmit{fp},
          ConfigBroadcast{fp, rng.next_u64(), tc},
          RoundStart{3, random_weights(rng)},
          DeltaUpload{4, "b", random_weights(rng)},
          CheckpointNotice{9},
          FinalModel{random_weights(rng)},
          Heartbeat{},
          Abort{"because"}};
}

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("fedrad_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

// ---------------------------------------------------------------------------
// aggregation

TEST(Aggregate, TwoSiteExample) {
  const std::vector<SiteDelta> d{{"a", wv({2, 0})}, {"b", wv({0, 2})}};
  EXPECT_EQ(aggregate(wv({1, 1}), d, 2), wv({2, 2}));
}

TEST(Aggregate, ZeroDeltasIdentity) {
  Rng rng(1);
  const auto w = random_weights(rng);
  const std::vector<SiteDelta> d{{"a", WeightVector{}}, {"b", WeightVector{}}, {"c", WeightVector{}}};
  EXPECT_EQ(aggregate(w, d, 3), w);
}

TEST(Aggregate, SingleSite) {
  const std::vector<SiteDelta> d{{"a", wv({0.5, -1.0})}};
  EXPECT_EQ(aggregate(wv({1, 1}), d, 1), wv({1.5, 0.0}));
}

TEST(Aggregate, ArrivalOrderInvariant) {
  Rng rng(2);
  const auto w = random_weights(rng);
  std::vector<SiteDelta> d;
  for (const char* s : {"e", "a", "d", "b", "c"}) d.push_back({s, random_weights(rng)});
  const auto ref = aggregate(w, d, d.size());
  for (int i = 0; i < 30; ++i) {
    rng.shuffle(d.begin(), d.end());
    EXPECT_EQ(aggregate(w, d, d.size()), ref);
  }
}

TEST(Aggregate, Errors) {
  const std::vector<SiteDelta> d{{"a", wv({1, 1})}, {"b", wv({1})}};
  EXPECT_THROW(aggregate(wv({0, 0}), d, 2), Error);
  const std::vector<SiteDelta> one{{"a", wv({1, 1})}};
  EXPECT_THROW(aggregate(wv({0, 0}), one, 2), Error);
  EXPECT_THROW(aggregate(wv({0, 0}), one, 0), Error);
  const std::vector<SiteDelta> dup{{"a", wv({1, 1})}, {"a", wv({1, 1})}};
  EXPECT_THROW(aggregate(wv({0, 0}), dup, 2), Error);
}

// ---------------------------------------------------------------------------
// framing

TEST(Frame, RoundTripEveryVariant) {
  Rng rng(3);
  const auto msgs = one_of_each(rng);
  ASSERT_EQ(msgs.size(), std::variant_size_v<Message>);
  for (const auto& m : msgs) {
    const auto bytes = encode_frame(m);
    const auto d = decode_frame(bytes);
    EXPECT_EQ(d.message, m) << type_name(m);
    EXPECT_EQ(d.consumed, bytes.size());
    EXPECT_EQ(std::to_integer<int>(bytes[3]), static_cast<int>(m.index()) + 1);
  }
}

TEST(Frame, HeaderLayout) {
  const auto bytes = encode_frame(CheckpointNotice{0x01020304});
  ASSERT_EQ(bytes.size(), kFrameHeaderSize + 4);
  EXPECT_EQ(std::to_integer<char>(bytes[0]), 'F');
  EXPECT_EQ(std::to_integer<char>(bytes[1]), 'R');
  EXPECT_EQ(std::to_integer<int>(bytes[2]), 1);
  EXPECT_EQ(std::to_integer<int>(bytes[3]), 6);
  EXPECT_EQ(std::to_integer<int>(bytes[4]), 4);
  EXPECT_EQ(std::to_integer<int>(bytes[5]), 0);
  EXPECT_EQ(std::to_integer<int>(bytes[8]), 4);  // payload, little endian
  EXPECT_EQ(std::to_integer<int>(bytes[11]), 1);
}

TEST(Frame, EveryTruncationIsReported) {
  Rng rng(4);
  for (const auto& m : one_of_each(rng)) {
    const auto bytes = encode_frame(m);
    for (std::size_t n = 0; n < bytes.size(); ++n) {
      try {
        decode_frame(std::span(bytes).first(n));
        ADD_FAILURE() << type_name(m) << " prefix " << n << " decoded";
      } catch (const FrameError& e) {
        EXPECT_EQ(e.code(), FrameErrorCode::truncated);
      }
    }
  }
}

TEST(Frame, DistinctHeaderErrors) {
  const auto good = encode_frame(Heartbeat{});
  auto code_of = [](std::vector<std::byte> b) {
    try {
      decode_frame(b);
    } catch (const FrameError& e) {
      return e.code();
    }
    return FrameErrorCode::malformed;  // unreachable in these cases
  };
  auto b = good;
  b[0] = std::byte{'X'};
  EXPECT_EQ(code_of(b), FrameErrorCode::bad_magic);
  b = good;
  b[2] = std::byte{2};
  EXPECT_EQ(code_of(b), FrameErrorCode::bad_version);
  b = good;
  b[3] = std::byte{0};
  EXPECT_EQ(code_of(b), FrameErrorCode::unknown_type);
  b[3] = std::byte{10};
  EXPECT_EQ(code_of(b), FrameErrorCode::unknown_type);
  b = good;
  b[7] = std::byte{0x7f};
  EXPECT_EQ(code_of(b), FrameErrorCode::oversized);
  b = encode_frame(CheckpointNotice{1});
  b[4] = std::byte{5};  // length covers one byte too many
  b.push_back(std::byte{0});
  EXPECT_EQ(code_of(b), FrameErrorCode::malformed);
}

TEST(Frame, ConcatenatedFramesDecodeInSequence) {
  Rng rng(5);
  const auto msgs = one_of_each(rng);
  std::vector<std::byte> stream;
  for (const auto& m : msgs) {
    const auto b = encode_frame(m);
    stream.insert(stream.end(), b.begin(), b.end());
  }
  std::size_t off = 0;
  for (const auto& m : msgs) {
    const auto d = decode_frame(std::span(stream).subspan(off));
    EXPECT_EQ(d.message, m);
    off += d.consumed;
  }
  EXPECT_EQ(off, stream.size());
}

TEST(Frame, FuzzNeverCrashes) {
  Rng rng(6);
  const auto seeds = one_of_each(rng);
  std::size_t decoded = 0;
  for (int i = 0; i < 20000; ++i) {
    std::vector<std::byte> b;
    if (i % 2 == 0) {
      b.resize(rng.below(64));
      for (auto& x : b) x = static_cast<std::byte>(rng.below(256));
      if (b.size() >= 4 && rng.bernoulli(0.5)) {
        b[0] = std::byte{'F'};
        b[1] = std::byte{'R'};
        b[2] = std::byte{1};
        b[3] = static_cast<std::byte>(1 + rng.below(9));
      }
    } else {
      b = encode_frame(seeds[rng.below(seeds.size())]);
      const auto flips = 1 + rng.below(4);
      for (std::uint64_t k = 0; k < flips; ++k) b[rng.below(b.size())] ^= static_cast<std::byte>(1 + rng.below(255));
    }
    try {
      decode_frame(b);
      ++decoded;
    } catch (const FrameError&) {
    }
  }
  EXPECT_GT(decoded, 0u);
}

// ---------------------------------------------------------------------------
// checkpoints

TEST(CheckpointFile, RoundTrip) {
  Rng rng(7);
  Checkpoint c;
  c.experiment_digest = sha256("x");
  c.t = 4;
  c.w_global = random_weights(rng);
  c.fingerprint_digest = sha256("fp");
  c.seed = 99;
  c.site_flags = {{"a", true}, {"b", false}};
  c.rng_state = rng.state();
  EXPECT_EQ(decode_checkpoint(encode_checkpoint(c)), c);
  const auto dir = temp_dir("ckpt");
  save_checkpoint(dir / "c.frck", c);
  EXPECT_EQ(load_checkpoint(dir / "c.frck"), c);
  EXPECT_EQ(resume(dir / "c.frck", c.experiment_digest, 99), c);
  EXPECT_THROW(resume(dir / "c.frck", c.experiment_digest, 98), CheckpointMismatch);
  EXPECT_THROW(resume(dir / "c.frck", sha256("y"), 99), CheckpointMismatch);
  auto bytes = encode_checkpoint(c);
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(decode_checkpoint(bytes), IoError);
  fs::remove_all(dir);
}

TEST(CheckpointFile, ServerRefusesForeignCheckpoint) {
  const auto sites = harness::make_sites(2, 1);
  auto exp = harness::sim_experiment(sites, 10, 2);
  Checkpoint c;
  c.experiment_digest = sha256("another experiment");
  c.seed = 10;
  EXPECT_THROW(ServerCoordinator(exp.server, c), CheckpointMismatch);
  c.experiment_digest = exp.server.experiment_digest;
  c.seed = 11;
  EXPECT_THROW(ServerCoordinator(exp.server, c), CheckpointMismatch);
}

// ---------------------------------------------------------------------------
// full runs on the simulated network

TEST(Protocol, TwoSitesThreeRoundsMatchSequential) {
  const auto sites = harness::make_sites(2, 2);
  const auto exp = harness::sim_experiment(sites, 21, 3);
  const auto r = sim::run_simulated(exp, harness::zero_links(sites));
  ASSERT_EQ(r.server.status, RunStatus::completed) << r.server.reason;
  EXPECT_EQ(r.server.rounds_completed, 3u);
  EXPECT_EQ(r.server.weights, oracle::sequential_fl(sites, 21, harness::quick_train(), 3));
  for (const auto& [site, w] : r.client_final) {
    ASSERT_TRUE(w.has_value());
    EXPECT_EQ(*w, r.server.weights);
  }
}

TEST(Protocol, OneSiteEqualsLocalTraining) {
  const auto sites = harness::make_sites(1, 3);
  const auto exp = harness::sim_experiment(sites, 5, 6);
  const auto r = sim::run_simulated(exp, harness::zero_links(sites));
  ASSERT_EQ(r.server.status, RunStatus::completed);
  const auto setup = derive_config(compute_fingerprint(sites[0].train), 5, harness::quick_train());
  const auto pool = build_training_pool(sites[0].train, setup.features);
  const auto local = train_local(setup, pool, sites[0].site_id, 6);
  // w + (w_local - w) / 1 can differ from w_local in the last bit
  for (std::size_t i = 0; i < kWeightLength; ++i) EXPECT_NEAR(r.server.weights[i], local[i], 1e-12);
}

TEST(Protocol, StrictModeOfflineSiteAborts) {
  const auto sites = harness::make_sites(2, 4);
  auto exp = harness::sim_experiment(sites, 6, 4);
  const auto dir = temp_dir("strict");
  exp.server.checkpoint_path = dir / "run.frck";
  exp.server.round_timeout_s = 30;
  auto links = harness::zero_links(sites);
  links[1].offline_rounds = {2};
  const auto r = sim::run_simulated(exp, links);
  EXPECT_EQ(r.server.status, RunStatus::aborted);
  EXPECT_NE(r.server.reason.find("round 2"), std::string::npos);
  const auto ck = load_checkpoint(dir / "run.frck");
  EXPECT_EQ(ck.t, 1u);
  EXPECT_EQ(ck.w_global, r.server.weights);
  EXPECT_EQ(r.client_status.at("alpha"), ClientStatus::aborted);
  EXPECT_EQ(r.client_status.at("bravo"), ClientStatus::running);  // offline, never hears the abort
  std::set<std::uint32_t> rounds;
  for (const auto& row : r.timing.rows) rounds.insert(row.round);
  EXPECT_EQ(rounds, (std::set<std::uint32_t>{1, 2}));
  fs::remove_all(dir);
}

TEST(Protocol, TolerantModeAggregatesResponders) {
  const auto sites = harness::make_sites(3, 5);
  auto exp = harness::sim_experiment(sites, 7, 3);
  exp.server.mode = AggregationMode::tolerant;
  exp.server.round_timeout_s = 30;
  auto links = harness::zero_links(sites);
  links[2].offline_rounds = {2};
  const auto r = sim::run_simulated(exp, links);
  ASSERT_EQ(r.server.status, RunStatus::completed) << r.server.reason;
  ASSERT_EQ(r.server.rounds.size(), 3u);
  EXPECT_EQ(r.server.rounds[1].responders, (std::vector<std::string>{"alpha", "bravo"}));
  EXPECT_EQ(r.server.rounds[1].excluded, (std::vector<std::string>{"charlie"}));
  EXPECT_EQ(r.server.rounds[2].responders.size(), 3u);
}

TEST(Protocol, HaltAndResumeIsBitIdentical) {
  const auto sites = harness::make_sites(3, 6);
  const auto exp = harness::sim_experiment(sites, 8, 5);
  const auto full = sim::run_simulated(exp, harness::zero_links(sites));
  ASSERT_EQ(full.server.status, RunStatus::completed);
  for (std::uint32_t k : {1u, 4u}) {
    const auto dir = temp_dir("halt");
    auto first = exp;
    first.server.halt_after_round = k;
    first.server.checkpoint_path = dir / "c.frck";
    const auto halted = sim::run_simulated(first, harness::zero_links(sites));
    ASSERT_EQ(halted.server.status, RunStatus::halted);
    const auto ck = resume(dir / "c.frck", exp.server.experiment_digest, exp.server.seed);
    EXPECT_EQ(ck.t, k);
    const auto resumed = sim::run_simulated(exp, harness::zero_links(sites), ck);
    ASSERT_EQ(resumed.server.status, RunStatus::completed);
    EXPECT_EQ(resumed.server.weights, full.server.weights) << "k=" << k;
    fs::remove_all(dir);
  }
}

TEST(Protocol, ClientConfigMismatchAborts) {
  const auto sites = harness::make_sites(2, 7);
  auto exp = harness::sim_experiment(sites, 9, 2);
  exp.clients[1].expected_seed = 12345;
  const auto r = sim::run_simulated(exp, harness::zero_links(sites));
  EXPECT_EQ(r.server.status, RunStatus::aborted);
  EXPECT_NE(r.server.reason.find("configuration mismatch"), std::string::npos);
}

TEST(Protocol, FinalModelPersistedByClients) {
  const auto sites = harness::make_sites(2, 8);
  auto exp = harness::sim_experiment(sites, 10, 2);
  const auto dir = temp_dir("final");
  for (auto& c : exp.clients) {
    c.state_dir = dir / c.site_id;
    fs::create_directories(c.state_dir);
  }
  const auto r = sim::run_simulated(exp, harness::zero_links(sites));
  ASSERT_EQ(r.server.status, RunStatus::completed);
  for (const auto& c : exp.clients) {
    EXPECT_EQ(load_weights(c.state_dir / kFinalModelFile), r.server.weights);
    const auto state = nlohmann::json::parse(read_text(c.state_dir / kClientStateFile));
    EXPECT_EQ(state["last_acked_round"].get<int>(), 2);
  }
  fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// client and coordinator in isolation

TEST(Client, DeltaIsTrainedMinusGlobal) {
  const auto sites = harness::make_sites(1, 9);
  ClientConfig cfg;
  cfg.site_id = sites[0].site_id;
  cfg.train = sites[0].train;
  SiteClient client(cfg);
  const auto hello = client.start();
  ASSERT_EQ(hello.size(), 2u);
  const auto fp = std::get<FingerprintSubmit>(hello[1]).fp;
  const auto tc = harness::quick_train();
  EXPECT_TRUE(client.on_message(ConfigBroadcast{fp, 77, tc}).empty());
  Rng rng(10);
  const auto w = random_weights(rng);
  const auto out = client.on_message(RoundStart{2, w});
  ASSERT_EQ(out.size(), 1u);
  const auto& up = std::get<DeltaUpload>(out[0]);
  EXPECT_EQ(up.t, 2u);
  const auto setup = derive_config(fp, 77, tc);
  auto c = setup.train;
  c.seed = round_seed(77, cfg.site_id, 2);
  const auto trained = train_epochs(w, build_training_pool(cfg.train, setup.features), c);
  EXPECT_EQ(up.delta, trained - w);
}

TEST(Client, RejectsEmptyTraining) {
  ClientConfig cfg;
  cfg.site_id = "x";
  EXPECT_THROW(SiteClient{cfg}, ConfigError);
}

TEST(Coordinator, StaleAndForgedDeltasIgnored) {
  const auto sites = harness::make_sites(2, 10);
  auto exp = harness::sim_experiment(sites, 11, 2);
  ServerCoordinator core(exp.server);
  std::vector<DatasetFingerprint> fps;
  for (const auto& ds : sites) fps.push_back(compute_fingerprint(ds.train));
  EXPECT_TRUE(core.on_message("alpha", FingerprintSubmit{fps[0]}).empty());
  const auto start = core.on_message("bravo", FingerprintSubmit{fps[1]});
  ASSERT_EQ(start.size(), 2u);
  EXPECT_TRUE(std::holds_alternative<ConfigBroadcast>(start[0].msg));
  const auto w0 = std::get<RoundStart>(start[1].msg).w_global;
  EXPECT_TRUE(core.on_message("alpha", DeltaUpload{2, "alpha", WeightVector{}}).empty());  // wrong round
  EXPECT_TRUE(core.on_message("alpha", DeltaUpload{1, "bravo", WeightVector{}}).empty());  // wrong sender
  EXPECT_TRUE(core.on_message("alpha", DeltaUpload{1, "alpha", WeightVector{}}).empty());
  EXPECT_TRUE(core.on_message("alpha", DeltaUpload{1, "alpha", WeightVector{}}).empty());  // duplicate
  const auto done = core.on_message("bravo", DeltaUpload{1, "bravo", WeightVector{}});
  ASSERT_FALSE(done.empty());
  EXPECT_EQ(std::get<CheckpointNotice>(done[0].msg).t, 1u);
  EXPECT_EQ(std::get<RoundStart>(done[1].msg).w_global, w0);
}

TEST(Coordinator, InvalidDeltaAborts) {
  const auto sites = harness::make_sites(1, 11);
  auto exp = harness::sim_experiment(sites, 12, 2);
  ServerCoordinator core(exp.server);
  core.on_message("alpha", FingerprintSubmit{compute_fingerprint(sites[0].train)});
  WeightVector bad;
  bad[0] = std::numeric_limits<double>::infinity();
  const auto out = core.on_message("alpha", DeltaUpload{1, "alpha", bad});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_TRUE(std::holds_alternative<Abort>(out[0].msg));
  EXPECT_EQ(core.result().status, RunStatus::aborted);
}

TEST(Coordinator, JoinTimeoutStrictAndTolerant) {
  const auto sites = harness::make_sites(2, 12);
  auto exp = harness::sim_experiment(sites, 13, 1);
  {
    ServerCoordinator core(exp.server);
    core.on_message("alpha", FingerprintSubmit{compute_fingerprint(sites[0].train)});
    core.on_deadline();
    EXPECT_EQ(core.result().status, RunStatus::aborted);
    EXPECT_FALSE(core.result().last_checkpoint.has_value());
  }
  exp.server.mode = AggregationMode::tolerant;
  ServerCoordinator core(exp.server);
  core.on_message("alpha", FingerprintSubmit{compute_fingerprint(sites[0].train)});
  const auto out = core.on_deadline();
  ASSERT_EQ(out.size(), 2u);
  EXPECT_TRUE(std::holds_alternative<RoundStart>(out[1].msg));
}

// ---------------------------------------------------------------------------
// sockets

TEST(Tcp, MatchesSequentialOracle) {
  const auto sites = harness::make_sites(3, 13);
  const auto exp = harness::sim_experiment(sites, 14, 3);
  const auto run = harness::run_tcp(exp);
  ASSERT_EQ(run.server.status, RunStatus::completed) << run.server.reason;
  EXPECT_EQ(run.server.weights, oracle::sequential_fl(sites, 14, harness::quick_train(), 3));
  for (const auto& c : run.clients) {
    EXPECT_EQ(c.status, ClientStatus::completed);
    ASSERT_TRUE(c.weights.has_value());
    EXPECT_EQ(*c.weights, run.server.weights);
  }
}

TEST(Tcp, RestartedClientRejoins) {
  const auto sites = harness::make_sites(2, 14);
  const auto exp = harness::sim_experiment(sites, 15, 4);
  const auto dir = temp_dir("tcp_restart");
  harness::TcpOptions opts;
  opts.client_crash = std::make_pair(std::size_t{1}, 2u);
  opts.state_root = dir;
  const auto run = harness::run_tcp(exp, opts);
  ASSERT_EQ(run.server.status, RunStatus::completed) << run.server.reason;
  EXPECT_EQ(run.server.weights, oracle::sequential_fl(sites, 15, harness::quick_train(), 4));
  EXPECT_EQ(load_weights(dir / "bravo" / kFinalModelFile), run.server.weights);
  fs::remove_all(dir);
}

TEST(Tcp, HaltAndResume) {
  const auto sites = harness::make_sites(2, 15);
  const auto exp = harness::sim_experiment(sites, 16, 3);
  const auto dir = temp_dir("tcp_halt");
  auto first = exp;
  first.server.halt_after_round = 1;
  first.server.checkpoint_path = dir / "c.frck";
  const auto halted = harness::run_tcp(first);
  ASSERT_EQ(halted.server.status, RunStatus::halted);
  harness::TcpOptions opts;
  opts.resume = resume(dir / "c.frck", exp.server.experiment_digest, exp.server.seed);
  const auto resumed = harness::run_tcp(exp, opts);
  ASSERT_EQ(resumed.server.status, RunStatus::completed) << resumed.server.reason;
  EXPECT_EQ(resumed.server.weights, oracle::sequential_fl(sites, 16, harness::quick_train(), 3));
  fs::remove_all(dir);
}

TEST(Tcp, ParseEndpoint) {
  EXPECT_EQ(parse_endpoint("localhost:7000"), (std::pair<std::string, std::uint16_t>{"localhost", 7000}));
  EXPECT_THROW(parse_endpoint("nohost"), ConfigError);
  EXPECT_THROW(parse_endpoint("h:70000"), ConfigError);
  EXPECT_THROW(parse_endpoint("h:12x"), ConfigError);
}
