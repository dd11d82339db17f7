// Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any FAIL.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "fedrad/evalrank.hpp"
#include "fedrad/experiment.hpp"
#include "fedrad/fedproto/checkpoint.hpp"
#include "fedrad/fedproto/messages.hpp"
#include "fedrad/metrics.hpp"
#include "fedrad/simnet.hpp"
#include "fedrad/study.hpp"
#include "fedrad/validation.hpp"
#include "oracles/finite_diff.hpp"
#include "oracles/metric_oracle.hpp"
#include "oracles/published_tables.hpp"
#include "oracles/rank_oracle.hpp"
#include "oracles/sequential_fl.hpp"
#include "support/fl_harness.hpp"

using namespace fedrad;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<SiteDataset> default_sites(std::size_t n, std::uint64_t seed) {
  static const char* kNames[] = {"s1", "s2", "s3", "s4", "s5", "s6"};
  std::vector<SiteDataset> out;
  for (std::size_t i = 0; i < n; ++i) {
    SiteProfile p;  // library defaults
    p.site_id = kNames[i];
    p.seed = derive_seed(seed, hash_string(p.site_id));
    out.push_back(generate_site_dataset(p));
  }
  return out;
}

sim::SimExperiment experiment_for(const std::vector<SiteDataset>& sites, std::uint64_t seed, std::uint32_t rounds) {
  auto e = harness::sim_experiment(sites, seed, rounds);
  e.server.train = ExperimentConfig{}.train;
  return e;
}

// 1 ------------------------------------------------------------------------
Outcome oracle_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  int runs = 0;
  for (std::size_t n : {1u, 2u, 3u, 6u})
    for (std::uint32_t t : {1u, 3u, 10u}) {
      const std::uint64_t seed = 1000 + n * 17 + t;
      const auto sites = default_sites(n, seed);
      const auto exp = experiment_for(sites, seed, t);
      const auto reference = oracle::sequential_fl(sites, seed, exp.server.train, t);
      const auto simulated = sim::run_simulated(exp, harness::zero_links(sites));
      const auto tcp = harness::run_tcp(exp);
      if (simulated.server.status != proto::RunStatus::completed || tcp.server.status != proto::RunStatus::completed)
        return {false, fmt::format("N={} T={}: run did not complete", n, t)};
      if (!(simulated.server.weights == reference)) return {false, fmt::format("N={} T={}: sim differs", n, t)};
      if (!(tcp.server.weights == reference)) return {false, fmt::format("N={} T={}: tcp differs", n, t)};
      ++runs;
    }
  const double secs = seconds_since(t0);
  return {secs < 60.0, fmt::format("{} configurations bit-identical (sim, tcp, sequential); {:.1f} s, limit 60 s", runs, secs)};
}

// 2 ------------------------------------------------------------------------
std::vector<ScoreCell> cells_of(const oracle::Table& t) {
  std::vector<ScoreCell> out;
  for (std::size_t a = 0; a < t.models.size(); ++a)
    for (std::size_t s = 0; s < t.n_sites; ++s)
      for (std::size_t m = 0; m < 4; ++m)
        if (const auto& v = t.values[a][s * 4 + m])
          out.push_back({t.models[a], oracle::kTableSites[s], kAllMetrics[m], *v});
  return out;
}

Outcome ranking_oracle() {
  const auto pt = rank(cells_of(oracle::kPersonalizationTable()));
  const std::map<std::string, double> expected{
      {"L_i", 3.96}, {"E", 3.50}, {"FL", 3.13}, {"Spec(E)", 2.58}, {"Spec(FL)", 1.83}};
  for (const auto& [m, v] : expected)
    if (std::fabs(pt.r.at(m) - v) > 0.01) return {false, fmt::format("r({}) = {:.4f}, expected {} ± 0.01", m, pt.r.at(m), v)};
  // the printed column, to two decimals
  for (const auto& [m, v] : {std::pair{"E", 3.50}, {"Spec(E)", 2.58}})
    if (std::round(pt.r.at(m) * 100.0) / 100.0 != v) return {false, fmt::format("r({}) does not round to {}", m, v)};
  const std::vector<std::string> order{"Spec(FL)", "Spec(E)", "FL", "E", "L_i"};
  if (pt.ordering() != order) return {false, "ordering differs"};
  double sum = 0.0;
  for (const auto& c : pt.cells) sum += c.rank;
  if (sum != 180.0) return {false, fmt::format("rank points sum to {}", sum)};
  const auto oracle_r = oracle::mean_ranks(oracle::kPersonalizationTable());
  for (const auto& [m, v] : oracle_r)
    if (std::fabs(pt.r.at(m) - v) > 1e-12) return {false, "disagrees with the counting oracle on " + m};

  const auto wo = rank(cells_of(oracle::kWithoutLocalTable()), {true});
  if (wo.ordering().front() != "FL_leave-i-out") return {false, "without-local table best is " + wo.ordering().front()};
  const auto wl = rank(cells_of(oracle::kWithLocalTable()));
  if (wl.ordering().front() != "Spec(FL_leave-i-out)") return {false, "with-local table best is " + wl.ordering().front()};
  return {true, fmt::format("L {:.3f} E {:.3f} FL {:.3f} Spec(E) {:.3f} Spec(FL) {:.3f}, sum {}, tol 0.01; "
                            "without-local best {}, with-local best {}",
                            pt.r.at("L_i"), pt.r.at("E"), pt.r.at("FL"), pt.r.at("Spec(E)"), pt.r.at("Spec(FL)"), sum,
                            wo.ordering().front(), wl.ordering().front())};
}

// 3 ------------------------------------------------------------------------
Outcome degenerate_constants() {
  const Dims d{6, 6, 6};
  LabelMask ref{"r", Grid3<std::uint8_t>(d, 0)}, empty{"p", Grid3<std::uint8_t>(d, 0)};
  ref.labels(2, 2, 2) = ref.labels(2, 3, 2) = 2;
  const auto fn = score_pair(empty, ref, Label::ggo, {1.0, 1.0, 1.0}, "x");
  const std::array<double, 4> want{0.0, 0.0, 260.0, 20.0};
  for (std::size_t k = 0; k < 4; ++k)
    if (fn[k].value != want[k] || fn[k].status != RecordStatus::FNDefaulted)
      return {false, fmt::format("{} = {}", to_string(fn[k].metric), fn[k].value)};

  // a false positive beside a scored pair leaves the means unchanged
  LabelMask pred = ref;
  pred.labels(4, 4, 4) = 3;
  auto scored = score_pair(pred, ref, Label::ggo, {1.0, 1.0, 1.0}, "x");
  const auto fp = score_pair(pred, ref, Label::pe, {1.0, 1.0, 1.0}, "x");
  for (const auto& r : fp)
    if (r.status != RecordStatus::FPSkipped) return {false, "FP pair not skipped"};
  auto with_fp = scored;
  with_fp.insert(with_fp.end(), fp.begin(), fp.end());
  const auto a = summarize(scored, "s"), b = summarize(with_fp, "s");
  if (a.mean != b.mean || a.included != b.included) return {false, "FP pair changed the means"};
  return {true, "FN -> (0, 0, 260, 20) exactly; FP pairs leave the means bit-identical"};
}

// 4 ------------------------------------------------------------------------
LabelMask random_mask(Rng& rng, Dims d, double density) {
  LabelMask m{"m", Grid3<std::uint8_t>(d, 0)};
  const int boxes = static_cast<int>(rng.between(0, 3));
  const std::array<std::uint32_t, 3> ext{d.d, d.h, d.w};
  for (int b = 0; b < boxes; ++b) {
    std::array<std::uint32_t, 3> lo{}, hi{};
    for (int a = 0; a < 3; ++a) {
      lo[a] = static_cast<std::uint32_t>(rng.below(ext[a]));
      hi[a] = lo[a] + 1 + static_cast<std::uint32_t>(rng.below(ext[a] - lo[a]));
    }
    for (auto z = lo[0]; z < hi[0]; ++z)
      for (auto y = lo[1]; y < hi[1]; ++y)
        for (auto x = lo[2]; x < hi[2]; ++x) m.labels(z, y, x) = 1;
  }
  for (auto& v : m.labels.storage())
    if (rng.bernoulli(density)) v = 1;
  return m;
}

Outcome metric_oracles() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(4242);
  int compared = 0;
  double worst = 0.0;
  while (compared < 500) {
    const Dims d{static_cast<std::uint32_t>(rng.between(1, 12)), static_cast<std::uint32_t>(rng.between(1, 12)),
                 static_cast<std::uint32_t>(rng.between(1, 12))};
    const Spacing sp = rng.bernoulli(0.5) ? Spacing{1.0, 1.0, 1.0}
                                          : Spacing{rng.uniform(0.5, 3.0), rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5)};
    const auto p = random_mask(rng, d, rng.uniform(0.0, 0.3));
    const auto r = random_mask(rng, d, rng.uniform(0.0, 0.3));
    const auto c = Label::cons;
    if (!p.contains(c) || !r.contains(c)) continue;
    ++compared;
    if (dsc(p, r, c) != oracle::dsc(p, r, c)) return {false, fmt::format("dsc differs on pair {}", compared)};
    if (nave(p, r, c, sp) != oracle::nave(p, r, c, sp)) return {false, fmt::format("nave differs on pair {}", compared)};
    const double tau = rng.bernoulli(0.5) ? 1.0 : rng.uniform(0.5, 3.0);
    const double errs[] = {std::fabs(hsd(p, r, c, sp) - oracle::hsd(p, r, c, sp)),
                           std::fabs(hsd(p, r, c, sp, HausdorffMode::p95) - oracle::hsd95(p, r, c, sp)),
                           std::fabs(nsd(p, r, c, sp, tau) - oracle::nsd(p, r, c, sp, tau))};
    for (double e : errs) worst = std::max(worst, e);
    if (worst > 1e-9) return {false, fmt::format("distance metric error {:.3g} on pair {}", worst, compared)};
  }
  const double secs = seconds_since(t0);
  return {secs < 30.0, fmt::format("500 pairs; dsc, nave exact; max distance error {:.3g} (tol 1e-9); {:.1f} s, limit 30 s",
                                   worst, secs)};
}

// 5 ------------------------------------------------------------------------
Outcome gradient_check() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed + 77);
    WeightVector w;
    for (auto& x : w.values) x = rng.normal(0.0, 1.0);
    std::vector<Example> batch(1 + rng.below(32));
    for (auto& ex : batch) {
      for (std::size_t f = 0; f < kNumFeatures; ++f) ex.x[f] = rng.normal(0.0, 1.5);
      ex.x[kNumFeatures] = 1.0;
      ex.label = static_cast<std::uint8_t>(rng.below(kNumClasses));
    }
    const auto g = loss_and_grad(w, batch).grad.values;
    const auto fd = oracle::numeric_gradient(w, batch);
    double num = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      num += (g[i] - fd[i]) * (g[i] - fd[i]);
      na += g[i] * g[i];
      nb += fd[i] * fd[i];
    }
    worst = std::max(worst, std::sqrt(num) / std::max(std::sqrt(na) + std::sqrt(nb), 1e-12));
  }
  return {worst < 1e-4, fmt::format("100 batches, max relative error {:.3g} (limit 1e-4)", worst)};
}

// 6 ------------------------------------------------------------------------
Outcome crash_restart() {
  const std::uint32_t T = 5;
  const auto sites = default_sites(3, 606);
  const auto exp = experiment_for(sites, 606, T);
  const auto full = sim::run_simulated(exp, harness::zero_links(sites));
  if (full.server.status != proto::RunStatus::completed) return {false, "uninterrupted run failed"};
  const auto dir = fs::temp_directory_path() / "fedrad_acceptance_ckpt";
  for (std::uint32_t k : {1u, T - 1}) {
    for (const bool tcp : {false, true}) {
      fs::remove_all(dir);
      fs::create_directories(dir);
      auto first = exp;
      first.server.halt_after_round = k;
      first.server.checkpoint_path = dir / "c.frck";
      const auto status = tcp ? harness::run_tcp(first).server.status
                              : sim::run_simulated(first, harness::zero_links(sites)).server.status;
      if (status != proto::RunStatus::halted) return {false, fmt::format("k={}: server did not halt", k)};
      const auto ck = proto::resume(dir / "c.frck", exp.server.experiment_digest, exp.server.seed);
      if (ck.t != k) return {false, fmt::format("checkpoint at {} instead of {}", ck.t, k)};
      harness::TcpOptions opts;
      opts.resume = ck;
      const auto resumed = tcp ? harness::run_tcp(exp, opts).server : sim::run_simulated(exp, harness::zero_links(sites), ck).server;
      if (resumed.status != proto::RunStatus::completed || !(resumed.weights == full.server.weights))
        return {false, fmt::format("k={} {}: resumed weights differ", k, tcp ? "tcp" : "sim")};
    }
  }
  fs::remove_all(dir);
  return {true, fmt::format("T={}, k in {{1, {}}}, sim and tcp resume bit-identical", T, T - 1)};
}

// 7 ------------------------------------------------------------------------
Outcome straggler_accounting() {
  const auto sites = default_sites(2, 707);
  auto exp = experiment_for(sites, 707, 3);
  auto links = harness::zero_links(sites);
  links[0].speed_factor = 1.0;
  links[1].speed_factor = 2.0;
  const auto r = sim::run_simulated(exp, links);
  if (r.server.status != proto::RunStatus::completed) return {false, "run did not complete"};
  const double base_epoch = exp.server.train.batches_per_epoch * exp.batch_cost_s;
  double worst = 0.0;
  for (const auto& row : r.timing.rows) {
    if (row.site == sites[0].site_id && row.idle_s != base_epoch)
      return {false, fmt::format("round {}: fast idle {} != base epoch {}", row.round, row.idle_s, base_epoch)};
    if (row.site == sites[1].site_id && row.idle_s != 0.0) return {false, "slow site idles"};
    worst = std::max(worst, std::fabs(row.busy_s() + row.idle_s - row.wall_s));
  }
  if (worst > 1e-9) return {false, fmt::format("busy + idle misses wall by {}", worst)};
  return {true, fmt::format("fast idle = {} s = base epoch exactly; |busy+idle-wall| <= {:.3g} (tol 1e-9)", base_epoch, worst)};
}

// 8 ------------------------------------------------------------------------
Outcome directional_study() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto cfg = load_experiment(fs::path(FEDRAD_SOURCE_DIR) / "configs" / "default.json");
  const auto out = run_study(cfg, generate_sites(cfg));
  const auto& r = out.ranks.at(Scenario::personalization).r;
  const double local = r.at("L_i");
  std::string detail = fmt::format("L_i {:.3f}", local);
  bool pass = true;
  for (const char* m : {"E", "FL", "Spec(E)", "Spec(FL)"}) {
    detail += fmt::format(", {} {:.3f}", m, r.at(m));
    pass = pass && r.at(m) < local;
  }
  const double secs = seconds_since(t0);
  return {pass && secs < 300.0, fmt::format("{}; {:.1f} s, limit 300 s", detail, secs)};
}

// 9 ------------------------------------------------------------------------
Outcome validator_completeness() {
  SiteProfile p;
  p.site_id = "v";
  p.n_samples = 8;
  p.grid_dims = {10, 10, 10};
  std::size_t detected = 0, injected = 0, false_pos = 0, pristine = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    p.seed = derive_seed(909, seed);
    const auto s = generate_sample(p, seed % p.n_samples);
    ++pristine;
    false_pos += !validate_sample(s).empty();
    for (auto code : kAllFindingCodes) {
      ++injected;
      detected += has_code(validate_sample(inject_corruption(s, code, seed)), code);
    }
  }
  return {detected == injected && false_pos == 0,
          fmt::format("{}/{} injected detected ({} codes x 1000 seeds); {} false positives on {} pristine samples", detected,
                      injected, kAllFindingCodes.size(), false_pos, pristine)};
}

// 10 -----------------------------------------------------------------------
std::vector<proto::Message> one_of_each(Rng& rng) {
  using namespace proto;
  DatasetFingerprint fp;
  fp.n_samples = 3;
  fp.intensity_mean = rng.normal(0, 100);
  fp.intensity_std = 20.0;
  fp.mean_spacing = {0.8, 0.8, 2.0};
  fp.class_frequency = {0.9, 0.05, 0.03, 0.02};
  auto w = [&] {
    WeightVector v;
    for (auto& x : v.values) x = rng.normal(0.0, 1.0);
    return v;
  };
  TrainConfig tc;
  tc.seed = rng.next_u64();
  return {Register{"site"},    FingerprintSubmit{fp}, ConfigBroadcast{fp, rng.next_u64(), tc},
          RoundStart{2, w()},  DeltaUpload{2, "site", w()}, CheckpointNotice{2},
          FinalModel{w()},     Heartbeat{},            Abort{"stop"}};
}

Outcome protocol_robustness() {
  using namespace proto;
  Rng rng(1010);
  const auto msgs = one_of_each(rng);
  if (msgs.size() != std::variant_size_v<Message>) return {false, "not every message variant covered"};
  for (const auto& m : msgs) {
    const auto bytes = encode_frame(m);
    const auto d = decode_frame(bytes);
    if (!(d.message == m) || d.consumed != bytes.size()) return {false, fmt::format("round trip failed for {}", type_name(m))};
  }
  std::size_t rejected = 0, accepted = 0;
  for (int i = 0; i < 100000; ++i) {
    std::vector<std::byte> b;
    if (i % 2 == 0) {
      b.resize(rng.below(96));
      for (auto& x : b) x = static_cast<std::byte>(rng.below(256));
      if (b.size() >= 4 && rng.bernoulli(0.5)) {
        b[0] = std::byte{'F'};
        b[1] = std::byte{'R'};
        b[2] = std::byte{1};
        b[3] = static_cast<std::byte>(1 + rng.below(9));
      }
    } else {
      b = encode_frame(msgs[rng.below(msgs.size())]);
      const auto flips = 1 + rng.below(4);
      for (std::uint64_t k = 0; k < flips; ++k) b[rng.below(b.size())] ^= static_cast<std::byte>(1 + rng.below(255));
      if (rng.bernoulli(0.2)) b.resize(rng.below(b.size() + 1));
    }
    try {
      decode_frame(b);
      ++accepted;
    } catch (const FrameError&) {
      ++rejected;
    } catch (const std::exception& e) {
      return {false, fmt::format("input {}: unexpected exception {}", i, e.what())};
    }
  }
  return {true, fmt::format("{} variants round-trip; 100000 fuzzed frames: {} rejected cleanly, {} decoded", msgs.size(),
                            rejected, accepted)};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"federated runs match the sequential reference", oracle_equivalence},
      {"rank oracle on the published tables", ranking_oracle},
      {"false-negative constants and FP exclusion", degenerate_constants},
      {"metrics agree with brute-force oracles", metric_oracles},
      {"analytic gradient vs finite differences", gradient_check},
      {"crash-restart determinism", crash_restart},
      {"straggler accounting", straggler_accounting},
      {"collaborative variants outrank local models", directional_study},
      {"validator completeness", validator_completeness},
      {"frame decoder robustness", protocol_robustness},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s  %2zu  %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", criteria.size() - failed, criteria.size());
  return failed ? 1 : 0;
}
