#pragma once

// Experiment configuration file. The canonical serialization (sorted keys,
// every default filled in) is hashed into the experiment digest that tags
// checkpoints and artifacts.

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedrad/core/digest.hpp"
#include "fedrad/core/error.hpp"
#include "fedrad/core/rng.hpp"
#include "fedrad/dataset.hpp"
#include "fedrad/dataset_io.hpp"
#include "fedrad/evalrank.hpp"
#include "fedrad/fedproto/aggregate.hpp"
#include "fedrad/learner.hpp"
#include "fedrad/metrics.hpp"
#include "fedrad/simnet.hpp"

namespace fedrad {

enum class TransportKind { sim, tcp };

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::vector<SiteProfile> sites;
  double test_fraction = kDefaultTestFraction;
  TrainConfig train;  // epochs is unused; training length is `rounds`
  std::uint32_t rounds = 10;
  proto::AggregationMode mode = proto::AggregationMode::strict;
  TransportKind transport = TransportKind::sim;
  std::vector<sim::SiteLink> links;  // one per site
  double batch_cost_s = sim::kDefaultBatchCostS;
  double join_timeout_s = 600.0;
  double round_timeout_s = 600.0;
  std::vector<Scenario> scenarios{kAllScenarios.begin(), kAllScenarios.end()};
  HausdorffMode hausdorff = HausdorffMode::max;
  std::string output_dir = "run";

  std::vector<std::string> site_ids() const {
    std::vector<std::string> ids;
    for (const auto& s : sites) ids.push_back(s.site_id);
    return ids;
  }
  const sim::SiteLink& link(const std::string& site) const {
    for (const auto& l : links)
      if (l.site_id == site) return l;
    throw ConfigError("no link for site '" + site + "'");
  }
};

namespace detail {

using nlohmann::json;

inline void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError(where + ": unknown key '" + k + "'");
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

inline json profile_to_json(const SiteProfile& p) {
  return {{"site_id", p.site_id},
          {"n_samples", p.n_samples},
          {"grid_dims", {p.grid_dims.d, p.grid_dims.h, p.grid_dims.w}},
          {"spacing", p.spacing},
          {"intensity_mean", p.intensity_mean},
          {"intensity_std", p.intensity_std},
          {"class_prevalence",
           {{"Cons", p.class_prevalence[1]}, {"GGO", p.class_prevalence[2]}, {"PE", p.class_prevalence[3]}}},
          {"lesion_volume_scale", p.lesion_volume_scale},
          {"cc_count_regime", to_string(p.cc_count_regime)},
          {"seed", p.seed}};
}

inline SiteProfile profile_from_json(const json& j, std::uint64_t experiment_seed) {
  reject_unknown(j,
                 {"site_id", "n_samples", "grid_dims", "spacing", "intensity_mean", "intensity_std",
                  "class_prevalence", "lesion_volume_scale", "cc_count_regime", "seed"},
                 "site");
  SiteProfile p;
  p.site_id = j.at("site_id").get<std::string>();
  p.n_samples = get_or(j, "n_samples", p.n_samples);
  if (j.contains("grid_dims")) {
    const auto d = j.at("grid_dims").get<std::array<std::uint32_t, 3>>();
    p.grid_dims = {d[0], d[1], d[2]};
  }
  p.spacing = get_or(j, "spacing", p.spacing);
  p.intensity_mean = get_or(j, "intensity_mean", p.intensity_mean);
  p.intensity_std = get_or(j, "intensity_std", p.intensity_std);
  if (j.contains("class_prevalence")) {
    const auto& cp = j.at("class_prevalence");
    reject_unknown(cp, {"Cons", "GGO", "PE"}, "class_prevalence");
    p.class_prevalence[1] = get_or(cp, "Cons", p.class_prevalence[1]);
    p.class_prevalence[2] = get_or(cp, "GGO", p.class_prevalence[2]);
    p.class_prevalence[3] = get_or(cp, "PE", p.class_prevalence[3]);
  }
  p.lesion_volume_scale = get_or(j, "lesion_volume_scale", p.lesion_volume_scale);
  p.cc_count_regime = cc_regime_from_string(get_or<std::string>(j, "cc_count_regime", "few_large"));
  p.seed = get_or(j, "seed", derive_seed(experiment_seed, hash_string(p.site_id)));
  check_profile(p);
  return p;
}

inline json link_to_json(const sim::SiteLink& l) {
  json j{{"site_id", l.site_id},
         {"latency_ms", l.latency_ms},
         {"speed_factor", l.speed_factor},
         {"offline_rounds", std::vector<std::uint32_t>(l.offline_rounds.begin(), l.offline_rounds.end())}};
  j["crash_at_round"] = l.crash_at_round ? json(*l.crash_at_round) : json(nullptr);
  return j;
}

inline sim::SiteLink link_from_json(const json& j) {
  reject_unknown(j, {"site_id", "latency_ms", "speed_factor", "offline_rounds", "crash_at_round"}, "link");
  sim::SiteLink l;
  l.site_id = j.at("site_id").get<std::string>();
  l.latency_ms = get_or(j, "latency_ms", 0.0);
  l.speed_factor = get_or(j, "speed_factor", 1.0);
  if (j.contains("offline_rounds")) {
    const auto v = j.at("offline_rounds").get<std::vector<std::uint32_t>>();
    l.offline_rounds = {v.begin(), v.end()};
  }
  if (j.contains("crash_at_round") && !j.at("crash_at_round").is_null())
    l.crash_at_round = j.at("crash_at_round").get<std::uint32_t>();
  return l;
}

}  // namespace detail

inline nlohmann::json to_json(const ExperimentConfig& c) {
  using nlohmann::json;
  json sites = json::array();
  for (const auto& s : c.sites) sites.push_back(detail::profile_to_json(s));
  json links = json::array();
  for (const auto& l : c.links) links.push_back(detail::link_to_json(l));
  json scenarios = json::array();
  for (auto s : c.scenarios) scenarios.push_back(to_string(s));
  return {{"seed", c.seed},
          {"sites", sites},
          {"test_fraction", c.test_fraction},
          {"train",
           {{"batches_per_epoch", c.train.batches_per_epoch},
            {"batch_size", c.train.batch_size},
            {"learning_rate", c.train.learning_rate}}},
          {"rounds", c.rounds},
          {"aggregation", to_string(c.mode)},
          {"transport", c.transport == TransportKind::sim ? "sim" : "tcp"},
          {"links", links},
          {"batch_cost_s", c.batch_cost_s},
          {"join_timeout_s", c.join_timeout_s},
          {"round_timeout_s", c.round_timeout_s},
          {"scenarios", scenarios},
          {"hausdorff", c.hausdorff == HausdorffMode::max ? "max" : "p95"},
          {"output_dir", c.output_dir}};
}

inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  try {
    detail::reject_unknown(j,
                           {"seed", "sites", "test_fraction", "train", "rounds", "aggregation", "transport", "links",
                            "batch_cost_s", "join_timeout_s", "round_timeout_s", "scenarios", "hausdorff",
                            "output_dir"},
                           "experiment");
    ExperimentConfig c;
    c.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& s : j.at("sites")) c.sites.push_back(detail::profile_from_json(s, c.seed));
    if (c.sites.empty()) throw ConfigError("experiment: no sites");
    std::set<std::string> ids;
    for (const auto& s : c.sites)
      if (!ids.insert(s.site_id).second) throw ConfigError("experiment: duplicate site '" + s.site_id + "'");
    c.test_fraction = detail::get_or(j, "test_fraction", c.test_fraction);
    if (j.contains("train")) {
      const auto& t = j.at("train");
      detail::reject_unknown(t, {"batches_per_epoch", "batch_size", "learning_rate"}, "train");
      c.train.batches_per_epoch = detail::get_or(t, "batches_per_epoch", c.train.batches_per_epoch);
      c.train.batch_size = detail::get_or(t, "batch_size", c.train.batch_size);
      c.train.learning_rate = detail::get_or(t, "learning_rate", c.train.learning_rate);
    }
    c.train.epochs = 1;
    check_train_config(c.train);
    c.rounds = detail::get_or(j, "rounds", c.rounds);
    if (c.rounds < 1) throw ConfigError("experiment: rounds must be at least 1");
    c.mode = proto::aggregation_mode_from_string(detail::get_or<std::string>(j, "aggregation", "strict"));
    const auto transport = detail::get_or<std::string>(j, "transport", "sim");
    if (transport == "sim") c.transport = TransportKind::sim;
    else if (transport == "tcp") c.transport = TransportKind::tcp;
    else throw ConfigError("experiment: unknown transport '" + transport + "'");
    if (j.contains("links"))
      for (const auto& l : j.at("links")) c.links.push_back(detail::link_from_json(l));
    for (const auto& s : c.sites) {
      bool found = false;
      for (const auto& l : c.links) found = found || l.site_id == s.site_id;
      if (!found) c.links.push_back(sim::SiteLink{s.site_id, 0.0, 1.0, {}, std::nullopt});
    }
    std::sort(c.links.begin(), c.links.end(), [](const auto& a, const auto& b) { return a.site_id < b.site_id; });
    sim::check_links(c.links, c.site_ids());
    c.batch_cost_s = detail::get_or(j, "batch_cost_s", c.batch_cost_s);
    c.join_timeout_s = detail::get_or(j, "join_timeout_s", c.join_timeout_s);
    c.round_timeout_s = detail::get_or(j, "round_timeout_s", c.round_timeout_s);
    if (!(c.batch_cost_s >= 0) || !(c.join_timeout_s > 0) || !(c.round_timeout_s > 0))
      throw ConfigError("experiment: timing values must be positive");
    if (j.contains("scenarios")) {
      c.scenarios.clear();
      for (const auto& s : j.at("scenarios")) c.scenarios.push_back(scenario_from_string(s.get<std::string>()));
    }
    const auto hd = detail::get_or<std::string>(j, "hausdorff", "max");
    if (hd == "max") c.hausdorff = HausdorffMode::max;
    else if (hd == "p95") c.hausdorff = HausdorffMode::p95;
    else throw ConfigError("experiment: hausdorff must be max or p95");
    c.output_dir = detail::get_or<std::string>(j, "output_dir", c.output_dir);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
}

inline std::string canonical_string(const ExperimentConfig& c) { return to_json(c).dump(); }
inline Digest experiment_digest(const ExperimentConfig& c) { return sha256(canonical_string(c)); }

inline ExperimentConfig load_experiment(const std::filesystem::path& p) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(p));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
  return experiment_from_json(j);
}

}  // namespace fedrad
