#pragma once

// End-to-end study: generate or load site data, drop samples that fail
// validation, train local and federated models, evaluate and rank.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedrad/core/log.hpp"
#include "fedrad/dataset.hpp"
#include "fedrad/evalrank.hpp"
#include "fedrad/experiment.hpp"
#include "fedrad/fedproto/rounds.hpp"
#include "fedrad/fedproto/server.hpp"
#include "fedrad/fingerprint.hpp"
#include "fedrad/simnet.hpp"
#include "fedrad/validation.hpp"

namespace fedrad {

inline std::vector<SiteDataset> generate_sites(const ExperimentConfig& cfg) {
  std::vector<SiteDataset> out;
  for (const auto& p : cfg.sites) out.push_back(generate_site_dataset(p, cfg.test_fraction));
  return out;
}

/// Copy of `ds` without the samples that fail validation.
inline SiteDataset usable_samples(const SiteDataset& ds) {
  SiteDataset out{ds.site_id, {}, {}};
  auto keep = [&](const std::vector<Sample>& in, std::vector<Sample>& dst) {
    for (const auto& s : in) {
      if (validate_sample(s).empty()) dst.push_back(s);
      else log().warn("site '{}': sample '{}' failed validation; excluded", ds.site_id, s.sample_id);
    }
  };
  keep(ds.train, out.train);
  keep(ds.test, out.test);
  return out;
}

/// L_i: normalization from the site's own fingerprint, `rounds` local epochs.
inline TrainedModel train_local_model(const ExperimentConfig& cfg, const SiteDataset& ds) {
  const auto fp = compute_fingerprint(ds.train);
  const auto setup = derive_config(fp, cfg.seed, cfg.train);
  const auto pool = build_training_pool(ds.train, setup.features);
  return {proto::train_local(setup, pool, ds.site_id, cfg.rounds), setup.features};
}

/// Digest of a federated experiment over a subset of the roster.
inline Digest federation_digest(const Digest& experiment, const std::vector<std::string>& sites) {
  std::string key = to_hex(experiment) + "/fl";
  for (const auto& s : sites) key += "/" + s;
  return sha256(key);
}

inline sim::SimExperiment make_sim_experiment(const ExperimentConfig& cfg, const std::vector<SiteDataset>& sites,
                                              const Digest& digest, const std::filesystem::path& checkpoint = {}) {
  sim::SimExperiment e;
  for (const auto& ds : sites) {
    e.server.expected_sites.push_back(ds.site_id);
    proto::ClientConfig c;
    c.site_id = ds.site_id;
    c.train = ds.train;
    c.expected_seed = cfg.seed;
    c.expected_train = cfg.train;
    e.clients.push_back(std::move(c));
  }
  e.server.seed = cfg.seed;
  e.server.train = cfg.train;
  e.server.rounds = cfg.rounds;
  e.server.mode = cfg.mode;
  e.server.join_timeout_s = cfg.join_timeout_s;
  e.server.round_timeout_s = cfg.round_timeout_s;
  e.server.experiment_digest = federation_digest(digest, e.server.expected_sites);
  e.server.checkpoint_path = checkpoint;
  e.batch_cost_s = cfg.batch_cost_s;
  return e;
}

inline std::vector<sim::SiteLink> links_for(const ExperimentConfig& cfg, const std::vector<SiteDataset>& sites) {
  std::vector<sim::SiteLink> out;
  for (const auto& ds : sites) out.push_back(cfg.link(ds.site_id));
  return out;
}

/// Feature normalization every federation member derives from the averaged fingerprint.
inline FeatureConfig federated_features(const ExperimentConfig& cfg, const std::vector<SiteDataset>& sites) {
  std::vector<DatasetFingerprint> fps;
  for (const auto& ds : sites) fps.push_back(compute_fingerprint(ds.train));
  return derive_config(average_fingerprints(fps), cfg.seed, cfg.train).features;
}

struct FederatedRun {
  sim::SimResult sim;
  std::optional<TrainedModel> model;  // set when the run completed
};

inline FederatedRun train_federated_sim(const ExperimentConfig& cfg, const std::vector<SiteDataset>& sites,
                                        const Digest& digest, const std::filesystem::path& checkpoint = {},
                                        std::optional<proto::Checkpoint> resume_from = {}) {
  FederatedRun run;
  run.sim = sim::run_simulated(make_sim_experiment(cfg, sites, digest, checkpoint), links_for(cfg, sites),
                               std::move(resume_from));
  if (run.sim.server.status == proto::RunStatus::completed)
    run.model = TrainedModel{run.sim.server.weights, federated_features(cfg, sites)};
  return run;
}

inline std::vector<SiteDataset> without_site(const std::vector<SiteDataset>& sites, const std::string& id) {
  std::vector<SiteDataset> out;
  for (const auto& ds : sites)
    if (ds.site_id != id) out.push_back(ds);
  return out;
}

inline bool any_leave_out(const ExperimentConfig& cfg) {
  for (auto s : cfg.scenarios)
    if (needs_leave_out(s)) return true;
  return false;
}

struct StudyOutcome {
  ModelRegistry models;
  std::vector<ScenarioResult> results;
  std::map<Scenario, RankTable> ranks;
  sim::TimingReport timing;  // of the all-site federation
};

inline RankTable rank_scenario(const ScenarioResult& r) {
  return rank(score_cells(r.entries), {r.scenario == Scenario::generalization_without_local});
}

/// Runs the whole study in memory on the simulated network.
inline StudyOutcome run_study(const ExperimentConfig& cfg, const std::vector<SiteDataset>& raw_sites) {
  std::vector<SiteDataset> sites;
  for (const auto& ds : raw_sites) sites.push_back(usable_samples(ds));
  const auto digest = experiment_digest(cfg);

  StudyOutcome out;
  for (const auto& ds : sites) out.models.put(local_model_name(ds.site_id), train_local_model(cfg, ds));

  auto fl = train_federated_sim(cfg, sites, digest);
  if (!fl.model) throw Error("federated training did not complete: " + fl.sim.server.reason);
  out.models.put(fed_model_name(), *fl.model);
  out.timing = fl.sim.timing;

  if (any_leave_out(cfg) && sites.size() > 1)
    for (const auto& ds : sites) {
      auto rest = without_site(sites, ds.site_id);
      auto lo = train_federated_sim(cfg, rest, digest);
      if (!lo.model) throw Error("leave-out federation for '" + ds.site_id + "' did not complete");
      out.models.put(fed_leave_out_model_name(ds.site_id), *lo.model);
    }

  ScoreOptions opts;
  opts.hausdorff = cfg.hausdorff;
  for (auto s : cfg.scenarios) {
    auto res = run_scenario(s, sites, out.models, opts);
    out.ranks[s] = rank_scenario(res);
    out.results.push_back(std::move(res));
  }
  return out;
}

}  // namespace fedrad
