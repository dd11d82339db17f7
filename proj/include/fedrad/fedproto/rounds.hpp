#pragma once

// Local work done by a site in one federated round, shared by the client,
// the local-model baseline and the evaluation tooling.

#include <cstdint>
#include <string>

#include "fedrad/core/rng.hpp"
#include "fedrad/fingerprint.hpp"
#include "fedrad/learner.hpp"

namespace fedrad::proto {

/// Training seed of `site_id` in round (or local epoch) `t`.
inline std::uint64_t round_seed(std::uint64_t experiment_seed, const std::string& site_id, std::uint32_t t) {
  return derive_seed(derive_seed(experiment_seed, hash_string(site_id)), t);
}

/// Exactly one local epoch starting from the global weights.
inline WeightVector local_round(const WeightVector& w_global, const TrainingPool& pool, const TrainConfig& train,
                                std::uint64_t experiment_seed, const std::string& site_id, std::uint32_t t) {
  TrainConfig c = train;
  c.epochs = 1;
  c.seed = round_seed(experiment_seed, site_id, t);
  return train_epochs(w_global, pool, c);
}

/// Non-federated baseline: `epochs` consecutive local epochs seeded exactly
/// like the rounds of a one-site federation.
inline WeightVector train_local(const ModelSetup& setup, const TrainingPool& pool, const std::string& site_id,
                                std::uint32_t epochs) {
  WeightVector w = setup.init;
  for (std::uint32_t e = 1; e <= epochs; ++e) w = local_round(w, pool, setup.train, setup.train.seed, site_id, e);
  return w;
}

}  // namespace fedrad::proto
