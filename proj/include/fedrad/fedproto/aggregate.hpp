#pragma once

#include <algorithm>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fedrad/core/error.hpp"
#include "fedrad/learner.hpp"

namespace fedrad::proto {

enum class AggregationMode { strict, tolerant };

inline std::string_view to_string(AggregationMode m) { return m == AggregationMode::strict ? "strict" : "tolerant"; }
inline AggregationMode aggregation_mode_from_string(std::string_view s) {
  if (s == "strict") return AggregationMode::strict;
  if (s == "tolerant") return AggregationMode::tolerant;
  throw ConfigError("unknown aggregation mode '" + std::string(s) + "'");
}

struct SiteDelta {
  std::string site_id;
  WeightVector delta;
};

/// Non-weighted federated update w + (sum of deltas) / n_sites.
///
/// Deltas are summed in ascending site_id order whatever order they arrived
/// in, so every route through the protocol produces the same bits.
inline WeightVector aggregate(const WeightVector& w, std::span<const SiteDelta> deltas, std::size_t n_sites) {
  if (n_sites == 0) throw Error("aggregate: n_sites must be positive");
  if (deltas.size() != n_sites)
    throw Error("aggregate: received " + std::to_string(deltas.size()) + " deltas for " + std::to_string(n_sites) +
                " sites");
  std::vector<const SiteDelta*> order;
  std::set<std::string> seen;
  for (const auto& d : deltas) {
    if (d.delta.size() != w.size())
      throw Error("aggregate: delta from '" + d.site_id + "' has length " + std::to_string(d.delta.size()) +
                  ", expected " + std::to_string(w.size()));
    if (!seen.insert(d.site_id).second) throw Error("aggregate: duplicate delta from '" + d.site_id + "'");
    order.push_back(&d);
  }
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->site_id < b->site_id; });

  std::vector<double> sum(w.size(), 0.0);
  for (const auto* d : order)
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += d->delta[i];
  WeightVector out = w;
  const auto n = static_cast<double>(n_sites);
  for (std::size_t i = 0; i < sum.size(); ++i) out[i] = w[i] + sum[i] / n;
  return out;
}

}  // namespace fedrad::proto
