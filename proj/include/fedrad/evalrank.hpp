#pragma once

// Model roster, evaluation scenarios and rank aggregation.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <fmt/format.h>

#include "fedrad/core/error.hpp"
#include "fedrad/dataset.hpp"
#include "fedrad/learner.hpp"
#include "fedrad/metrics.hpp"

namespace fedrad {

// ---------------------------------------------------------------------------
// trained models

struct TrainedModel {
  WeightVector weights;
  FeatureConfig features;
};

inline std::string local_model_name(const std::string& site) { return "L_" + site; }
inline std::string fed_model_name() { return "FL"; }
inline std::string fed_leave_out_model_name(const std::string& site) { return "FL_leave_" + site + "_out"; }

class ModelRegistry {
 public:
  void put(const std::string& name, TrainedModel m) { models_[name] = std::move(m); }
  bool has(const std::string& name) const { return models_.count(name) > 0; }
  const TrainedModel& get(const std::string& name) const {
    auto it = models_.find(name);
    if (it == models_.end()) throw Error("model '" + name + "' has not been trained");
    return it->second;
  }
  const std::map<std::string, TrainedModel>& all() const { return models_; }

 private:
  std::map<std::string, TrainedModel> models_;
};

// ---------------------------------------------------------------------------
// variants

enum class VariantKind {
  Local,
  ForeignLocal,
  Ensemble,
  EnsembleLeaveOut,
  Fed,
  FedLeaveOut,
  SpecEnsemble,
  SpecFed,
  SpecFedLeaveOut,
};

struct ModelVariant {
  VariantKind kind = VariantKind::Local;
  std::string site;  // i for site-specific variants, j for ForeignLocal

  friend bool operator==(const ModelVariant&, const ModelVariant&) = default;
};

/// Column label used in rank tables. Site-specific variants share one label
/// across sites (L_i is "the local model of whichever site is evaluated").
inline std::string variant_label(const ModelVariant& v) {
  switch (v.kind) {
    case VariantKind::Local: return "L_i";
    case VariantKind::ForeignLocal: return "L_" + v.site;
    case VariantKind::Ensemble: return "E";
    case VariantKind::EnsembleLeaveOut: return "E_leave-i-out";
    case VariantKind::Fed: return "FL";
    case VariantKind::FedLeaveOut: return "FL_leave-i-out";
    case VariantKind::SpecEnsemble: return "Spec(E)";
    case VariantKind::SpecFed: return "Spec(FL)";
    case VariantKind::SpecFedLeaveOut: return "Spec(FL_leave-i-out)";
  }
  return "?";
}

/// Weighted ensemble members realizing `v` over the sites in `roster`.
inline std::vector<EnsembleMember> resolve_variant(const ModelVariant& v, const ModelRegistry& reg,
                                                   const std::vector<std::string>& roster) {
  auto member = [&](const std::string& name, double share) {
    const auto& m = reg.get(name);
    return EnsembleMember{m.weights, m.features, share};
  };
  auto in_roster = [&](const std::string& s) {
    if (std::find(roster.begin(), roster.end(), s) == roster.end())
      throw Error("site '" + s + "' is not in the roster");
  };
  std::vector<EnsembleMember> out;
  const double n = static_cast<double>(roster.size());
  switch (v.kind) {
    case VariantKind::Local:
    case VariantKind::ForeignLocal:
      in_roster(v.site);
      out.push_back(member(local_model_name(v.site), 1.0));
      break;
    case VariantKind::Ensemble:
      for (const auto& s : roster) out.push_back(member(local_model_name(s), 1.0 / n));
      break;
    case VariantKind::EnsembleLeaveOut:
      in_roster(v.site);
      if (roster.size() < 2) throw Error("leave-out ensemble needs at least two sites");
      for (const auto& s : roster)
        if (s != v.site) out.push_back(member(local_model_name(s), 1.0 / (n - 1.0)));
      break;
    case VariantKind::Fed: out.push_back(member(fed_model_name(), 1.0)); break;
    case VariantKind::FedLeaveOut:
      in_roster(v.site);
      out.push_back(member(fed_leave_out_model_name(v.site), 1.0));
      break;
    case VariantKind::SpecEnsemble:
      // half the mass on the full ensemble, half on the local model
      in_roster(v.site);
      for (const auto& s : roster) out.push_back(member(local_model_name(s), 0.5 / n));
      out.push_back(member(local_model_name(v.site), 0.5));
      break;
    case VariantKind::SpecFed:
      in_roster(v.site);
      out.push_back(member(fed_model_name(), 0.5));
      out.push_back(member(local_model_name(v.site), 0.5));
      break;
    case VariantKind::SpecFedLeaveOut:
      in_roster(v.site);
      out.push_back(member(fed_leave_out_model_name(v.site), 0.5));
      out.push_back(member(local_model_name(v.site), 0.5));
      break;
  }
  return out;
}

/// Model names a variant needs.
inline std::vector<std::string> required_models(const ModelVariant& v, const std::vector<std::string>& roster) {
  std::vector<std::string> out;
  switch (v.kind) {
    case VariantKind::Local:
    case VariantKind::ForeignLocal: out.push_back(local_model_name(v.site)); break;
    case VariantKind::Ensemble:
    case VariantKind::SpecEnsemble:
      for (const auto& s : roster) out.push_back(local_model_name(s));
      break;
    case VariantKind::EnsembleLeaveOut:
      for (const auto& s : roster)
        if (s != v.site) out.push_back(local_model_name(s));
      break;
    case VariantKind::Fed: out.push_back(fed_model_name()); break;
    case VariantKind::FedLeaveOut: out.push_back(fed_leave_out_model_name(v.site)); break;
    case VariantKind::SpecFed: out = {fed_model_name(), local_model_name(v.site)}; break;
    case VariantKind::SpecFedLeaveOut: out = {fed_leave_out_model_name(v.site), local_model_name(v.site)}; break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// scenarios

enum class Scenario { personalization, generalization_without_local, generalization_with_local };

inline constexpr std::array<Scenario, 3> kAllScenarios{Scenario::personalization,
                                                       Scenario::generalization_without_local,
                                                       Scenario::generalization_with_local};

inline constexpr std::string_view to_string(Scenario s) noexcept {
  switch (s) {
    case Scenario::personalization: return "personalization";
    case Scenario::generalization_without_local: return "generalization_without_local";
    case Scenario::generalization_with_local: return "generalization_with_local";
  }
  return "?";
}

inline Scenario scenario_from_string(std::string_view s) {
  for (auto sc : kAllScenarios)
    if (to_string(sc) == s) return sc;
  throw ConfigError("unknown scenario '" + std::string(s) + "'");
}

/// Whether the scenario needs the per-site leave-out federated models.
inline bool needs_leave_out(Scenario s) { return s != Scenario::personalization; }

/// Variants compared when evaluating on site `i`.
inline std::vector<ModelVariant> scenario_variants(Scenario s, const std::string& i,
                                                   const std::vector<std::string>& roster) {
  using K = VariantKind;
  switch (s) {
    case Scenario::personalization:
      return {{K::Local, i}, {K::Ensemble, {}}, {K::Fed, {}}, {K::SpecEnsemble, i}, {K::SpecFed, i}};
    case Scenario::generalization_without_local: {
      std::vector<ModelVariant> v;
      for (const auto& j : roster)
        if (j != i) v.push_back({K::ForeignLocal, j});
      v.push_back({K::EnsembleLeaveOut, i});
      v.push_back({K::FedLeaveOut, i});
      return v;
    }
    case Scenario::generalization_with_local:
      return {{K::Local, i}, {K::Ensemble, {}}, {K::FedLeaveOut, i}, {K::SpecEnsemble, i}, {K::SpecFedLeaveOut, i}};
  }
  return {};
}

struct EvalEntry {
  std::string model;  // variant label
  std::string site;
  std::vector<MetricRecord> records;
  MetricSummary summary;
};

struct ScenarioResult {
  Scenario scenario = Scenario::personalization;
  std::vector<EvalEntry> entries;  // by site, then variant order
};

/// Evaluates every variant of the scenario on every roster site's test split.
inline ScenarioResult run_scenario(Scenario s, const std::vector<SiteDataset>& sites, const ModelRegistry& reg,
                                   const ScoreOptions& opts = {}) {
  std::vector<std::string> roster;
  for (const auto& ds : sites) roster.push_back(ds.site_id);
  if (std::set<std::string>(roster.begin(), roster.end()).size() != roster.size())
    throw Error("run_scenario: duplicate site in roster");
  if (needs_leave_out(s) && roster.size() < 2) throw Error("leave-out scenarios need at least two sites");

  ScenarioResult out;
  out.scenario = s;
  for (const auto& ds : sites) {
    if (ds.test.empty()) throw Error("site '" + ds.site_id + "' has no test samples");
    for (const auto& v : scenario_variants(s, ds.site_id, roster)) {
      const auto members = resolve_variant(v, reg, roster);
      EvalEntry e{variant_label(v), ds.site_id, {}, {}};
      for (const auto& t : ds.test) {
        const auto pred = ensemble_predict(members, t.volume);
        auto recs = score_sample(pred, t, opts);
        e.records.insert(e.records.end(), recs.begin(), recs.end());
      }
      e.summary = summarize(e.records, ds.site_id);
      out.entries.push_back(std::move(e));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// ranking

struct ScoreCell {
  std::string model;
  std::string site;
  Metric metric = Metric::DSC;
  double value = 0.0;
};

struct RankCell {
  std::string model;
  std::string site;
  Metric metric = Metric::DSC;
  double rank = 0.0;
};

struct RankTable {
  std::vector<RankCell> cells;          // by site, metric, then model
  std::map<std::string, double> r;      // mean rank per model
  std::size_t n_sites = 0;
  std::size_t n_metrics = 0;

  /// Models by ascending mean rank (best first), ties by name.
  std::vector<std::string> ordering() const {
    std::vector<std::string> names;
    for (const auto& [m, v] : r) names.push_back(m);
    std::stable_sort(names.begin(), names.end(), [&](const auto& a, const auto& b) { return r.at(a) < r.at(b); });
    return names;
  }
};

struct RankOptions {
  // Let a model be missing from a whole site (e.g. a site's own local model
  // in the generalization-without-local scenario). A model present at a site
  // must still have every metric there.
  bool allow_absent_models = false;
};

/// Fractional ranks per (site, metric); r is the mean of a model's ranks.
inline RankTable rank(const std::vector<ScoreCell>& cells, const RankOptions& opts = {}) {
  std::set<std::string> models;
  std::map<std::string, std::map<Metric, std::map<std::string, double>>> grid;  // site -> metric -> model -> value
  for (const auto& c : cells) {
    if (!std::isfinite(c.value)) throw Error("rank: non-finite value for " + c.model + " at " + c.site);
    if (!grid[c.site][c.metric].emplace(c.model, c.value).second)
      throw Error("rank: duplicate cell for " + c.model + " at " + c.site + " / " + std::string(to_string(c.metric)));
    models.insert(c.model);
  }
  if (grid.empty()) throw Error("rank: no scores");

  std::set<Metric> metrics;
  for (const auto& [site, by_metric] : grid)
    for (const auto& [m, vals] : by_metric) metrics.insert(m);

  RankTable t;
  t.n_sites = grid.size();
  t.n_metrics = metrics.size();
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (const auto& [site, by_metric] : grid) {
    std::set<std::string> present;
    for (const auto& [m, vals] : by_metric)
      for (const auto& [model, v] : vals) present.insert(model);
    for (auto m : metrics) {
      auto it = by_metric.find(m);
      const std::size_t have = it == by_metric.end() ? 0 : it->second.size();
      if (have != present.size())
        throw Error("rank: missing " + std::string(to_string(m)) + " value at site '" + site + "'");
    }
    if (!opts.allow_absent_models && present.size() != models.size())
      throw Error("rank: site '" + site + "' lacks scores for some models");

    for (auto m : metrics) {
      std::vector<std::pair<double, std::string>> order;
      for (const auto& [model, v] : by_metric.at(m)) order.emplace_back(higher_is_better(m) ? -v : v, model);
      std::sort(order.begin(), order.end());
      for (std::size_t a = 0; a < order.size();) {
        std::size_t b = a;
        while (b + 1 < order.size() && order[b + 1].first == order[a].first) ++b;
        const double avg = (static_cast<double>(a + 1) + static_cast<double>(b + 1)) / 2.0;
        for (std::size_t k = a; k <= b; ++k) {
          t.cells.push_back({order[k].second, site, m, avg});
          acc[order[k].second].first += avg;
          ++acc[order[k].second].second;
        }
        a = b + 1;
      }
    }
  }
  for (const auto& [model, sn] : acc) t.r[model] = sn.first / static_cast<double>(sn.second);
  return t;
}

inline std::vector<ScoreCell> score_cells(const std::vector<EvalEntry>& entries) {
  std::vector<ScoreCell> out;
  for (const auto& e : entries)
    for (auto m : kAllMetrics) out.push_back({e.model, e.site, m, e.summary[m]});
  return out;
}

// ---------------------------------------------------------------------------
// metrics.csv: scenario,model,site,sample,class,metric,value,status

inline constexpr std::string_view kMetricsCsvHeader = "scenario,model,site,sample,class,metric,value,status";

inline std::string metrics_csv(const std::vector<ScenarioResult>& results) {
  std::string s(kMetricsCsvHeader);
  s += '\n';
  for (const auto& res : results)
    for (const auto& e : res.entries)
      for (const auto& r : e.records) {
        const std::string value = included(r.status) ? fmt::format("{}", r.value) : std::string();
        s += fmt::format("{},{},{},{},{},{},{},{}\n", to_string(res.scenario), e.model, e.site, r.sample_id,
                         class_name(r.cls), to_string(r.metric), value, to_string(r.status));
      }
  return s;
}

inline Label class_from_name(std::string_view s) {
  for (auto c : {Label::background, Label::cons, Label::ggo, Label::pe})
    if (class_name(c) == s) return c;
  throw Error("unknown class '" + std::string(s) + "'");
}

/// Parses metrics.csv back into per-(scenario) entries with recomputed summaries.
inline std::vector<ScenarioResult> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kMetricsCsvHeader) throw Error("metrics.csv: unexpected header");
  std::map<Scenario, std::vector<EvalEntry>> by_scenario;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::string field;
    std::istringstream ls(line);
    while (std::getline(ls, field, ',')) f.push_back(field);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 8) throw Error("metrics.csv line " + std::to_string(lineno) + ": expected 8 fields");
    const auto sc = scenario_from_string(f[0]);
    MetricRecord r;
    r.sample_id = f[3];
    r.cls = class_from_name(f[4]);
    r.metric = metric_from_string(f[5]);
    r.status = record_status_from_string(f[7]);
    if (included(r.status)) {
      try {
        r.value = std::stod(f[6]);
      } catch (const std::exception&) {
        throw Error("metrics.csv line " + std::to_string(lineno) + ": bad value '" + f[6] + "'");
      }
    }
    auto& entries = by_scenario[sc];
    auto it = std::find_if(entries.begin(), entries.end(),
                           [&](const EvalEntry& e) { return e.model == f[1] && e.site == f[2]; });
    if (it == entries.end()) {
      entries.push_back({f[1], f[2], {}, {}});
      it = std::prev(entries.end());
    }
    it->records.push_back(std::move(r));
  }
  std::vector<ScenarioResult> out;
  for (auto& [sc, entries] : by_scenario) {
    for (auto& e : entries) e.summary = summarize(e.records, e.site);
    out.push_back({sc, std::move(entries)});
  }
  return out;
}

inline std::string ranks_csv(const RankTable& t) {
  std::string s = "model,site,metric,rank\n";
  for (const auto& c : t.cells) s += fmt::format("{},{},{},{}\n", c.model, c.site, to_string(c.metric), c.rank);
  return s;
}

}  // namespace fedrad
