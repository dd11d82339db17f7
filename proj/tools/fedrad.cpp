// fedrad: command-line driver for the desk-scale federated study.
//
// One directory per run. Every artifact carries the experiment digest, either
// inline (JSON, manifests) or in a `<file>.meta.json` sidecar (weights, CSV).

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fedrad/dataset_io.hpp"
#include "fedrad/evalrank.hpp"
#include "fedrad/experiment.hpp"
#include "fedrad/fedproto/checkpoint.hpp"
#include "fedrad/fedproto/client.hpp"
#include "fedrad/fedproto/server.hpp"
#include "fedrad/fedproto/tcp.hpp"
#include "fedrad/study.hpp"
#include "fedrad/validation.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fedrad;

namespace {

enum Exit : int { kOk = 0, kConfig = 1, kValidation = 2, kAborted = 3 };

class DigestMismatch : public Error {
 public:
  using Error::Error;
};

struct Run {
  ExperimentConfig cfg;
  std::string digest;  // hex
  fs::path dir;

  fs::path data(const std::string& site) const { return dir / "data" / site; }
  fs::path model(const std::string& name) const { return dir / "models" / (name + ".frwt"); }
  fs::path checkpoint(const std::string& name) const { return dir / "checkpoints" / (name + ".frck"); }
};

Run open_run(const std::string& config, const std::string& out) {
  Run r;
  r.cfg = load_experiment(config);
  r.digest = to_hex(experiment_digest(r.cfg));
  r.dir = out.empty() ? fs::path(r.cfg.output_dir) : fs::path(out);
  return r;
}

fs::path sidecar(const fs::path& p) {
  auto s = p;
  s += ".meta.json";
  return s;
}

std::string file_sha(const fs::path& p) {
  const auto bytes = read_file(p);
  return to_hex(sha256(std::span<const std::byte>(bytes)));
}

void write_meta(const fs::path& p, const std::string& digest, json extra = json::object()) {
  extra["experiment_digest"] = digest;
  extra["sha256"] = file_sha(p);
  write_text(sidecar(p), extra.dump(2) + "\n");
}

/// Sidecar of `p`, after checking it belongs to `digest` and matches the file.
json check_meta(const fs::path& p, const std::string& digest) {
  if (!fs::exists(p)) throw IoError("missing artifact " + p.string());
  if (!fs::exists(sidecar(p))) throw DigestMismatch(p.string() + " has no digest sidecar");
  const auto meta = json::parse(read_text(sidecar(p)));
  const auto got = meta.value("experiment_digest", std::string{});
  if (got != digest) throw DigestMismatch(p.string() + " belongs to experiment " + got + ", not " + digest);
  if (meta.value("sha256", std::string{}) != file_sha(p)) throw DigestMismatch(p.string() + " changed after it was written");
  return meta;
}

json check_json(const fs::path& p, const std::string& digest) {
  if (!fs::exists(p)) throw IoError("missing artifact " + p.string());
  auto j = json::parse(read_text(p));
  const auto got = j.value("experiment_digest", std::string{});
  if (got != digest) throw DigestMismatch(p.string() + " belongs to experiment " + got + ", not " + digest);
  return j;
}

void save_model(const Run& r, const std::string& name, const TrainedModel& m) {
  const auto p = r.model(name);
  fs::create_directories(p.parent_path());
  save_weights(p, m.weights);
  write_meta(p, r.digest, {{"model", name}, {"features", to_json(m.features)}});
}

TrainedModel load_model(const Run& r, const std::string& name) {
  const auto meta = check_meta(r.model(name), r.digest);
  return {load_weights(r.model(name)), feature_config_from_json(meta.at("features"))};
}

SiteDataset load_site(const Run& r, const std::string& site) {
  const auto dir = r.data(site);
  const auto m = read_manifest(dir);
  if (m.experiment_digest != r.digest)
    throw DigestMismatch("site data in " + dir.string() + " was generated for another experiment");
  return read_site_dir(dir);
}

std::vector<SiteDataset> load_usable_sites(const Run& r) {
  std::vector<SiteDataset> out;
  for (const auto& id : r.cfg.site_ids()) out.push_back(usable_samples(load_site(r, id)));
  return out;
}

void print_findings(const ValidationReport& rep) {
  for (const auto& f : rep.findings)
    std::cout << rep.site_id << "\t" << f.sample_id << "\t" << to_string(f.code) << "\t" << f.detail << "\n";
  std::cout << rep.site_id << ": " << rep.samples.size() << " samples, " << rep.failures() << " failed\n";
}

json summary_json(const Summary& s) {
  return {{"count", s.count}, {"min", s.min}, {"max", s.max}, {"mean", s.mean}, {"median", s.median}};
}

// ---------------------------------------------------------------------------
// commands

int cmd_gen(const Run& r) {
  for (const auto& p : r.cfg.sites) {
    const auto ds = generate_site_dataset(p, r.cfg.test_fraction);
    const auto dir = r.data(p.site_id);
    if (fs::exists(dir)) fs::remove_all(dir);
    write_site_dir(ds, dir, p.seed, r.digest);
    std::cout << p.site_id << ": " << ds.train.size() << " train, " << ds.test.size() << " test -> " << dir.string()
              << "\n";
  }
  return kOk;
}

int cmd_validate(const std::optional<Run>& r, const std::vector<std::string>& site_dirs) {
  std::size_t failed = 0;
  if (r) {
    for (const auto& id : r->cfg.site_ids()) {
      const auto rep = validate_dataset(load_site(*r, id));
      auto j = to_json(rep);
      j["experiment_digest"] = r->digest;
      const auto out = r->dir / "validation" / (id + ".json");
      fs::create_directories(out.parent_path());
      write_text(out, j.dump(2) + "\n");
      print_findings(rep);
      failed += rep.failures();
    }
  }
  for (const auto& d : site_dirs) {
    const auto rep = validate_dataset(read_site_dir(d));
    print_findings(rep);
    failed += rep.failures();
  }
  return failed ? kValidation : kOk;
}

int cmd_characterize(const Run& r) {
  json sites = json::array();
  for (const auto& id : r.cfg.site_ids()) {
    const auto ds = usable_samples(load_site(r, id));
    const auto st = site_statistics(ds);
    json classes = json::object();
    for (const auto& c : st.classes)
      classes[std::string(class_name(c.label))] = {{"samples_with_class", c.samples_with_class},
                                                   {"volume_ml", c.volume_ml},
                                                   {"volume_summary", summary_json(c.volume_summary)},
                                                   {"component_counts", c.component_counts},
                                                   {"component_summary", summary_json(c.component_summary)}};
    sites.push_back({{"site_id", id},
                     {"n_samples", st.n_samples},
                     {"voxel_volume_mm3", summary_json(st.voxel_volume_summary)},
                     {"histogram_edges", st.histogram_edges},
                     {"histogram", st.histogram},
                     {"classes", classes},
                     {"fingerprint", to_json(compute_fingerprint(ds.train))}});
  }
  const auto out = r.dir / "characteristics.json";
  fs::create_directories(r.dir);
  write_text(out, json{{"experiment_digest", r.digest}, {"sites", sites}}.dump(2) + "\n");
  std::cout << "wrote " << out.string() << "\n";
  return kOk;
}

int cmd_train_local(const Run& r, const std::string& only) {
  for (const auto& ds : load_usable_sites(r)) {
    if (!only.empty() && ds.site_id != only) continue;
    save_model(r, local_model_name(ds.site_id), train_local_model(r.cfg, ds));
    std::cout << "trained " << r.model(local_model_name(ds.site_id)).string() << "\n";
  }
  return kOk;
}

int cmd_train_sim(const Run& r, bool resume_runs) {
  const auto sites = load_usable_sites(r);
  const auto digest = experiment_digest(r.cfg);

  std::vector<std::pair<std::string, std::vector<SiteDataset>>> federations{{fed_model_name(), sites}};
  if (any_leave_out(r.cfg) && sites.size() > 1)
    for (const auto& ds : sites) federations.push_back({fed_leave_out_model_name(ds.site_id), without_site(sites, ds.site_id)});

  for (const auto& [name, members] : federations) {
    const auto ckpt = r.checkpoint(name);
    fs::create_directories(ckpt.parent_path());
    std::optional<proto::Checkpoint> from;
    std::vector<std::string> ids;
    for (const auto& ds : members) ids.push_back(ds.site_id);
    if (resume_runs && fs::exists(ckpt)) {
      from = proto::resume(ckpt, federation_digest(digest, ids), r.cfg.seed);
      std::cout << name << ": resuming after round " << from->t << "\n";
    } else if (fs::exists(ckpt)) {
      fs::remove(ckpt);
    }
    auto run = train_federated_sim(r.cfg, members, digest, ckpt, from);
    if (!run.model) {
      std::cerr << name << ": " << to_string(run.sim.server.status) << ": " << run.sim.server.reason << "\n";
      std::cout << "checkpoint: " << (fs::exists(ckpt) ? ckpt.string() : std::string("none (no round completed)"))
                << "\n";
      return kAborted;
    }
    save_model(r, name, *run.model);
    if (name == fed_model_name()) {
      const auto timing = r.dir / "timing.csv";
      write_text(timing, run.sim.timing.to_csv());
      write_meta(timing, r.digest);
      std::cout << name << ": " << run.sim.server.rounds_completed << " rounds, simulated wall "
                << run.sim.timing.total_wall_s() << " s\n";
    } else {
      std::cout << name << ": " << run.sim.server.rounds_completed << " rounds\n";
    }
  }
  return kOk;
}

int cmd_serve(const Run& r, std::uint16_t port, const std::string& bind, const std::string& port_file,
              const std::string& resume_path) {
  proto::ServerConfig sc;
  sc.expected_sites = r.cfg.site_ids();
  sc.seed = r.cfg.seed;
  sc.train = r.cfg.train;
  sc.rounds = r.cfg.rounds;
  sc.mode = r.cfg.mode;
  sc.join_timeout_s = r.cfg.join_timeout_s;
  sc.round_timeout_s = r.cfg.round_timeout_s;
  sc.experiment_digest = federation_digest(experiment_digest(r.cfg), sc.expected_sites);
  sc.checkpoint_path = r.checkpoint(fed_model_name());
  fs::create_directories(sc.checkpoint_path.parent_path());

  std::optional<proto::Checkpoint> from;
  if (!resume_path.empty()) from = proto::resume(resume_path, sc.experiment_digest, sc.seed);

  proto::TcpServerTransport transport(port, bind);
  std::cout << "listening on " << bind << ":" << transport.port() << std::endl;
  if (!port_file.empty()) write_text(port_file, std::to_string(transport.port()) + "\n");

  const auto res = proto::run_server(sc, transport, from);
  if (res.status != proto::RunStatus::completed) {
    std::cerr << "server " << to_string(res.status) << ": " << res.reason << "\n";
    std::cout << "checkpoint: "
              << (fs::exists(sc.checkpoint_path) ? sc.checkpoint_path.string() : std::string("none (no round completed)"))
              << "\n";
    return kAborted;
  }
  save_model(r, fed_model_name(), {res.weights, *res.features});
  std::cout << "completed " << res.rounds_completed << " rounds -> " << r.model(fed_model_name()).string() << "\n";
  return kOk;
}

int cmd_join(const std::string& site_dir, const std::string& server, const std::string& config,
             const std::string& state_dir, double idle_limit) {
  const auto ds = usable_samples(read_site_dir(site_dir));
  proto::ClientConfig cc;
  cc.site_id = ds.site_id;
  cc.train = ds.train;
  if (!config.empty()) {
    const auto cfg = load_experiment(config);
    cc.expected_seed = cfg.seed;
    cc.expected_train = cfg.train;
  }
  if (!state_dir.empty()) {
    cc.state_dir = state_dir;
    fs::create_directories(cc.state_dir);
  }
  const auto [host, port] = proto::parse_endpoint(server);
  proto::SiteClient client(cc);
  proto::TcpClientTransport transport(host, port, 30.0);
  proto::ClientRunOptions opts;
  opts.idle_limit_s = idle_limit;
  const auto res = proto::run_client(client, transport, opts);
  if (res.status != proto::ClientStatus::completed) {
    std::cerr << ds.site_id << ": " << (res.reason.empty() ? "run did not complete" : res.reason) << "\n";
    std::cout << "last acknowledged round: " << res.last_acked << "\n";
    return kAborted;
  }
  std::cout << ds.site_id << ": received final model";
  if (!state_dir.empty()) std::cout << " -> " << (fs::path(state_dir) / proto::kFinalModelFile).string();
  std::cout << "\n";
  return kOk;
}

int cmd_evaluate(const Run& r) {
  const auto sites = load_usable_sites(r);
  std::vector<std::string> roster;
  for (const auto& ds : sites) roster.push_back(ds.site_id);

  ModelRegistry reg;
  for (auto s : r.cfg.scenarios)
    for (const auto& site : roster)
      for (const auto& v : scenario_variants(s, site, roster))
        for (const auto& name : required_models(v, roster))
          if (!reg.has(name)) reg.put(name, load_model(r, name));

  ScoreOptions opts;
  opts.hausdorff = r.cfg.hausdorff;
  std::vector<ScenarioResult> results;
  for (auto s : r.cfg.scenarios) results.push_back(run_scenario(s, sites, reg, opts));
  const auto out = r.dir / "metrics.csv";
  write_text(out, metrics_csv(results));
  write_meta(out, r.digest);
  std::cout << "wrote " << out.string() << "\n";
  return kOk;
}

int cmd_rank(const Run& r) {
  const auto metrics = r.dir / "metrics.csv";
  check_meta(metrics, r.digest);
  json scenarios = json::object();
  for (const auto& res : parse_metrics_csv(read_text(metrics))) {
    const auto t = rank_scenario(res);
    const auto name = std::string(to_string(res.scenario));
    const auto csv = r.dir / "ranks" / (name + ".csv");
    fs::create_directories(csv.parent_path());
    write_text(csv, ranks_csv(t));
    write_meta(csv, r.digest);
    scenarios[name] = {{"r", t.r}, {"ordering", t.ordering()}, {"n_sites", t.n_sites}, {"n_metrics", t.n_metrics}};
    std::cout << name << ":";
    for (const auto& m : t.ordering()) std::cout << " " << m << "=" << fmt::format("{:.3f}", t.r.at(m));
    std::cout << "\n";
  }
  write_text(r.dir / "ranks.json", json{{"experiment_digest", r.digest}, {"scenarios", scenarios}}.dump(2) + "\n");
  return kOk;
}

int cmd_report(const Run& r) {
  for (const auto& id : r.cfg.site_ids()) {
    const auto m = read_manifest(r.data(id));
    if (m.experiment_digest != r.digest) throw DigestMismatch("site data for '" + id + "' belongs to another experiment");
  }
  const auto metrics = r.dir / "metrics.csv";
  check_meta(metrics, r.digest);
  const auto ranks = check_json(r.dir / "ranks.json", r.digest);
  json timing = nullptr;
  if (fs::exists(r.dir / "timing.csv")) {
    check_meta(r.dir / "timing.csv", r.digest);
    timing = read_text(r.dir / "timing.csv");
  }
  json characteristics = nullptr;
  if (fs::exists(r.dir / "characteristics.json"))
    characteristics = check_json(r.dir / "characteristics.json", r.digest).at("sites");
  json validation = json::object();
  for (const auto& id : r.cfg.site_ids()) {
    const auto p = r.dir / "validation" / (id + ".json");
    if (fs::exists(p)) validation[id] = check_json(p, r.digest);
  }
  for (const auto& [name, info] : ranks.at("scenarios").items()) {
    const auto p = r.dir / "ranks" / (name + ".csv");
    check_meta(p, r.digest);
  }

  // per (scenario, model, site) means: the analogue of the supplementary tables
  std::string tables = "scenario,model,site,DSC,NSD,HSD,NAVE\n";
  json table_rows = json::array();
  for (const auto& res : parse_metrics_csv(read_text(metrics)))
    for (const auto& e : res.entries) {
      tables += fmt::format("{},{},{},{},{},{},{}\n", to_string(res.scenario), e.model, e.site, e.summary[Metric::DSC],
                            e.summary[Metric::NSD], e.summary[Metric::HSD], e.summary[Metric::NAVE]);
      table_rows.push_back({{"scenario", to_string(res.scenario)},
                            {"model", e.model},
                            {"site", e.site},
                            {"DSC", e.summary[Metric::DSC]},
                            {"NSD", e.summary[Metric::NSD]},
                            {"HSD", e.summary[Metric::HSD]},
                            {"NAVE", e.summary[Metric::NAVE]}});
    }
  const auto tables_path = r.dir / "report_tables.csv";
  write_text(tables_path, tables);
  write_meta(tables_path, r.digest);

  const json report{{"experiment_digest", r.digest},
                    {"config", to_json(r.cfg)},
                    {"ranks", ranks.at("scenarios")},
                    {"tables", table_rows},
                    {"timing_csv", timing},
                    {"characteristics", characteristics},
                    {"validation", validation}};
  write_text(r.dir / "report.json", report.dump(2) + "\n");
  std::cout << "wrote " << (r.dir / "report.json").string() << " and " << tables_path.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fedrad: federated lesion segmentation study at desk scale"};
  app.require_subcommand(1);

  std::string config, out, only_site, site_dir, server, state_dir, bind = "127.0.0.1", port_file, resume_path;
  std::vector<std::string> site_dirs;
  std::uint16_t port = 7878;
  double idle_limit = 3600.0;
  bool resume_runs = false;

  auto with_config = [&](CLI::App* sub, bool required = true) {
    auto* opt = sub->add_option("-c,--config", config, "Experiment config (JSON)");
    if (required) opt->required();
    sub->add_option("-o,--out", out, "Run directory (default: output_dir from the config)");
  };

  auto* gen = app.add_subcommand("gen", "Generate synthetic site datasets");
  with_config(gen);
  auto* validate = app.add_subcommand("validate", "Validate site datasets; exit 2 on any failure");
  with_config(validate, false);
  validate->add_option("--site", site_dirs, "Site directory to validate (repeatable)");
  auto* characterize = app.add_subcommand("characterize", "Per-site data characteristics");
  with_config(characterize);
  auto* train_local = app.add_subcommand("train-local", "Train the local models L_i");
  with_config(train_local);
  train_local->add_option("--site", only_site, "Train only this site");
  auto* train_sim = app.add_subcommand("train-sim", "Federated training on the simulated network");
  with_config(train_sim);
  train_sim->add_flag("--resume", resume_runs, "Resume each federation from its checkpoint");
  auto* serve = app.add_subcommand("serve", "Coordinate a federated run over TCP");
  with_config(serve);
  serve->add_option("--port", port, "Listen port (0 picks a free one)");
  serve->add_option("--bind", bind, "Listen address");
  serve->add_option("--port-file", port_file, "Write the bound port here");
  serve->add_option("--resume", resume_path, "Checkpoint to resume from");
  auto* join = app.add_subcommand("join", "Join a federated run as a site");
  join->add_option("--site", site_dir, "Site directory")->required();
  join->add_option("--server", server, "host:port")->required();
  join->add_option("-c,--config", config, "Local copy of the experiment config, checked against the server");
  join->add_option("--state", state_dir, "Where to keep client state and the final model");
  join->add_option("--idle-limit", idle_limit, "Give up after this many seconds without a message");
  auto* evaluate = app.add_subcommand("evaluate", "Score every scenario's variants on the test splits");
  with_config(evaluate);
  auto* rank_cmd = app.add_subcommand("rank", "Rank variants from metrics.csv");
  with_config(rank_cmd);
  auto* report = app.add_subcommand("report", "Join metrics, ranks and timing into one bundle");
  with_config(report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (join->parsed()) return cmd_join(site_dir, server, config, state_dir, idle_limit);
    if (validate->parsed()) {
      if (config.empty() && site_dirs.empty()) throw ConfigError("validate needs --config or --site");
      std::optional<Run> r;
      if (!config.empty()) r = open_run(config, out);
      return cmd_validate(r, site_dirs);
    }
    const auto r = open_run(config, out);
    if (gen->parsed()) return cmd_gen(r);
    if (characterize->parsed()) return cmd_characterize(r);
    if (train_local->parsed()) return cmd_train_local(r, only_site);
    if (train_sim->parsed()) return cmd_train_sim(r, resume_runs);
    if (serve->parsed()) return cmd_serve(r, port, bind, port_file, resume_path);
    if (evaluate->parsed()) return cmd_evaluate(r);
    if (rank_cmd->parsed()) return cmd_rank(r);
    if (report->parsed()) return cmd_report(r);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  }
  return kConfig;
}
