#include "cvnet/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "cvnet/checkpoint.hpp"
#include "cvnet/config_json.hpp"
#include "cvnet/dispatch.hpp"
#include "cvnet/policy_evaluation.hpp"
#include "cvnet/simulator.hpp"
#include "cvnet/transfer.hpp"
#include "cvnet/value_function.hpp"

#ifndef CVNET_VERSION
#define CVNET_VERSION "0.0.0"
#endif

namespace cvnet {

namespace fs = std::filesystem;
using nlohmann::json;

const char* code_version() { return CVNET_VERSION; }

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const DataError*>(&e)) return 3;
  if (dynamic_cast<const DivergenceError*>(&e)) return 4;
  return 1;
}

std::string file_hash(const std::string& path) { return hex64(fnv1a64(read_file_bytes(path))); }

namespace {

json load_json_file(const std::string& path) {
  if (!fs::exists(path)) throw DataError("missing file: " + path);
  const std::string text = read_file_bytes(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

std::vector<std::string> as_list(const json& j) {
  if (j.is_null()) return {};
  if (j.is_string()) return {j.get<std::string>()};
  return j.get<std::vector<std::string>>();
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

// Header-keyed rows of a small CSV file.
std::vector<std::map<std::string, std::string>> read_csv_rows(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  std::vector<std::string> header;
  std::vector<std::map<std::string, std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto cells = split_csv_line(line);
    if (header.empty()) {
      header = cells;
      continue;
    }
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < header.size() && i < cells.size(); ++i) row[header[i]] = cells[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

// Per-command bookkeeping: resolved config, inputs read, outputs written.
struct Run {
  std::string command;
  json request;
  json config = json::object();
  fs::path config_dir = ".";
  fs::path out;
  std::uint64_t seed = 1;
  std::vector<std::string> inputs;
  std::vector<std::pair<std::string, std::string>> outputs;  // name, hash
  const PipelineEnv& env;

  Run(std::string cmd, json req, const PipelineEnv& e,
      std::initializer_list<std::string_view> extra_keys)
      : command(std::move(cmd)), request(std::move(req)), env(e) {
    if (request.is_null()) request = json::object();
    std::vector<std::string_view> allowed{"config", "seed", "out"};
    allowed.insert(allowed.end(), extra_keys.begin(), extra_keys.end());
    if (!request.is_object()) throw ConfigError(command + ": request must be an object");
    for (const auto& [k, v] : request.items()) {
      if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) {
        throw ConfigError(command + ": unknown option '" + k + "'");
      }
    }
    if (!request.contains("out")) throw ConfigError(command + ": --out is required");
    out = request.at("out").get<std::string>();
    read_optional(request, "seed", seed, command);
    if (request.contains("config")) {
      const std::string path = request.at("config").get<std::string>();
      config = load_json_file(path);
      if (!config.is_object()) throw ConfigError(path + ": expected a JSON object");
      config_dir = fs::path(path).parent_path();
      if (config_dir.empty()) config_dir = ".";
      inputs.push_back(path);
    }
  }

  // Request value, else config value.
  json option(const char* key) const {
    if (request.contains(key)) return request.at(key);
    if (config.contains(key)) return config.at(key);
    return nullptr;
  }

  // Paths from the request are taken as given; paths from the config file
  // are relative to the config file.
  std::string path_option(const char* key) const {
    if (request.contains(key)) return request.at(key).get<std::string>();
    if (config.contains(key)) return resolve(config.at(key).get<std::string>());
    return {};
  }
  std::vector<std::string> path_list(const char* key) const {
    if (request.contains(key)) return as_list(request.at(key));
    std::vector<std::string> out;
    if (config.contains(key)) {
      for (const auto& p : as_list(config.at(key))) out.push_back(resolve(p));
    }
    return out;
  }
  std::string resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? p : (config_dir / path).lexically_normal().string();
  }

  void input(const std::string& path) { inputs.push_back(path); }

  void write(const std::string& name, const std::string& bytes) {
    fs::create_directories(out);
    write_file_bytes((out / name).string(), bytes);
    outputs.emplace_back(name, hex64(fnv1a64(bytes)));
  }

  void say(const std::string& msg) const {
    if (env.log) *env.log << msg << '\n';
  }
  void warn(const std::string& msg) const {
    if (env.warn) *env.warn << "warning: " << msg << '\n';
  }

  json finish(json summary) {
    json in = json::array();
    for (const auto& p : inputs) in.push_back({{"path", p}, {"fnv1a64", file_hash(p)}});
    json outs = json::array();
    for (const auto& [n, h] : outputs) outs.push_back({{"name", n}, {"fnv1a64", h}});
    const json record = {{"command", command},     {"code_version", code_version()},
                         {"request", request},     {"config", config},
                         {"inputs", in},           {"outputs", outs},
                         {"summary", summary}};
    fs::create_directories(out);
    write_file_bytes((out / "run.json").string(), record.dump(2) + "\n");
    return summary;
  }
};

// ---------------------------------------------------------------- ingest

json cmd_ingest(const json& req, const PipelineEnv& env) {
  Run run("ingest", req, env, {"trajectories", "features", "index_config"});
  std::optional<IndexConfig> explicit_index;
  if (const std::string p = run.path_option("index_config"); !p.empty()) {
    explicit_index = load_json_file(p).get<IndexConfig>();
    run.input(p);
  } else if (run.config.contains("index")) {
    explicit_index = run.config.at("index").get<IndexConfig>();
  }
  const auto trajectories = run.path_list("trajectories");
  const auto features = run.path_list("features");
  if (trajectories.empty()) throw ConfigError("ingest: no trajectory files given");

  std::optional<IndexConfig> index = explicit_index;
  std::size_t transitions = 0, trajectories_n = 0, skipped = 0, trips = 0, idle = 0;
  json traj_list = json::array();
  for (const auto& path : trajectories) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read trajectory file " + path);
    const TrajectoryDataset ds = ingest_trajectories(in);
    if (ds.index) {
      if (index && !(*index == *ds.index)) {
        throw ConfigError(path + ": IndexConfig differs from the other inputs");
      }
      index = ds.index;
    }
    for (const auto& e : ds.errors) {
      run.warn(path + ":" + std::to_string(e.line) + ": skipped: " + e.message);
    }
    transitions += ds.transitions.size();
    for (const auto& t : ds.transitions) (t.is_trip ? trips : idle) += 1;
    trajectories_n += ds.trajectories;
    skipped += ds.errors.size();
    run.input(path);
    traj_list.push_back({{"path", fs::absolute(path).lexically_normal().string()},
                         {"fnv1a64", file_hash(path)}});
  }
  if (!index) index = IndexConfig::defaults();

  std::size_t feature_records = 0, feature_errors = 0, duplicates = 0;
  json feat_list = json::array();
  if (!features.empty()) {
    std::string combined;
    for (const auto& path : features) {
      const std::string bytes = read_file_bytes(path);
      std::istringstream one(bytes);
      const FeatureStore store = ingest_features(one, &*index);
      if (!(store.index() == *index)) {
        throw ConfigError(path + ": feature IndexConfig differs from the trajectories");
      }
      combined += bytes;
      if (!combined.empty() && combined.back() != '\n') combined += '\n';
      run.input(path);
      feat_list.push_back({{"path", fs::absolute(path).lexically_normal().string()},
                           {"fnv1a64", file_hash(path)}});
    }
    std::istringstream all(combined);
    const FeatureStore store = ingest_features(all, &*index);
    feature_records = store.size();
    feature_errors = store.errors().size();
    duplicates = store.duplicate_count();
    for (const auto& e : store.errors()) run.warn("feature line " + std::to_string(e.line) + ": " + e.message);
  }
  if (transitions == 0) run.warn("no transitions ingested");

  const json counts = {{"transitions", transitions},       {"trip_transitions", trips},
                       {"idle_transitions", idle},         {"trajectories", trajectories_n},
                       {"skipped_lines", skipped},         {"feature_records", feature_records},
                       {"feature_skipped_lines", feature_errors},
                       {"feature_duplicates", duplicates}};
  const json dataset = {{"index_config", *index},
                        {"trajectories", traj_list},
                        {"features", feat_list},
                        {"counts", counts}};
  run.write("dataset.json", dataset.dump(2) + "\n");
  run.say("ingested " + std::to_string(transitions) + " transitions from " +
          std::to_string(trajectories_n) + " trajectories (" + std::to_string(skipped) +
          " skipped lines); " + std::to_string(feature_records) + " feature records (" +
          std::to_string(feature_errors) + " skipped lines)");
  return run.finish(counts);
}

// ---------------------------------------------------------------- train

NetworkShape shape_from(const json& j, const Dataset& ds) {
  NetworkShape s;
  if (!j.is_null()) {
    reject_unknown_keys(j, {"embedding_dim", "hidden", "static_dim"}, "shape");
    read_optional(j, "embedding_dim", s.embedding_dim, "shape");
    read_optional(j, "hidden", s.hidden, "shape");
    read_optional(j, "static_dim", s.static_dim, "shape");
  }
  s.memory_size = ds.index.memory_size;
  if (ds.features) s.dynamic_dim = ds.features->dimension();
  return s;
}

TrainConfig train_config_from(const Run& run) {
  TrainConfig tc;
  if (run.config.contains("train")) tc = run.config.at("train").get<TrainConfig>();
  tc.seed = run.seed;
  if (const json g = run.request.value("gamma", json()); !g.is_null()) tc.gamma = g.get<double>();
  if (const json l = run.request.value("lambda", json()); !l.is_null()) tc.lambda = l.get<double>();
  if (const json m = run.request.value("max_steps", json()); !m.is_null()) {
    tc.max_steps = m.get<std::int64_t>();
  }
  tc.validate();
  return tc;
}

struct TabularOptions {
  bool enabled = true;
  int bucket_seconds = 1800;
};

TabularOptions tabular_from(const json& j) {
  TabularOptions t;
  if (j.is_null()) return t;
  reject_unknown_keys(j, {"enabled", "bucket_seconds"}, "tabular");
  read_optional(j, "enabled", t.enabled, "tabular");
  read_optional(j, "bucket_seconds", t.bucket_seconds, "tabular");
  if (t.bucket_seconds <= 0) throw ConfigError("tabular.bucket_seconds must be > 0");
  return t;
}

// Finest tiling layer with its own bucket width and no time offset.
TabularGrid tabular_grid(const IndexConfig& index, int bucket_seconds) {
  TabularGrid g{index.layers.back()};
  g.layer.time_bucket_seconds = bucket_seconds;
  g.layer.time_offset_seconds = 0;
  return g;
}

json cmd_train(const json& req, const PipelineEnv& env) {
  Run run("train", req, env, {"dataset", "gamma", "lambda", "max_steps"});
  reject_unknown_keys(run.config, {"dataset", "train", "shape", "tabular"}, "train config");
  const std::string dataset_path = run.path_option("dataset");
  if (dataset_path.empty()) throw ConfigError("train: no dataset given");
  const Dataset ds = load_dataset(dataset_path);
  run.input(dataset_path);
  if (ds.transitions.empty()) throw DataError("train: dataset has no transitions");
  const TrainConfig tc = train_config_from(run);
  const NetworkShape shape = shape_from(run.config.value("shape", json()), ds);
  const TabularOptions tab = tabular_from(run.config.value("tabular", json()));

  Trainer trainer(tc, shape, ds.index, ds.transitions, ds.features ? &*ds.features : nullptr);
  const TrainResult res = trainer.run();
  run.write("checkpoint.cvn", save_checkpoint(res.checkpoint));
  std::ostringstream log;
  write_training_log_csv(log, res.log, false);
  run.write("training_log.csv", log.str());

  json summary = {{"steps", res.stats.steps},
                  {"epochs", res.stats.epochs},
                  {"target_syncs", res.stats.target_syncs},
                  {"transitions", ds.transitions.size()},
                  {"gamma", tc.gamma},
                  {"lambda", tc.lambda},
                  {"checkpoint_fnv1a64", checkpoint_content_hash(res.checkpoint)}};
  if (!res.log.empty()) summary["final_data_loss"] = res.log.back().data_loss;
  if (!res.stats.distill_mse.empty()) summary["distill_mse"] = res.stats.distill_mse.back();
  if (tab.enabled) {
    TabularDpStats st;
    const TabularValue tv = tabular_dp_evaluate(ds.transitions,
                                                tabular_grid(ds.index, tab.bucket_seconds),
                                                tc.gamma, 100000, 1e-9, &st);
    std::ostringstream t;
    tv.write_csv(t);
    run.write("tval.csv", t.str());
    summary["tabular_states"] = tv.size();
    summary["tabular_sweeps"] = st.sweeps;
  }
  run.say("trained " + std::to_string(res.stats.steps) + " steps on " +
          std::to_string(ds.transitions.size()) + " transitions");
  return run.finish(summary);
}

// ---------------------------------------------------------------- distill

json cmd_distill(const json& req, const PipelineEnv& env) {
  Run run("distill", req, env, {"checkpoint", "dataset", "epochs"});
  reject_unknown_keys(run.config, {"checkpoint", "dataset", "epochs", "learning_rate"},
                      "distill config");
  const std::string ck_path = run.path_option("checkpoint");
  const std::string ds_path = run.path_option("dataset");
  if (ck_path.empty() || ds_path.empty()) throw ConfigError("distill: need checkpoint and dataset");
  if (!fs::exists(ck_path)) throw DataError("missing checkpoint " + ck_path);
  Checkpoint ck = load_checkpoint_file(ck_path);
  run.input(ck_path);
  const Dataset ds = load_dataset(ds_path);
  run.input(ds_path);
  if (!(ds.index == ck.index)) throw ConfigError("distill: dataset IndexConfig differs from checkpoint");
  int epochs = 5;
  if (const json e = run.option("epochs"); !e.is_null()) epochs = e.get<int>();
  if (epochs < 1) throw ConfigError("distill: epochs must be >= 1");

  TrainConfig tc;
  if (ck.metadata.contains("train_config")) tc = ck.metadata.at("train_config").get<TrainConfig>();
  if (const json lr = run.option("learning_rate"); !lr.is_null()) tc.learning_rate = lr.get<double>();
  tc.seed = run.seed;
  tc.max_steps = 0;
  tc.distill = false;
  Trainer trainer(tc, ck.net.shape(), ck.index, ds.transitions,
                  ds.features ? &*ds.features : nullptr);
  trainer.set_network(ck.net);
  const double mse = trainer.run_distillation(epochs);
  ck.net = trainer.network();
  ck.metadata["distill"] = {{"epochs", epochs}, {"mse", mse}, {"seed", run.seed}};
  run.write("checkpoint.cvn", save_checkpoint(ck));
  run.say("distilled " + std::to_string(epochs) + " epochs, transfer-set MSE " + fmt(mse));
  return run.finish({{"epochs", epochs}, {"mse", mse}});
}

// ---------------------------------------------------------------- policies

WorldConfig world_from(const Run& run) {
  WorldConfig w;
  if (run.config.contains("world")) w = run.config.at("world").get<WorldConfig>();
  return w;
}

Policy make_policy(const std::string& name, const json& spec, Run& run, const WorldConfig& world) {
  std::string kind = name;
  json planner_json;
  std::string ck_path, tab_path;
  if (!spec.is_null()) {
    reject_unknown_keys(spec, {"kind", "planner", "checkpoint", "tabular"}, "policy " + name);
    kind = spec.value("kind", name);
    planner_json = spec.value("planner", json());
    if (spec.contains("checkpoint")) ck_path = run.resolve(spec.at("checkpoint").get<std::string>());
    if (spec.contains("tabular")) tab_path = run.resolve(spec.at("tabular").get<std::string>());
  }
  if (run.request.contains("checkpoint")) ck_path = run.request.at("checkpoint").get<std::string>();
  if (run.request.contains("tabular")) tab_path = run.request.at("tabular").get<std::string>();

  PlannerConfig defaults;
  defaults.match_bonus = 1000.0;
  defaults.broadcast_radius = world.broadcast_radius;
  defaults.omega = kind == "myopic" ? 0.0 : 50.0;
  defaults.kind = kind == "myopic" ? ScoreKind::Myopic : ScoreKind::Value;
  std::shared_ptr<const Checkpoint> ck;
  if (kind == "cvnet") {
    if (ck_path.empty()) throw ConfigError("policy " + name + " needs a checkpoint");
    if (!fs::exists(ck_path)) throw DataError("missing checkpoint " + ck_path);
    ck = std::make_shared<Checkpoint>(load_checkpoint_file(ck_path));
    run.input(ck_path);
    defaults.gamma = ck->gamma;
  }
  json pj = defaults;
  if (!planner_json.is_null()) pj.merge_patch(planner_json);
  PlannerConfig planner = pj.get<PlannerConfig>();

  if (kind == "myopic") {
    Policy p = myopic_policy(planner.match_bonus, planner.broadcast_radius);
    p.name = name;
    return p;
  }
  if (kind == "cvnet") return cvnet_policy(ck, planner, name);
  if (kind == "tval") {
    if (tab_path.empty()) throw ConfigError("policy " + name + " needs a tabular value file");
    std::ifstream in(tab_path);
    if (!in) throw DataError("missing tabular value file " + tab_path);
    auto tv = std::make_shared<TabularValue>(TabularValue::read_csv(in));
    run.input(tab_path);
    return tabular_policy(tv, planner, name);
  }
  throw ConfigError("unknown policy kind '" + kind + "'");
}

json policy_spec(const Run& run, const std::string& name) {
  if (run.config.contains("policies") && run.config.at("policies").contains(name)) {
    return run.config.at("policies").at(name);
  }
  return nullptr;
}

// ---------------------------------------------------------------- simulate

json cmd_simulate(const json& req, const PipelineEnv& env) {
  Run run("simulate", req, env, {"policy", "checkpoint", "tabular", "events"});
  reject_unknown_keys(run.config, {"world", "policy", "policies"}, "simulate config");
  const WorldConfig world = world_from(run);
  std::string name = "myopic";
  json spec;
  if (run.request.contains("policy")) {
    name = run.request.at("policy").get<std::string>();
    spec = policy_spec(run, name);
  } else if (run.config.contains("policy")) {
    spec = run.config.at("policy");
    name = spec.value("kind", std::string("myopic"));
  }
  const Policy policy = make_policy(name, spec, run, world);
  const bool events = run.request.value("events", false);

  std::ostringstream event_log;
  EpisodeResult r = run_episode(world, policy, run.seed, events ? &event_log : nullptr);
  std::ostringstream metrics, series, traj, feats;
  write_metrics_csv(metrics, {ExperimentCell{policy.name, run.seed, r.metrics, 1.0}});
  write_series_csv(series, r.metrics.series);
  r.world->export_trajectories(traj);
  r.world->export_features(feats);
  run.write("metrics.csv", metrics.str());
  run.write("series.csv", series.str());
  run.write("trajectories.jsonl", traj.str());
  run.write("features.csv", feats.str());
  if (events) run.write("events.jsonl", event_log.str());
  const EpisodeMetrics& m = r.metrics;
  run.say(policy.name + " seed " + std::to_string(run.seed) + ": TDI " + fmt(m.tdi) +
          ", answer rate " + fmt(m.answer_rate) + ", finish rate " + fmt(m.finish_rate) +
          ", mean pickup " + fmt(m.mean_pickup_distance) + " m");
  return run.finish({{"policy", policy.name},
                     {"tdi", m.tdi},
                     {"requested", m.requested},
                     {"answered", m.answered},
                     {"finished", m.finished},
                     {"answer_rate", m.answer_rate},
                     {"finish_rate", m.finish_rate},
                     {"mean_pickup_distance", m.mean_pickup_distance}});
}

// ---------------------------------------------------------------- compare

std::vector<std::uint64_t> seeds_from(const Run& run) {
  if (const json s = run.option("seeds"); !s.is_null()) {
    auto v = s.get<std::vector<std::uint64_t>>();
    if (v.empty()) throw ConfigError("compare: empty seed list");
    return v;
  }
  int n = 10;
  if (const json c = run.option("seed_count"); !c.is_null()) n = c.get<int>();
  if (n <= 0) throw ConfigError("compare: seed_count must be > 0");
  std::vector<std::uint64_t> v;
  for (int i = 0; i < n; ++i) v.push_back(run.seed + static_cast<std::uint64_t>(i));
  return v;
}

json cmd_compare(const json& req, const PipelineEnv& env) {
  Run run("compare", req, env,
          {"policies", "omega_levels", "seeds", "seed_count", "checkpoint", "tabular",
           "sweep_policy"});
  reject_unknown_keys(run.config,
                      {"world", "policies", "order", "seeds", "seed_count", "omega_levels",
                       "sweep_policy"},
                      "compare config");
  const WorldConfig world = world_from(run);
  const auto seeds = seeds_from(run);
  std::vector<std::string> names;
  if (run.request.contains("policies")) {
    names = as_list(run.request.at("policies"));
  } else if (run.config.contains("order")) {
    names = as_list(run.config.at("order"));
  } else if (run.config.contains("policies")) {
    for (const auto& [k, v] : run.config.at("policies").items()) names.push_back(k);
  } else {
    names = {"myopic"};
  }
  if (names.empty()) throw ConfigError("compare: no policies");
  std::vector<Policy> policies;
  for (const auto& n : names) policies.push_back(make_policy(n, policy_spec(run, n), run, world));

  const ExperimentResult ex = run_experiment(world, policies, seeds, env.workers);
  std::ostringstream metrics, summary;
  write_metrics_csv(metrics, ex.cells);
  write_summary_csv(summary, ex.summary);
  run.write("metrics.csv", metrics.str());
  run.write("summary.csv", summary.str());
  run.say("normalized TDI (baseline " + ex.baseline + ", " + std::to_string(seeds.size()) +
          " seeds):");
  for (const auto& s : ex.summary) {
    run.say("  " + s.policy + "  " + fmt(s.normalized_tdi_mean) + " +- " +
            fmt(s.normalized_tdi_std) + "  pickup " + fmt(s.pickup_distance_mean) + " m");
  }
  json out = {{"baseline", ex.baseline}, {"seeds", seeds}, {"policies", json::array()}};
  for (const auto& s : ex.summary) {
    out["policies"].push_back({{"policy", s.policy},
                               {"normalized_tdi_mean", s.normalized_tdi_mean},
                               {"normalized_tdi_std", s.normalized_tdi_std},
                               {"pickup_distance_mean", s.pickup_distance_mean}});
  }

  std::vector<double> omegas;
  if (const json o = run.option("omega_levels"); !o.is_null()) omegas = o.get<std::vector<double>>();
  if (!omegas.empty()) {
    std::string sweep;
    if (const json s = run.option("sweep_policy"); !s.is_null()) sweep = s.get<std::string>();
    const Policy* base = nullptr;
    for (const auto& p : policies) {
      if ((sweep.empty() && p.planner.kind == ScoreKind::Value) || p.name == sweep) {
        base = &p;
        break;
      }
    }
    if (!base) throw ConfigError("compare: omega sweep needs a value policy");
    std::vector<Policy> sweep_policies{myopic_policy(1000.0, world.broadcast_radius)};
    for (double w : omegas) {
      Policy p = *base;
      p.planner.omega = w;
      p.name = base->name + "@" + fmt(w);
      sweep_policies.push_back(p);
    }
    const ExperimentResult sw = run_experiment(world, sweep_policies, seeds, env.workers);
    std::ostringstream t;
    t << "policy,omega,tdi_mean,tdi_std,normalized_tdi_mean,normalized_tdi_std,"
         "pickup_distance_mean,answer_rate_mean,finish_rate_mean\n";
    json rows = json::array();
    for (std::size_t i = 0; i < omegas.size(); ++i) {
      const PolicySummary& s = sw.summary[i + 1];
      t << base->name << ',' << fmt(omegas[i]) << ',' << fmt(s.tdi_mean) << ',' << fmt(s.tdi_std)
        << ',' << fmt(s.normalized_tdi_mean) << ',' << fmt(s.normalized_tdi_std) << ','
        << fmt(s.pickup_distance_mean) << ',' << fmt(s.answer_rate_mean) << ','
        << fmt(s.finish_rate_mean) << '\n';
      rows.push_back({{"omega", omegas[i]},
                      {"normalized_tdi_mean", s.normalized_tdi_mean},
                      {"pickup_distance_mean", s.pickup_distance_mean}});
    }
    run.write("tradeoff.csv", t.str());
    out["tradeoff"] = rows;
  }
  return run.finish(out);
}

// ---------------------------------------------------------------- transfer

struct CfptOptions {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  TransferModelConfig model;
  std::int64_t source_steps = 4000;
  std::int64_t target_steps = 3000;
  std::size_t source_samples = 20000;
  std::size_t target_samples = 5000;
  std::size_t eval_samples = 1000;
  double noise = 1.0;
  int eval_interval = 50;
  int batch_size = 32;
  double learning_rate = 1e-3;
};

CfptOptions cfpt_from(const json& c) {
  CfptOptions o;
  reject_unknown_keys(c,
                      {"mode", "seeds", "model", "source_steps", "target_steps", "source_samples",
                       "target_samples", "eval_samples", "noise", "eval_interval", "batch_size",
                       "learning_rate"},
                      "transfer config");
  const std::string_view ctx = "transfer";
  read_optional(c, "seeds", o.seeds, ctx);
  read_optional(c, "source_steps", o.source_steps, ctx);
  read_optional(c, "target_steps", o.target_steps, ctx);
  read_optional(c, "source_samples", o.source_samples, ctx);
  read_optional(c, "target_samples", o.target_samples, ctx);
  read_optional(c, "eval_samples", o.eval_samples, ctx);
  read_optional(c, "noise", o.noise, ctx);
  read_optional(c, "eval_interval", o.eval_interval, ctx);
  read_optional(c, "batch_size", o.batch_size, ctx);
  read_optional(c, "learning_rate", o.learning_rate, ctx);
  if (c.contains("model")) {
    const json& m = c.at("model");
    reject_unknown_keys(m, {"embedding_dim", "hidden", "context_dim", "additive_raw"},
                        "transfer.model");
    read_optional(m, "embedding_dim", o.model.embedding_dim, ctx);
    read_optional(m, "hidden", o.model.hidden, ctx);
    read_optional(m, "context_dim", o.model.context_dim, ctx);
    read_optional(m, "additive_raw", o.model.additive_raw, ctx);
  }
  if (o.seeds.empty() || o.target_steps <= 0 || o.source_steps < 0) {
    throw ConfigError("transfer: need seeds and positive step counts");
  }
  return o;
}

json cmd_transfer_cfpt(Run& run) {
  const CfptOptions o = cfpt_from(run.config);
  const IndexConfig index = IndexConfig::defaults();
  std::ostringstream curves, summary;
  curves << "seed,variant,step,eval_loss\n";
  summary << "seed,baseline_final_loss,cfpt_final_loss,cfpt_steps_to_baseline_final,"
             "target_steps,step_ratio\n";
  json per_seed = json::array();
  double ratio_sum = 0.0;
  for (std::size_t k = 0; k < o.seeds.size(); ++k) {
    const std::uint64_t s = o.seeds[k] ^ run.seed;
    TransferModelConfig mc = o.model;
    mc.seed = substream_seed(s, "model");
    const FeatureSplit split = default_transfer_split(mc.embedding_dim, mc.context_dim);
    const SyntheticCity src_city = SyntheticCity::generate(substream_seed(s, "source-city"));
    const SyntheticCity tgt_city = SyntheticCity::generate(substream_seed(s, "target-city"));
    const auto src_train =
        src_city.samples(o.source_samples, substream_seed(s, "source-train"), o.noise, mc.context_dim);
    const auto src_eval =
        src_city.samples(o.eval_samples, substream_seed(s, "source-eval"), 0.0, mc.context_dim);
    const auto tgt_train =
        tgt_city.samples(o.target_samples, substream_seed(s, "target-train"), o.noise, mc.context_dim);
    const auto tgt_eval =
        tgt_city.samples(o.eval_samples, substream_seed(s, "target-eval"), 0.0, mc.context_dim);

    TransferTrainConfig tc;
    tc.batch_size = o.batch_size;
    tc.learning_rate = o.learning_rate;
    tc.eval_interval = o.eval_interval;
    tc.seed = substream_seed(s, "train");
    tc.steps = o.source_steps;
    TransferNetwork source = make_source_network(index, split, mc);
    const auto src_curve = train_transfer(source, src_train, src_eval, tc);

    tc.steps = o.target_steps;
    TransferNetwork baseline = make_transfer_network(index, split, mc, nullptr);
    TransferNetwork cfpt = make_transfer_network(index, split, mc, &source.columns.target);
    const auto base_curve = train_transfer(baseline, tgt_train, tgt_eval, tc);
    const auto cfpt_curve = train_transfer(cfpt, tgt_train, tgt_eval, tc);
    for (const auto& p : src_curve) curves << o.seeds[k] << ",source," << p.step << ',' << fmt(p.eval_loss) << '\n';
    for (const auto& p : base_curve) curves << o.seeds[k] << ",baseline," << p.step << ',' << fmt(p.eval_loss) << '\n';
    for (const auto& p : cfpt_curve) curves << o.seeds[k] << ",cfpt," << p.step << ',' << fmt(p.eval_loss) << '\n';

    const double target_loss = base_curve.back().eval_loss;
    const auto reach = steps_to_reach(cfpt_curve, target_loss);
    // Never reaching the baseline counts as needing every step and more.
    const double ratio = reach ? static_cast<double>(*reach) / static_cast<double>(o.target_steps)
                               : 2.0;
    ratio_sum += ratio;
    summary << o.seeds[k] << ',' << fmt(target_loss) << ',' << fmt(cfpt_curve.back().eval_loss)
            << ',' << (reach ? std::to_string(*reach) : std::string("NA")) << ',' << o.target_steps
            << ',' << fmt(ratio) << '\n';
    per_seed.push_back({{"seed", o.seeds[k]}, {"step_ratio", ratio},
                        {"baseline_final_loss", target_loss},
                        {"cfpt_final_loss", cfpt_curve.back().eval_loss}});
    if (k == 0) {
      TransferCheckpoint sc{source, "", {{"role", "source"}, {"seed", o.seeds[k]}}};
      const std::string src_bytes = save_transfer_checkpoint(sc);
      run.write("source.cvt", src_bytes);
      TransferCheckpoint tc_ck{cfpt, hex64(fnv1a64(src_bytes)),
                               {{"role", "cfpt"}, {"seed", o.seeds[k]}}};
      run.write("cfpt.cvt", save_transfer_checkpoint(tc_ck));
    }
  }
  run.write("curves.csv", curves.str());
  run.write("summary.csv", summary.str());
  const double mean_ratio = ratio_sum / static_cast<double>(o.seeds.size());
  run.say("CFPT reaches the baseline's final loss in " + fmt(100.0 * mean_ratio) +
          "% of the steps (mean over " + std::to_string(o.seeds.size()) + " seeds)");
  return {{"mode", "cfpt"}, {"mean_step_ratio", mean_ratio}, {"seeds", per_seed}};
}

json cmd_transfer_finetune(Run& run) {
  reject_unknown_keys(run.config, {"mode", "source_checkpoint", "dataset", "train", "freeze"},
                      "transfer config");
  std::string src_path = run.path_option("source_checkpoint");
  if (run.request.contains("checkpoint")) src_path = run.request.at("checkpoint").get<std::string>();
  const std::string ds_path = run.path_option("dataset");
  if (src_path.empty() || ds_path.empty()) {
    throw ConfigError("transfer finetune: need a source checkpoint and a dataset");
  }
  if (!fs::exists(src_path)) throw DataError("missing checkpoint " + src_path);
  const Checkpoint src = load_checkpoint_file(src_path);
  run.input(src_path);
  const Dataset ds = load_dataset(ds_path);
  run.input(ds_path);
  TrainConfig tc;
  if (run.config.contains("train")) tc = run.config.at("train").get<TrainConfig>();
  tc.seed = run.seed;
  tc.validate();
  const bool freeze = run.config.value("freeze", false);
  const ValueNetwork init = init_finetune(&src, ds.index, run.seed);
  NetworkShape shape = init.shape();
  Trainer trainer(tc, shape, ds.index, ds.transitions, ds.features ? &*ds.features : nullptr);
  trainer.set_network(init);
  if (freeze) trainer.set_freeze_mask(freeze_all_copied(init));
  TrainResult res = trainer.run();
  res.checkpoint.metadata["transfer"] = {{"mode", "finetune"},
                                         {"source_hash", checkpoint_content_hash(src)},
                                         {"frozen", freeze}};
  run.write("checkpoint.cvn", save_checkpoint(res.checkpoint));
  std::ostringstream log;
  write_training_log_csv(log, res.log, false);
  run.write("training_log.csv", log.str());
  return {{"mode", "finetune"}, {"steps", res.stats.steps}, {"frozen", freeze}};
}

json cmd_transfer(const json& req, const PipelineEnv& env) {
  Run run("transfer", req, env, {"mode", "checkpoint", "dataset"});
  std::string mode = run.config.value("mode", std::string("cfpt"));
  if (run.request.contains("mode")) mode = run.request.at("mode").get<std::string>();
  if (run.request.contains("dataset")) run.config["dataset"] = run.request.at("dataset");
  json summary;
  if (mode == "cfpt") {
    summary = cmd_transfer_cfpt(run);
  } else if (mode == "finetune") {
    summary = cmd_transfer_finetune(run);
  } else {
    throw ConfigError("transfer: mode must be 'cfpt' or 'finetune'");
  }
  return run.finish(summary);
}

// ---------------------------------------------------------------- export-plots

struct PlotOptions {
  int locations = 200;
  double world_size = 10000.0;
  int bucket_seconds = 3600;
  double sigma = 0.05;
  int bins = 40;
};

void histogram_rows(std::ostringstream& out, const std::string& prefix, const Histogram& h) {
  for (std::size_t b = 0; b < h.counts.size(); ++b) {
    out << prefix << ',' << fmt(h.edges[b]) << ',' << fmt(h.edges[b + 1]) << ',' << h.counts[b]
        << '\n';
  }
}

json cmd_export_plots(const json& req, const PipelineEnv& env) {
  Run run("export-plots", req, env, {"runs", "sigma"});
  reject_unknown_keys(run.config, {"locations", "world_size", "bucket_seconds", "sigma", "bins"},
                      "export-plots config");
  PlotOptions o;
  read_optional(run.config, "locations", o.locations, "export-plots");
  read_optional(run.config, "world_size", o.world_size, "export-plots");
  read_optional(run.config, "bucket_seconds", o.bucket_seconds, "export-plots");
  read_optional(run.config, "sigma", o.sigma, "export-plots");
  read_optional(run.config, "bins", o.bins, "export-plots");
  if (run.request.contains("sigma")) o.sigma = run.request.at("sigma").get<double>();
  if (o.locations <= 0 || o.bucket_seconds <= 0 || o.bins <= 0 || o.sigma < 0) {
    throw ConfigError("export-plots: invalid options");
  }
  const auto runs = run.path_list("runs");
  if (runs.empty()) throw ConfigError("export-plots: empty run set");

  // Validate every run before producing anything.
  std::vector<std::pair<std::string, json>> records;
  for (const auto& dir : runs) {
    const std::string rec = (fs::path(dir) / "run.json").string();
    if (!fs::exists(rec)) throw DataError("missing run: " + dir);
    records.emplace_back(dir, load_json_file(rec));
  }

  std::mt19937_64 rng(substream_seed(run.seed, "plot-locations"));
  std::uniform_real_distribution<double> u(0.0, o.world_size);
  std::vector<GeoPoint> locations;
  for (int i = 0; i < o.locations; ++i) locations.push_back({u(rng), u(rng)});

  std::ostringstream lip, meanv, prof, vhist, chist, csum, bars, trade, curves;
  lip << "run,lambda,step,lipschitz_bound\n";
  meanv << "run,gamma,step,mean_v\n";
  prof << "run,gamma,bucket_start,mean,stddev\n";
  vhist << "run,gamma,bin_lo,bin_hi,count\n";
  chist << "run,sigma,phase,bin_lo,bin_hi,count\n";
  csum << "run,sigma,mean_abs_shift,mean_before,mean_after,std_before,std_after\n";
  bars << "run,policy,normalized_tdi_mean,normalized_tdi_std,tdi_mean,tdi_std\n";
  trade << "run,omega,tdi_mean,normalized_tdi_mean,pickup_distance_mean\n";
  curves << "run,seed,variant,step,eval_loss\n";
  std::map<std::string, bool> used;
  for (const auto& [dir, rec] : records) {
    const std::string label = fs::path(dir).lexically_normal().filename().string();
    const std::string command = rec.value("command", std::string());
    const fs::path d(dir);
    if (command == "train" || (command == "transfer" && fs::exists(d / "checkpoint.cvn"))) {
      const Checkpoint ck = load_checkpoint_file((d / "checkpoint.cvn").string());
      for (const auto& row : read_csv_rows((d / "training_log.csv").string())) {
        lip << label << ',' << fmt(ck.lambda) << ',' << row.at("step") << ','
            << row.at("lipschitz_bound") << '\n';
        meanv << label << ',' << fmt(ck.gamma) << ',' << row.at("step") << ',' << row.at("mean_v")
              << '\n';
      }
      const NetworkValueFunction v(ck, ValueHead::Main);
      for (const auto& r : value_profile(v, locations, o.bucket_seconds)) {
        prof << label << ',' << fmt(ck.gamma) << ',' << r.bucket_start << ',' << fmt(r.mean) << ','
             << fmt(r.stddev) << '\n';
      }
      std::vector<double> values;
      std::vector<StateFeatures> states;
      for (int b = 0; b * o.bucket_seconds < kSecondsPerDay; ++b) {
        const ClockTime mu(std::min(kSecondsPerDay - 1, b * o.bucket_seconds + o.bucket_seconds / 2));
        for (const auto& l : locations) {
          values.push_back(v.value(l, mu));
          states.push_back({activation_vector(l, mu, ck.index),
                            Eigen::VectorXd::Zero(ck.net.static_dim),
                            Eigen::VectorXd(Eigen::VectorXd::Zero(ck.net.dynamic_dim))});
        }
      }
      const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
      histogram_rows(vhist, label + "," + fmt(ck.gamma),
                     histogram(values, *lo, *hi > *lo ? *hi : *lo + 1.0, o.bins));
      const CorruptionReport c = weight_corruption_probe(ck.net, states, o.sigma,
                                                         substream_seed(run.seed, "corruption"),
                                                         o.bins);
      histogram_rows(chist, label + "," + fmt(o.sigma) + ",before", c.before);
      histogram_rows(chist, label + "," + fmt(o.sigma) + ",after", c.after);
      csum << label << ',' << fmt(o.sigma) << ',' << fmt(c.mean_abs_shift) << ','
           << fmt(c.mean_before) << ',' << fmt(c.mean_after) << ',' << fmt(c.std_before) << ','
           << fmt(c.std_after) << '\n';
      used["train"] = true;
    } else if (command == "compare") {
      for (const auto& row : read_csv_rows((d / "summary.csv").string())) {
        bars << label << ',' << row.at("policy") << ',' << row.at("normalized_tdi_mean") << ','
             << row.at("normalized_tdi_std") << ',' << row.at("tdi_mean") << ','
             << row.at("tdi_std") << '\n';
      }
      used["compare"] = true;
      if (fs::exists(d / "tradeoff.csv")) {
        for (const auto& row : read_csv_rows((d / "tradeoff.csv").string())) {
          trade << label << ',' << row.at("omega") << ',' << row.at("tdi_mean") << ','
                << row.at("normalized_tdi_mean") << ',' << row.at("pickup_distance_mean") << '\n';
        }
        used["tradeoff"] = true;
      }
    } else if (command == "transfer" && fs::exists(d / "curves.csv")) {
      for (const auto& row : read_csv_rows((d / "curves.csv").string())) {
        curves << label << ',' << row.at("seed") << ',' << row.at("variant") << ','
               << row.at("step") << ',' << row.at("eval_loss") << '\n';
      }
      used["transfer"] = true;
    } else {
      throw DataError("export-plots: run " + dir + " has nothing to plot");
    }
  }
  json files = json::array();
  auto emit = [&](const char* name, const std::ostringstream& s) {
    run.write(name, s.str());
    files.push_back(name);
  };
  if (used["train"]) {
    emit("gamma_profiles.csv", prof);
    emit("value_histograms.csv", vhist);
    emit("lipschitz_vs_step.csv", lip);
    emit("corruption_histograms.csv", chist);
    emit("corruption_summary.csv", csum);
    emit("mean_v_vs_step.csv", meanv);
  }
  if (used["compare"]) emit("tdi_bars.csv", bars);
  if (used["tradeoff"]) emit("tradeoff_curves.csv", trade);
  if (used["transfer"]) emit("transfer_curves.csv", curves);
  run.say("wrote " + std::to_string(files.size()) + " plot tables");
  return run.finish({{"files", files}});
}

// ---------------------------------------------------------------- manifest

void substitute(json& j, const std::string& out_root) {
  if (j.is_string()) {
    std::string s = j.get<std::string>();
    for (std::size_t pos; (pos = s.find("${out}")) != std::string::npos;) {
      s.replace(pos, 6, out_root);
    }
    j = s;
  } else if (j.is_array() || j.is_object()) {
    for (auto& v : j) substitute(v, out_root);
  }
}

constexpr std::string_view kPathKeys[] = {"config",    "out",     "trajectories", "features",
                                          "index_config", "dataset", "checkpoint", "tabular",
                                          "runs"};

void resolve_paths(json& step, const fs::path& base) {
  auto fix = [&](json& v) {
    const fs::path p(v.get<std::string>());
    if (!p.is_absolute()) v = (base / p).lexically_normal().string();
  };
  for (auto key : kPathKeys) {
    const std::string k(key);
    if (!step.contains(k)) continue;
    json& v = step[k];
    if (v.is_string()) {
      fix(v);
    } else if (v.is_array()) {
      for (auto& e : v) fix(e);
    }
  }
}

}  // namespace

// ---------------------------------------------------------------- public

Dataset load_dataset(const std::string& dataset_json) {
  const json j = load_json_file(dataset_json);
  Dataset ds;
  try {
    ds.index = j.at("index_config").get<IndexConfig>();
    ds.inputs.push_back(dataset_json);
    for (const auto& t : j.at("trajectories")) {
      const std::string path = t.at("path").get<std::string>();
      if (!fs::exists(path)) throw DataError("missing trajectory file " + path);
      if (file_hash(path) != t.at("fnv1a64").get<std::string>()) {
        throw DataError(path + " changed since ingestion");
      }
      std::ifstream in(path);
      TrajectoryDataset one = ingest_trajectories(in);
      ds.transitions.insert(ds.transitions.end(), std::make_move_iterator(one.transitions.begin()),
                            std::make_move_iterator(one.transitions.end()));
      ds.inputs.push_back(path);
    }
    std::string combined;
    for (const auto& f : j.at("features")) {
      const std::string path = f.at("path").get<std::string>();
      if (!fs::exists(path)) throw DataError("missing feature file " + path);
      const std::string bytes = read_file_bytes(path);
      if (hex64(fnv1a64(bytes)) != f.at("fnv1a64").get<std::string>()) {
        throw DataError(path + " changed since ingestion");
      }
      combined += bytes;
      if (!combined.empty() && combined.back() != '\n') combined += '\n';
      ds.inputs.push_back(path);
    }
    if (!j.at("features").empty()) {
      std::istringstream in(combined);
      ds.features.emplace(ingest_features(in, &ds.index));
      ds.features->finalize();
    }
  } catch (const json::exception& e) {
    throw DataError(dataset_json + ": malformed dataset artifact: " + e.what());
  }
  return ds;
}

json run_command(const std::string& command, const json& request, const PipelineEnv& env) {
  if (command == "ingest") return cmd_ingest(request, env);
  if (command == "train") return cmd_train(request, env);
  if (command == "distill") return cmd_distill(request, env);
  if (command == "simulate") return cmd_simulate(request, env);
  if (command == "compare") return cmd_compare(request, env);
  if (command == "transfer") return cmd_transfer(request, env);
  if (command == "export-plots") return cmd_export_plots(request, env);
  throw ConfigError("unknown command '" + command + "'");
}

json run_manifest(const std::string& manifest_path, const std::string& out_root,
                  const PipelineEnv& env) {
  const json manifest = load_json_file(manifest_path);
  reject_unknown_keys(manifest, {"steps", "description"}, "manifest");
  if (!manifest.contains("steps") || !manifest.at("steps").is_array()) {
    throw ConfigError("manifest: 'steps' must be an array");
  }
  fs::path base = fs::path(manifest_path).parent_path();
  if (base.empty()) base = ".";
  const std::string root = fs::absolute(out_root).lexically_normal().string();
  json record = {{"manifest", manifest_path},
                 {"manifest_fnv1a64", file_hash(manifest_path)},
                 {"code_version", code_version()},
                 {"steps", json::array()}};
  for (const auto& raw : manifest.at("steps")) {
    if (!raw.is_object() || !raw.contains("command")) {
      throw ConfigError("manifest: every step needs a command");
    }
    json step = raw;
    const std::string command = step.at("command").get<std::string>();
    step.erase("command");
    substitute(step, root);
    resolve_paths(step, base);
    if (env.log) *env.log << "== " << command << " -> " << step.value("out", "") << '\n';
    const json summary = run_command(command, step, env);
    const std::string run_json = (fs::path(step.at("out").get<std::string>()) / "run.json").string();
    record["steps"].push_back({{"command", command},
                               {"request", step},
                               {"run_record_fnv1a64", file_hash(run_json)},
                               {"summary", summary}});
  }
  fs::create_directories(root);
  write_file_bytes((fs::path(root) / "manifest_record.json").string(), record.dump(2) + "\n");
  return record;
}

}  // namespace cvnet
