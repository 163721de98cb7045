#include <cstdlib>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cvnet/common.hpp"
#include "cvnet/pipeline.hpp"

using nlohmann::json;

namespace {

int workers_from_env() {
  if (const char* w = std::getenv("CVNET_WORKERS")) {
    try {
      const int n = std::stoi(w);
      if (n > 0) return n;
    } catch (const std::exception&) {
    }
    throw cvnet::ConfigError(std::string("CVNET_WORKERS must be a positive integer, got '") + w + "'");
  }
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

// Flags shared by most subcommands; only set values land in the request.
struct Flags {
  std::string config, out, dataset, checkpoint, tabular, policy, mode, index_config, sweep_policy;
  std::vector<std::string> trajectories, features, runs, policies;
  std::vector<double> omega_levels;
  std::vector<std::uint64_t> seeds;
  std::uint64_t seed = 1;
  double gamma = 0, lambda = 0, sigma = 0;
  long long max_steps = 0;
  int epochs = 0, seed_count = 0;
  bool events = false;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Value-based order dispatching: train, simulate, compare, transfer"};
  app.require_subcommand(1);
  Flags f;
  std::string manifest;

  auto common = [&](CLI::App* s) {
    s->add_option("--config", f.config, "JSON config file")->check(CLI::ExistingFile);
    s->add_option("--seed", f.seed, "random seed");
    s->add_option("--out", f.out, "output directory")->required();
  };

  auto* ingest = app.add_subcommand("ingest", "validate trajectories and features into a dataset");
  common(ingest);
  ingest->add_option("--trajectories", f.trajectories, "trajectory JSONL files")->check(CLI::ExistingFile);
  ingest->add_option("--features", f.features, "feature CSV files")->check(CLI::ExistingFile);
  ingest->add_option("--index-config", f.index_config, "IndexConfig JSON")->check(CLI::ExistingFile);

  auto* train = app.add_subcommand("train", "policy evaluation on a dataset");
  common(train);
  train->add_option("--dataset", f.dataset, "dataset.json from ingest");
  train->add_option("--gamma", f.gamma, "discount factor");
  train->add_option("--lambda", f.lambda, "Lipschitz penalty weight");
  train->add_option("--max-steps", f.max_steps, "gradient step cap");

  auto* distill = app.add_subcommand("distill", "re-run distillation of the context-free head");
  common(distill);
  distill->add_option("--checkpoint", f.checkpoint, "trained checkpoint");
  distill->add_option("--dataset", f.dataset, "dataset.json from ingest");
  distill->add_option("--epochs", f.epochs, "distillation epochs");

  auto* simulate = app.add_subcommand("simulate", "simulate one day under one policy");
  common(simulate);
  simulate->add_option("--policy", f.policy, "policy name (myopic, cvnet, tval or a config entry)");
  simulate->add_option("--checkpoint", f.checkpoint, "checkpoint for value policies");
  simulate->add_option("--tabular", f.tabular, "tabular value file");
  simulate->add_flag("--events", f.events, "write the per-window event log");

  auto* compare = app.add_subcommand("compare", "paired multi-seed policy comparison");
  common(compare);
  compare->add_option("--policies", f.policies, "policy names in order")->delimiter(',');
  compare->add_option("--omega-levels", f.omega_levels, "omega sweep levels")->delimiter(',');
  compare->add_option("--seeds", f.seeds, "explicit day seeds")->delimiter(',');
  compare->add_option("--seed-count", f.seed_count, "number of consecutive seeds from --seed");
  compare->add_option("--checkpoint", f.checkpoint, "checkpoint for value policies");
  compare->add_option("--tabular", f.tabular, "tabular value file");
  compare->add_option("--sweep-policy", f.sweep_policy, "policy swept over omega");

  auto* transfer = app.add_subcommand("transfer", "transfer to a target city");
  common(transfer);
  transfer->add_option("--mode", f.mode, "cfpt or finetune");
  transfer->add_option("--checkpoint", f.checkpoint, "source checkpoint (finetune)");
  transfer->add_option("--dataset", f.dataset, "target dataset (finetune)");

  auto* plots = app.add_subcommand("export-plots", "tabulate figure data from earlier runs");
  common(plots);
  plots->add_option("--runs", f.runs, "run directories")->delimiter(',');
  plots->add_option("--sigma", f.sigma, "weight corruption scale");

  auto* man = app.add_subcommand("manifest", "run a manifest of chained commands");
  man->add_option("manifest", manifest, "manifest JSON")->required()->check(CLI::ExistingFile);
  man->add_option("--out", f.out, "output root substituted for ${out}")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  auto set = [](json& r, const char* key, const auto& v, bool present) {
    if (present) r[key] = v;
  };
  try {
    cvnet::PipelineEnv env;
    env.workers = workers_from_env();
    env.log = &std::cout;
    env.warn = &std::cerr;
    CLI::App* sub = app.get_subcommands().front();
    if (sub == man) {
      cvnet::run_manifest(manifest, f.out, env);
      return 0;
    }
    auto given = [&](const char* flag) { return sub->count(flag) > 0; };
    json r = json::object();
    r["out"] = f.out;
    set(r, "config", f.config, given("--config"));
    set(r, "seed", f.seed, given("--seed"));
    set(r, "trajectories", f.trajectories, sub == ingest && given("--trajectories"));
    set(r, "features", f.features, sub == ingest && given("--features"));
    set(r, "index_config", f.index_config, sub == ingest && given("--index-config"));
    set(r, "dataset", f.dataset, sub->get_option_no_throw("--dataset") && given("--dataset"));
    set(r, "gamma", f.gamma, sub == train && given("--gamma"));
    set(r, "lambda", f.lambda, sub == train && given("--lambda"));
    set(r, "max_steps", f.max_steps, sub == train && given("--max-steps"));
    set(r, "checkpoint", f.checkpoint, sub->get_option_no_throw("--checkpoint") && given("--checkpoint"));
    set(r, "tabular", f.tabular, sub->get_option_no_throw("--tabular") && given("--tabular"));
    set(r, "epochs", f.epochs, sub == distill && given("--epochs"));
    set(r, "policy", f.policy, sub == simulate && given("--policy"));
    set(r, "events", f.events, sub == simulate && given("--events"));
    set(r, "policies", f.policies, sub == compare && given("--policies"));
    set(r, "omega_levels", f.omega_levels, sub == compare && given("--omega-levels"));
    set(r, "seeds", f.seeds, sub == compare && given("--seeds"));
    set(r, "seed_count", f.seed_count, sub == compare && given("--seed-count"));
    set(r, "sweep_policy", f.sweep_policy, sub == compare && given("--sweep-policy"));
    set(r, "mode", f.mode, sub == transfer && given("--mode"));
    set(r, "runs", f.runs, sub == plots && given("--runs"));
    set(r, "sigma", f.sigma, sub == plots && given("--sigma"));
    cvnet::run_command(sub->get_name(), r, env);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cvnet::exit_code_for(e);
  }
}
