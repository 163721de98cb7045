#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cvnet/checkpoint.hpp"
#include "cvnet/pipeline.hpp"

using namespace cvnet;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("cvnet_unit_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

const char* kFixture =
    R"({"traj_id": "d1", "events": [)"
    R"({"type": "trip", "t0": 0, "t1": 600, "x0": 0, "y0": 0, "x1": 1000, "y1": 0, "fare": 5},)"
    R"({"type": "trip", "t0": 900, "t1": 1500, "x0": 1100, "y0": 0, "x1": 2000, "y1": 0, "fare": 6},)"
    R"({"type": "trip", "t0": 1800, "t1": 2400, "x0": 2000, "y0": 100, "x1": 0, "y1": 0, "fare": 7}]})";

int cli(const std::string& args) {
  const int rc = std::system((std::string(CVNET_CLI) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("ingest splits a hand-written fixture") {
  const fs::path d = fresh_dir("ingest");
  write_text(d / "t.jsonl", json{{"index_config", IndexConfig::defaults()}}.dump() + "\n" + kFixture + "\n");
  const json summary =
      run_command("ingest", {{"trajectories", {(d / "t.jsonl").string()}}, {"out", (d / "ds").string()}}, {});
  const json ds = read_json(d / "ds" / "dataset.json");
  CHECK(ds.at("counts").at("transitions") == 5);
  CHECK(ds.at("counts").at("trip_transitions") == 3);
  CHECK(ds.at("counts").at("idle_transitions") == 2);
  const json run = read_json(d / "ds" / "run.json");
  CHECK(run.at("command") == "ingest");
  CHECK(run.at("inputs").size() == 1);
  CHECK(summary.is_object());

  const Dataset loaded = load_dataset((d / "ds" / "dataset.json").string());
  CHECK(loaded.transitions.size() == 5);
  // Editing an input after ingestion invalidates the dataset.
  write_text(d / "t.jsonl", std::string(kFixture) + "\n");
  CHECK_THROWS_AS(load_dataset((d / "ds" / "dataset.json").string()), DataError);
}

TEST_CASE("errors map to exit codes") {
  const fs::path d = fresh_dir("errors");
  write_text(d / "bad.json", R"({"world": {}, "no_such_key": 1})");
  try {
    run_command("simulate", {{"config", (d / "bad.json").string()}, {"out", (d / "o").string()}}, {});
    FAIL("expected a ConfigError");
  } catch (const std::exception& e) {
    CHECK(exit_code_for(e) == 2);
  }
  try {
    run_command("train", {{"dataset", (d / "missing.json").string()}, {"out", (d / "o").string()}}, {});
    FAIL("expected a DataError");
  } catch (const std::exception& e) {
    CHECK(exit_code_for(e) == 3);
  }
  CHECK_THROWS_AS(run_command("frobnicate", {{"out", (d / "o").string()}}, {}), ConfigError);
  CHECK_THROWS_AS(run_command("simulate", json::object(), {}), ConfigError);
  CHECK(exit_code_for(DivergenceError("x")) == 4);
  CHECK(exit_code_for(std::runtime_error("x")) == 1);
}

TEST_CASE("simulate, ingest, train and simulate again") {
  const fs::path d = fresh_dir("chain");
  write_text(d / "sim.json", R"({"world": {"driver_count": 12, "daily_orders": 300}})");
  run_command("simulate", {{"config", (d / "sim.json").string()}, {"seed", 4}, {"out", (d / "day").string()}}, {});
  for (const char* f : {"metrics.csv", "series.csv", "trajectories.jsonl", "features.csv", "run.json"})
    CHECK(fs::exists(d / "day" / f));
  run_command("ingest",
              {{"trajectories", {(d / "day" / "trajectories.jsonl").string()}},
               {"features", {(d / "day" / "features.csv").string()}},
               {"out", (d / "ds").string()}},
              {});
  write_text(d / "train.json", R"({"train": {"max_steps": 150, "log_interval": 50}})");
  run_command("train",
              {{"config", (d / "train.json").string()},
               {"dataset", (d / "ds" / "dataset.json").string()},
               {"out", (d / "tr").string()}},
              {});
  const Checkpoint ck = load_checkpoint_file((d / "tr" / "checkpoint.cvn").string());
  CHECK(ck.gamma == 0.92);
  CHECK(fs::exists(d / "tr" / "tval.csv"));
  std::ifstream log(d / "tr" / "training_log.csv");
  std::string header;
  std::getline(log, header);
  CHECK(header.find("lipschitz_bound") != std::string::npos);
  CHECK(header.find("wall") == std::string::npos);

  run_command("simulate",
              {{"config", (d / "sim.json").string()},
               {"policy", "cvnet"},
               {"checkpoint", (d / "tr" / "checkpoint.cvn").string()},
               {"out", (d / "day_cv").string()}},
              {});
  const json run = read_json(d / "day_cv" / "run.json");
  bool saw_checkpoint = false;
  for (const auto& in : run.at("inputs")) saw_checkpoint |= in.at("path").get<std::string>().ends_with("checkpoint.cvn");
  CHECK(saw_checkpoint);
  bool saw_metrics = false;
  for (const auto& out : run.at("outputs")) saw_metrics |= out.at("name") == "metrics.csv";
  CHECK(saw_metrics);
}

TEST_CASE("command-line front end") {
  const fs::path d = fresh_dir("cli");
  CHECK(cli("--help") == 0);
  CHECK(cli("") == 2);
  CHECK(cli("train --out " + (d / "x").string() + " --config " + (d / "nope.json").string()) == 2);
  CHECK(cli("train --out " + (d / "x").string() + " --dataset " + (d / "nope.json").string()) == 3);
  write_text(d / "sim.json", R"({"world": {"driver_count": 5, "daily_orders": 50}})");
  CHECK(cli("simulate --config " + (d / "sim.json").string() + " --seed 2 --out " + (d / "s").string()) == 0);
  CHECK(fs::exists(d / "s" / "metrics.csv"));
}
