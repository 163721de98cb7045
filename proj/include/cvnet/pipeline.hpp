#pragma once

// Command layer behind the command-line tool. Every command takes a JSON
// request (the parsed flags, or one step of a manifest), reads an optional
// JSON config file, writes its artifacts into request["out"], and records a
// run.json with the resolved config, the code version and content hashes of
// every input and output.
//
// Commands: ingest, train, distill, simulate, compare, transfer,
// export-plots. A manifest chains commands:
//   {"steps": [{"command": "simulate", "config": "sim.json", "seed": 1,
//               "out": "${out}/day1"}, ...]}
// Relative paths resolve against the manifest's directory and "${out}" is
// replaced by the output root given at run time.

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cvnet/feature_store.hpp"
#include "cvnet/spatial_index.hpp"

namespace cvnet {

const char* code_version();

struct PipelineEnv {
  int workers = 1;
  std::ostream* log = nullptr;   // progress and summaries
  std::ostream* warn = nullptr;  // warnings
};

/// Runs one command and returns its summary (also stored in run.json).
nlohmann::json run_command(const std::string& command, const nlohmann::json& request,
                           const PipelineEnv& env);

/// Runs every step of a manifest in order and writes
/// <out_root>/manifest_record.json.
nlohmann::json run_manifest(const std::string& manifest_path, const std::string& out_root,
                            const PipelineEnv& env);

/// Process exit code for an exception escaping a command: 2 configuration
/// error, 3 data error, 4 divergence abort, 1 anything else.
int exit_code_for(const std::exception& e);

/// FNV-1a-64 of a file's bytes, hex encoded.
std::string file_hash(const std::string& path);

/// Transitions and features listed by an ingest artifact (dataset.json).
/// Inputs whose content hash changed since ingestion are a DataError.
struct Dataset {
  IndexConfig index;
  std::vector<TransitionTuple> transitions;
  std::optional<FeatureStore> features;
  std::vector<std::string> inputs;  // every file read
};

Dataset load_dataset(const std::string& dataset_json);

}  // namespace cvnet
