#pragma once

// Historical trajectories and contextual features.
//
// Trajectory JSONL: an optional first line {"index_config": {...}} followed
// by one object per trajectory:
//   {"traj_id": "d17", "events": [
//      {"type": "trip", "t0": 3600, "x0": 10.0, "y0": 20.0,
//       "t1": 4200, "x1": 900.0, "y1": 40.0, "fare": 12.5}, ...]}
// Events are time ordered. Gaps between consecutive events become idle
// (zero reward) transitions ending where the next event starts.
//
// Feature CSV: an optional first line "# {"index_config": {...}}", then the
// header "name,cell_code,bucket_seconds,value" and one row per record.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "cvnet/spatial_index.hpp"

namespace cvnet {

struct TransitionTuple {
  GeoPoint origin;
  ClockTime origin_time;
  GeoPoint destination;
  ClockTime destination_time;
  double reward = 0.0;
  int duration_steps = 1;
  bool is_terminal = false;
  bool is_trip = false;
  std::string trajectory_id;
  Eigen::VectorXd static_context;  // empty unless the trajectory carries "static"
};

struct LineError {
  std::size_t line = 0;
  std::string message;
};

struct TrajectoryDataset {
  std::optional<IndexConfig> index;
  std::vector<TransitionTuple> transitions;
  std::size_t trajectories = 0;
  std::vector<LineError> errors;  // skipped lines
};

/// Splits one trajectory's events into option transitions. Throws DataError
/// for an event that ends at or before it starts, or out-of-order events.
std::vector<TransitionTuple> split_trajectory(const nlohmann::json& trajectory);

TrajectoryDataset ingest_trajectories(std::istream& in);

inline const std::vector<std::string>& default_dynamic_features() {
  static const std::vector<std::string> names{"query_count", "order_count",
                                              "idle_driver_count"};
  return names;
}

struct RangeQueryConfig {
  int rg_seconds = 1800;
  int interval_seconds = 300;
};

struct ContextSample {
  int bucket_seconds = 0;
  Eigen::VectorXd values;
};

/// Feature records keyed by (name, spatial cell, time bucket). The finest
/// tiling layer is the base resolution; lookups fall back to the coarser
/// layers' cells containing the same point.
class FeatureStore {
 public:
  FeatureStore(IndexConfig index, std::vector<std::string> feature_names = default_dynamic_features(),
               RangeQueryConfig range = {});

  const IndexConfig& index() const { return index_; }
  const std::vector<std::string>& feature_names() const { return names_; }
  const RangeQueryConfig& range_config() const { return range_; }
  int dimension() const { return static_cast<int>(names_.size()); }

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  std::size_t duplicate_count() const { return duplicates_; }
  const std::vector<LineError>& errors() const { return errors_; }

  /// Inserts or overwrites; returns false for an unknown name or cell code.
  bool put(const std::string& name, const std::string& cell_code, int bucket_seconds,
           double value);
  std::optional<double> get(const std::string& name, const std::string& cell_code,
                            int bucket_seconds) const;

  /// Context vectors for every logging bucket meeting [mu - rg, mu + rg],
  /// assembled at the cell containing l with coarser-cell fallback per
  /// feature. Buckets with no feature at any level are omitted; features
  /// missing in a present bucket read as 0.
  std::vector<ContextSample> range_query(const GeoPoint& l, ClockTime mu, int rg_seconds) const;

  /// Mean context of the base cell containing l (all buckets), else the
  /// global mean, else zeros.
  Eigen::VectorXd cell_mean(const GeoPoint& l) const;

  /// Must be called after the last put() before cell_mean() is used.
  void finalize();

  void write_csv(std::ostream& out) const;

  void record_error(std::size_t line, std::string message) {
    errors_.push_back({line, std::move(message)});
  }

 private:
  struct Key {
    int name;
    int layer;
    int q;
    int r;
    int bucket;
    friend bool operator==(const Key&, const Key&) = default;
  };
  struct KeyHash {
    std::size_t operator()(const Key& k) const noexcept;
  };

  std::string base_code(const GeoPoint& l) const;

  IndexConfig index_;
  std::vector<std::string> names_;
  RangeQueryConfig range_;
  std::unordered_map<Key, double, KeyHash> records_;
  std::size_t duplicates_ = 0;
  std::vector<LineError> errors_;
  std::unordered_map<std::string, Eigen::VectorXd> cell_means_;
  Eigen::VectorXd global_mean_;
  bool finalized_ = false;
};

/// Reads a feature CSV. The header's IndexConfig wins; `fallback_index` is
/// used if the stream has none. Bad rows are recorded in errors().
FeatureStore ingest_features(std::istream& in, const IndexConfig* fallback_index = nullptr,
                             std::vector<std::string> names = default_dynamic_features(),
                             RangeQueryConfig range = {});

struct AugmentedTransition {
  Eigen::VectorXd origin_context;
  Eigen::VectorXd destination_context;
  bool origin_missing = false;
  bool destination_missing = false;
};

/// Uniform draw from range_query at each endpoint. An empty query result is
/// flagged and replaced by the per-cell mean.
AugmentedTransition randomize_context(const TransitionTuple& t, int rg_seconds,
                                      const FeatureStore& store, std::mt19937_64& rng);

}  // namespace cvnet
