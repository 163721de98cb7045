#pragma once

// Regularized SMDP policy evaluation for the cerebellar value network, its
// distillation into the context-free head, and the tabular DP baseline.

#include <chrono>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "cvnet/checkpoint.hpp"
#include "cvnet/feature_store.hpp"
#include "cvnet/value_function.hpp"
#include "cvnet/value_network.hpp"

namespace cvnet {

/// Fare R spread uniformly over k steps and discounted per step:
/// sum_{i<k} gamma^i R / k = R (gamma^k - 1) / (k (gamma - 1)); R at gamma = 1.
double discounted_option_reward(double reward, int k, double gamma);

/// R_hat + gamma^k v_next; terminal successors contribute nothing.
double td_target(double reward, int k, double gamma, double v_next, bool terminal);

struct TrainConfig {
  double gamma = 0.92;
  double lambda = 1e-4;
  NormOrder norm = NormOrder::L1;
  int batch_size = 32;
  int max_epochs = 20;
  std::optional<std::int64_t> max_steps;  // overrides max_epochs when set
  std::int64_t target_sync_interval = 100000;
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double lr_decay = 1.0;  // per-step multiplicative factor on the step size
  int rg_seconds = 1800;
  std::uint64_t seed = 0;
  double grad_clip_norm = 10.0;  // 0 disables
  double divergence_ceiling = 1e6;
  int log_interval = 100;
  std::int64_t checkpoint_interval = 0;  // steps between distillations; 0 = once per epoch
  bool distill = true;
  int distill_max_epochs = 5;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Rejects unknown keys.
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainingLogRecord {
  std::int64_t step = 0;
  double data_loss = 0;
  double penalty = 0;
  double lipschitz_bound = 0;
  double mean_v = 0;
  double wall_ms = 0;
};

void write_training_log_csv(std::ostream& out, std::span<const TrainingLogRecord> log,
                            bool include_wall_time = true);

/// Parameters excluded from gradient steps.
struct FreezeMask {
  bool embedding = false;
  std::vector<bool> main_layers;  // by layer index; missing entries are trainable
};

struct Adam {
  double learning_rate = 3e-4, beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
  std::int64_t t = 0;
  RowMajorMatrixX<double> m_emb, v_emb;
  Mlp<double> m_mlp, v_mlp;

  void init(const ValueNetwork& net, const Mlp<double>& mlp);
  /// Dense Adam on an MLP.
  void step_mlp(Mlp<double>& params, const Mlp<double>& grads, const FreezeMask* freeze = nullptr);
  /// Lazy Adam: only rows present in the sparse gradient move.
  void step_embedding(RowMajorMatrixX<double>& theta,
                      const std::map<std::int64_t, Eigen::VectorXd>& rows);
  void tick() { ++t; }
};

/// One training example with its range-query results resolved up front.
/// Context vectors are already log1p-standardized.
struct PreparedTransition {
  ActivationVector origin;
  ActivationVector destination;
  Eigen::VectorXd static_context;
  std::vector<Eigen::VectorXd> origin_contexts;  // empty = missing
  std::vector<Eigen::VectorXd> destination_contexts;
  Eigen::VectorXd origin_fallback;  // per-cell mean
  Eigen::VectorXd destination_fallback;
  double reward = 0;
  int k = 1;
  bool terminal = false;
};

struct TrainStats {
  std::int64_t steps = 0;
  std::int64_t epochs = 0;
  std::int64_t target_syncs = 0;
  std::int64_t missing_context_draws = 0;
  std::vector<double> distill_mse;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<TrainingLogRecord> log;
  TrainStats stats;
};

/// Algorithm: sample minibatch -> randomize context at both endpoints ->
/// TD targets from the target network -> gradient step on the regularized
/// loss -> copy main into target every C steps.
class Trainer {
 public:
  Trainer(TrainConfig config, NetworkShape shape, IndexConfig index,
          std::span<const TransitionTuple> transitions, const FeatureStore* store);

  /// Replaces the freshly initialized network (main and target).
  void set_network(const ValueNetwork& net);
  void set_freeze_mask(FreezeMask mask) { freeze_ = std::move(mask); }

  /// Called after every step with (step, main, target).
  std::function<void(std::int64_t, const ValueNetwork&, const ValueNetwork&)> on_step;

  /// Runs to max_steps (or max_epochs); throws DivergenceError on blow-up.
  TrainResult run();

  /// Single optimization step; returns false when the budget is spent.
  bool step();

  const ValueNetwork& network() const { return net_; }
  const ValueNetwork& target_network() const { return target_; }
  const ContextScaling& scaling() const { return scaling_; }
  std::int64_t total_steps() const { return total_steps_; }
  std::int64_t steps_per_epoch() const;
  const std::vector<TrainingLogRecord>& log() const { return log_; }
  const TrainStats& stats() const { return stats_; }
  Checkpoint checkpoint() const;

  /// Features of a prepared endpoint under a context draw u in [0, 1).
  StateFeatures features(const PreparedTransition& t, bool destination, double u,
                         bool* missing = nullptr) const;

  std::span<const PreparedTransition> prepared() const { return data_; }

  /// Distills the current main head into the distilled head.
  double run_distillation(int epochs);

 private:
  void reshuffle();
  void maybe_checkpoint(bool end_of_epoch);

  TrainConfig cfg_;
  NetworkShape shape_;
  IndexConfig index_;
  std::vector<PreparedTransition> data_;
  ContextScaling scaling_;
  ValueNetwork net_;
  ValueNetwork target_;
  Adam adam_;
  RowNormCache<double> row_norms_;
  FreezeMask freeze_;
  std::mt19937_64 shuffle_rng_;
  std::uint64_t context_stream_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::int64_t step_ = 0;
  std::int64_t total_steps_ = 0;
  std::int64_t checkpoints_done_ = 0;
  std::int64_t last_checkpoint_step_ = 0;
  std::uint64_t distill_stream_;
  double lr_ = 0;
  std::vector<TrainingLogRecord> log_;
  TrainStats stats_;
  std::chrono::steady_clock::time_point start_;
};

/// Convenience wrapper around Trainer::run().
TrainResult train(const TrainConfig& config, const NetworkShape& shape, const IndexConfig& index,
                  std::span<const TransitionTuple> transitions, const FeatureStore* store);

struct DistillConfig {
  int epochs = 1;
  int batch_size = 32;
  double learning_rate = 3e-4;
  double lr_decay = 1.0;
  std::uint64_t seed = 0;
  /// Start from the main head evaluated at the transfer set's mean dynamic
  /// context (see warm_start_distilled) instead of the current distilled head.
  bool warm_start = true;
};

/// Copies the main head into the distilled head, folding the dynamic-context
/// columns of the first layer into its bias at `dynamic_mean`. Exact when the
/// main head ignores the dynamic context.
void warm_start_distilled(ValueNetwork& net, const Eigen::VectorXd& dynamic_mean);

/// Fits the distilled head to the frozen main head on the transfer set
/// (states with full context). Only distilled MLP weights change. Returns the
/// transfer-set MSE of the best head seen (after the warm start and after
/// every epoch), which is the head left in `net`.
double distill(ValueNetwork& net, std::span<const StateFeatures> transfer_set,
               const DistillConfig& config);

double distillation_mse(const ValueNetwork& net, std::span<const StateFeatures> transfer_set);

/// Discrete (hex cell, time bucket) state space for the tabular baseline.
struct TabularGrid {
  TilingLayer layer;

  struct Key {
    int q = 0, r = 0;
    std::int64_t bucket = 0;
    friend bool operator==(const Key&, const Key&) = default;
  };
  struct KeyHash {
    std::size_t operator()(const Key& k) const noexcept;
  };

  Key key(const GeoPoint& l, ClockTime mu) const;
};

class TabularValue : public StateValueFunction {
 public:
  TabularValue() = default;
  explicit TabularValue(TabularGrid grid) : grid_(grid) {}

  /// Missing keys and terminal time read as 0.
  double value(const GeoPoint& l, ClockTime mu) const override;
  double at(const TabularGrid::Key& k) const;
  void set(const TabularGrid::Key& k, double v) { values_[k] = v; }

  const TabularGrid& grid() const { return grid_; }
  std::size_t size() const { return values_.size(); }
  const std::unordered_map<TabularGrid::Key, double, TabularGrid::KeyHash>& values() const {
    return values_;
  }

  void write_csv(std::ostream& out) const;
  static TabularValue read_csv(std::istream& in);

 private:
  TabularGrid grid_;
  std::unordered_map<TabularGrid::Key, double, TabularGrid::KeyHash> values_;
};

struct TabularDpStats {
  int sweeps = 0;
  double final_change = 0;
};

/// Value iteration V(s) <- mean over transitions from s of R_hat + gamma^k V(s').
TabularValue tabular_dp_evaluate(std::span<const TransitionTuple> transitions,
                                 const TabularGrid& grid, double gamma, int max_sweeps = 100000,
                                 double tolerance = 1e-9, TabularDpStats* stats = nullptr);

struct ValueProfileRow {
  int bucket_start = 0;
  double mean = 0;
  double stddev = 0;
};

/// Mean/std of V over `locations` at the midpoint of each time bucket.
std::vector<ValueProfileRow> value_profile(const StateValueFunction& v,
                                           std::span<const GeoPoint> locations,
                                           int bucket_seconds);

struct Histogram {
  std::vector<double> edges;  // size bins + 1
  std::vector<std::int64_t> counts;
};

Histogram histogram(std::span<const double> values, double lo, double hi, int bins);

struct CorruptionReport {
  double sigma = 0;
  double mean_abs_shift = 0;
  double mean_before = 0, mean_after = 0;
  double std_before = 0, std_after = 0;
  Histogram before, after;
};

/// Adds N(0, sigma^2) noise to every entry of theta and compares the value
/// distribution over `states` before and after (main head).
CorruptionReport weight_corruption_probe(const ValueNetwork& net,
                                         std::span<const StateFeatures> states, double sigma,
                                         std::uint64_t seed, int bins = 40);

}  // namespace cvnet
