#pragma once

// Multi-driver dispatch simulator on a synthetic planar city.
//
// A city is a square with demand hotspots of three kinds (residential,
// business, leisure). Each hotspot is a Gaussian blob whose center drifts
// linearly over the day and whose origin/destination weights follow
// time-of-day bumps, so that morning trips flow residential -> business and
// evening trips the other way. Ride queries arrive as a time-inhomogeneous
// Poisson process; each converts to an order with a fixed probability.
//
// Every window of `window_seconds`:
//   1. orders requested during the window join the pending pool
//   2. trips whose drop-off time has passed complete and credit their fare
//   3. pending orders older than the patience expire
//   4. the policy matches idle drivers to pending orders within the radius
//   5. each answered order is cancelled with probability
//      min(cancel_max, pickup / cancel_distance_scale); otherwise the driver
//      drives to the pickup and then to the destination at constant speed
//   6. idle drivers drift toward nearby hotspots or random-walk
//   7. idle drivers go offline / offline drivers come back at constant hazards
//
// All randomness after city generation is counter-based and keyed by
// (order id) or (driver id, window), so that different policies run on the
// same day see identical arrivals and identical random draws.

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cvnet/dispatch.hpp"
#include "cvnet/feature_store.hpp"
#include "cvnet/spatial_index.hpp"
#include "cvnet/value_function.hpp"

namespace cvnet {

struct WorldConfig {
  double world_size = 10000.0;  // meters
  int horizon_seconds = kSecondsPerDay;
  int window_seconds = 10;
  int driver_count = 200;
  double daily_orders = 8000.0;  // expected orders (converted queries) per day
  double query_conversion = 0.7;
  int hotspot_count = 8;
  double background_fraction = 0.15;
  std::vector<double> hourly_profile;  // 24 relative intensities; empty = built-in
  double base_fare = 3.0;
  double per_km_fare = 1.2;
  double speed = 8.0;  // m/s
  int patience_seconds = 300;
  double cancel_max = 0.8;
  double cancel_distance_scale = 5000.0;  // meters
  double hotspot_move_probability = 0.3;
  double idle_speed = 4.0;  // m/s while cruising
  double offline_hazard = 1.0 / 14400.0;  // per second, idle drivers
  double online_hazard = 1.0 / 3600.0;    // per second, offline drivers
  double initial_online = 0.8;
  double broadcast_radius = 2000.0;
  int feature_interval_seconds = 300;
  int feature_window_seconds = 60;
  IndexConfig index = IndexConfig::defaults();
  std::uint64_t seed = 1;  // city layout; the day seed is separate

  void validate() const;
  double hourly_intensity(double seconds_of_day) const;  // relative, interpolated
};

void to_json(nlohmann::json& j, const WorldConfig& c);
void from_json(const nlohmann::json& j, WorldConfig& c);

enum class HotspotKind { Residential, Business, Leisure };

struct Hotspot {
  HotspotKind kind = HotspotKind::Residential;
  GeoPoint center;  // at midday
  GeoPoint drift;   // displacement over the whole day
  double sigma = 600.0;
  double weight = 1.0;

  GeoPoint center_at(double seconds_of_day) const;
  double origin_weight(double seconds_of_day) const;
  double destination_weight(double seconds_of_day) const;
};

enum class DriverStatus { Idle, EnRoute, OnTrip, Offline };

struct TrajectoryEvent {
  bool trip = false;
  int t0 = 0, t1 = 0;
  GeoPoint from, to;
  double fare = 0.0;
};

struct Driver {
  int id = 0;
  GeoPoint position;
  bool online = true;
  int busy_until = 0;    // drop-off time of the current trip
  int pickup_until = 0;  // arrival at the pickup
  int order = -1;
  double income = 0.0;
  // Trajectory bookkeeping for export.
  int session = 0;
  int last_time = 0;
  GeoPoint last_position;
  std::vector<TrajectoryEvent> events;

  bool busy(int now) const { return order >= 0 && busy_until > now; }
  DriverStatus status(int now) const;
};

enum class OrderState { Pending, Answered, Finished, Cancelled, Expired };
const char* to_string(OrderState s);

struct Order {
  int id = 0;
  int request_time = 0;
  GeoPoint origin, destination;
  double fare = 0.0;
  OrderState state = OrderState::Pending;
  int driver = -1;
  double pickup_distance = 0.0;
  int answer_time = -1;
  int finish_time = -1;
};

struct Query {
  int time = 0;
  GeoPoint location;
  int order = -1;  // index of the converted order, -1 if not converted
};

/// A dispatch policy: planner settings plus an optional state value.
struct Policy {
  std::string name = "myopic";
  PlannerConfig planner;
  std::shared_ptr<const StateValueFunction> value;  // null for myopic
};

Policy myopic_policy(double match_bonus = 1000.0, double broadcast_radius = 2000.0);
/// Value policy on the distilled head of a checkpoint.
Policy cvnet_policy(std::shared_ptr<const Checkpoint> ckpt, PlannerConfig planner,
                    std::string name = "cvnet");
Policy tabular_policy(std::shared_ptr<const StateValueFunction> table, PlannerConfig planner,
                      std::string name = "tval");

struct WindowReport {
  int time = 0;  // decision time (end of the window)
  int requested = 0;  // cumulative
  int answered = 0;
  int finished = 0;
  int cancelled = 0;
  int expired = 0;
  int pending = 0;
  int new_orders = 0;
  int candidates = 0;
  int matched = 0;
  double tdi = 0.0;  // cumulative
};

struct EpisodeMetrics {
  double tdi = 0.0;
  int requested = 0, answered = 0, finished = 0, cancelled = 0, expired = 0;
  double answer_rate = 0.0;
  double finish_rate = 0.0;
  double mean_pickup_distance = 0.0;  // over answered orders
  std::vector<WindowReport> series;
};

/// Runtime checks of the no-double-booking and income invariants. Throws
/// std::logic_error on a violation.
class Auditor {
 public:
  void check_window(const std::vector<Driver>& drivers, const std::vector<Order>& orders,
                    const Assignment& a, int now);
  void check_income(const std::vector<Driver>& drivers, const std::vector<Order>& orders);

 private:
  std::vector<double> last_income_;
};

class World {
 public:
  World(WorldConfig cfg, std::uint64_t day_seed);

  const WorldConfig& config() const { return cfg_; }
  const std::vector<Hotspot>& hotspots() const { return hotspots_; }
  const std::vector<Driver>& drivers() const { return drivers_; }
  const std::vector<Order>& orders() const { return orders_; }
  const std::vector<Query>& queries() const { return queries_; }
  int now() const { return now_; }
  std::uint64_t day_seed() const { return day_seed_; }
  bool done() const { return now_ >= cfg_.horizon_seconds; }

  /// Advances one dispatch window under `policy`.
  WindowReport step_window(const Policy& policy);

  /// Completes trips still in progress after the horizon, expires pending
  /// orders and closes all driver sessions.
  void finish();

  EpisodeMetrics metrics() const;

  /// Per-window JSONL of order lifecycle, assignment and idle-driver
  /// snapshot events. Must outlive the run.
  void set_event_log(std::ostream* out) { event_log_ = out; }
  /// Dispatch debug dump (one JSONL line per window with candidates).
  void set_dispatch_log(std::ostream* out) { dispatch_log_ = out; }

  /// Dynamic-context features recorded so far (query/order/idle counts per
  /// base cell, every feature interval).
  const FeatureStore& features() const { return features_; }

  /// Trajectories of every driver session, in the ingestion schema.
  void export_trajectories(std::ostream& out) const;
  void export_features(std::ostream& out) const { features_.write_csv(out); }

  std::string base_cell_code(const GeoPoint& p) const;

 private:
  void generate_arrivals(std::uint64_t day_seed);
  template <typename Rng>
  GeoPoint sample_point(Rng& rng, double t, bool origin) const;
  GeoPoint clamp(GeoPoint p) const;
  void complete_trips(int t, bool all, nlohmann::json* events);
  void open_session(Driver& d, int t);
  void close_session(Driver& d, int t);
  void record_features(int t, nlohmann::json* events);

  WorldConfig cfg_;
  std::uint64_t day_seed_ = 0;
  std::vector<Hotspot> hotspots_;
  std::vector<Driver> drivers_;
  std::vector<Order> orders_;
  std::vector<Query> queries_;
  std::vector<int> pending_;
  std::size_t next_order_ = 0;
  int now_ = 0;
  int window_index_ = 0;
  bool finished_ = false;
  std::uint64_t cancel_stream_, move_stream_, online_stream_;
  int requested_ = 0, answered_ = 0, finished_count_ = 0, cancelled_ = 0, expired_ = 0;
  double tdi_ = 0.0;
  double pickup_sum_ = 0.0;
  std::vector<WindowReport> series_;
  std::ostream* event_log_ = nullptr;
  std::ostream* dispatch_log_ = nullptr;
  FeatureStore features_;
  Auditor auditor_;
  struct FinishedSession {
    std::string id;
    std::vector<TrajectoryEvent> events;
  };
  std::vector<FinishedSession> sessions_;
};

/// City layout from cfg.seed; arrivals and all later draws from `day_seed`.
World generate_city(const WorldConfig& cfg, std::uint64_t day_seed);

struct EpisodeResult {
  EpisodeMetrics metrics;
  std::unique_ptr<World> world;  // final state, for exports
};

EpisodeResult run_episode(const WorldConfig& cfg, const Policy& policy, std::uint64_t day_seed,
                          std::ostream* event_log = nullptr);

struct ExperimentCell {
  std::string policy;
  std::uint64_t seed = 0;
  EpisodeMetrics metrics;
  double normalized_tdi = 1.0;
};

struct PolicySummary {
  std::string policy;
  int seeds = 0;
  double tdi_mean = 0, tdi_std = 0;
  double normalized_tdi_mean = 0, normalized_tdi_std = 0;
  double answer_rate_mean = 0, finish_rate_mean = 0;
  double pickup_distance_mean = 0;
};

struct ExperimentResult {
  std::vector<ExperimentCell> cells;  // policy-major, seeds in the given order
  std::vector<PolicySummary> summary;
  std::string baseline;
};

/// Policy x seed grid; TDI is normalized per seed by the baseline policy
/// ("myopic" when present, else the first). Cells run on up to `workers`
/// threads; results do not depend on the worker count.
ExperimentResult run_experiment(const WorldConfig& cfg, const std::vector<Policy>& policies,
                                const std::vector<std::uint64_t>& seeds, int workers = 1);

void write_metrics_csv(std::ostream& out, const std::vector<ExperimentCell>& cells);
void write_summary_csv(std::ostream& out, const std::vector<PolicySummary>& summary);
void write_series_csv(std::ostream& out, const std::vector<WindowReport>& series);

/// One-sided paired t statistic of mean(a - b) > 0 and its critical value
/// at the 95% level for n - 1 degrees of freedom.
struct PairedTest {
  double mean_difference = 0.0;
  double t = 0.0;
  double critical = 0.0;
  bool significant = false;
};
PairedTest paired_one_sided_test(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace cvnet
