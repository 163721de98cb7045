#pragma once

// Per-window driver-order matching.
//
//   rho_ij = R_ij (gamma^k - 1) / (k (gamma - 1)) + gamma^k V~(s_j) - V~(s_i) + Omega U_ij
//
// with U_ij = -pickup_km, solved as a maximum-weight partial matching where a
// pair is admissible only if rho_ij exceeds the skip threshold.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "cvnet/spatial_index.hpp"
#include "cvnet/value_function.hpp"

namespace cvnet {

struct DispatchDriver {
  int id = 0;
  GeoPoint location;
};

struct DispatchOrder {
  int id = 0;
  GeoPoint origin;
  GeoPoint destination;
  double fee = 0.0;  // quoted fare, used by the default estimator
};

struct TripEstimate {
  double fee = 0.0;
  int duration_steps = 1;  // assignment to drop-off, in SMDP steps
};

/// Fare and ETA model used to fill R_ij and k_ij. The simulator plugs in its
/// own model; a replay can return logged values.
using TripEstimator =
    std::function<TripEstimate(const DispatchDriver&, const DispatchOrder&, ClockTime now)>;

/// Quoted fee, duration = (pickup + trip distance) / speed in whole steps.
TripEstimator straight_line_estimator(double speed_mps);

struct DispatchCandidate {
  int driver_id = 0;
  int order_id = 0;
  double pickup_distance = 0.0;  // meters
  double fee = 0.0;
  int duration_steps = 1;
  GeoPoint driver_location;
  ClockTime driver_time;
  GeoPoint destination;
  ClockTime destination_time;
};

enum class ScoreKind { Myopic, Value };

struct PlannerConfig {
  ScoreKind kind = ScoreKind::Value;
  double gamma = 0.92;
  double omega = 0.0;
  double broadcast_radius = 2000.0;  // meters
  double skip_threshold = 0.0;
  /// Evaluate V~ at the destination at now + k steps (true) or at now.
  bool destination_at_arrival = true;
  /// Constant added to every admissible pair. A bonus larger than any
  /// utility spread makes the solver maximize the number of matches first.
  double match_bonus = 0.0;
};

void to_json(nlohmann::json& j, const PlannerConfig& c);
void from_json(const nlohmann::json& j, PlannerConfig& c);

/// Memoizes V~ per exact state (location, time) within one window.
class ValueCache {
 public:
  explicit ValueCache(const StateValueFunction* v) : v_(v) {}
  double operator()(const GeoPoint& l, ClockTime mu);
  std::size_t evaluations() const { return evaluations_; }
  std::size_t lookups() const { return lookups_; }

 private:
  struct Key {
    std::uint64_t x, y;
    int t;
    friend bool operator==(const Key&, const Key&) = default;
  };
  struct KeyHash {
    std::size_t operator()(const Key& k) const noexcept;
  };
  const StateValueFunction* v_;
  std::unordered_map<Key, double, KeyHash> memo_;
  std::size_t evaluations_ = 0;
  std::size_t lookups_ = 0;
};

struct UtilityTerms {
  double reward_term = 0.0;  // discounted, spread fare
  double value_gain = 0.0;   // gamma^k V~(s_j) - V~(s_i)
  double experience = 0.0;   // Omega * U_ij
  double utility = 0.0;      // sum of the above plus the match bonus
};

/// Full value-based score. V~ values are taken from `values`.
UtilityTerms utility_score(const DispatchCandidate& c, ValueCache& values, double gamma,
                           double omega);

/// Score for the configured policy kind (myopic: -pickup km), plus bonus.
UtilityTerms score_candidate(const DispatchCandidate& c, ValueCache* values,
                             const PlannerConfig& cfg);

struct ScoredCandidate {
  DispatchCandidate candidate;
  UtilityTerms terms;
};

/// All driver-order pairs within the broadcast radius, scored. `value` may be
/// null for the myopic policy.
std::vector<ScoredCandidate> build_utility_matrix(std::span<const DispatchDriver> drivers,
                                                  std::span<const DispatchOrder> orders,
                                                  ClockTime now, const StateValueFunction* value,
                                                  const PlannerConfig& cfg,
                                                  const TripEstimator& estimator,
                                                  ValueCache* cache = nullptr);

struct MatchedPair {
  int driver_id = 0;
  int order_id = 0;
  double utility = 0.0;
};

struct Assignment {
  std::vector<MatchedPair> pairs;  // sorted by driver id
  double total_utility = 0.0;
  std::vector<int> unassigned_orders;
  std::vector<int> unassigned_drivers;
};

/// Maximum total utility over one-to-one partial matchings of the candidate
/// pairs, admitting a pair only if utility > skip_threshold. Among optimal
/// matchings the one whose per-driver order ids (drivers ascending, unmatched
/// last) is lexicographically smallest is returned.
Assignment solve_assignment(std::span<const ScoredCandidate> candidates,
                            double skip_threshold = 0.0);

/// Dense Hungarian method on an n x n cost matrix (minimization). Returns
/// row -> column and the optimal dual potentials (u_i + v_j <= cost_ij).
struct HungarianResult {
  std::vector<int> row_to_col;
  std::vector<double> u, v;
  double cost = 0.0;
};
HungarianResult hungarian_min_cost(const std::vector<std::vector<double>>& cost);

/// One JSONL line: candidates with utility components and the matching.
void write_dispatch_debug(std::ostream& out, ClockTime now,
                          std::span<const ScoredCandidate> candidates, const Assignment& a);

}  // namespace cvnet
