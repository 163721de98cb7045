#include "cvnet/dispatch.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <ostream>

#include <json.hpp>

#include "cvnet/config_json.hpp"
#include "cvnet/policy_evaluation.hpp"

namespace cvnet {

TripEstimator straight_line_estimator(double speed_mps) {
  if (!(speed_mps > 0.0)) throw ConfigError("speed must be > 0");
  return [speed_mps](const DispatchDriver& d, const DispatchOrder& o, ClockTime) {
    const double meters = distance(d.location, o.origin) + distance(o.origin, o.destination);
    const int steps = static_cast<int>(std::lround(meters / speed_mps / kStepSeconds));
    return TripEstimate{o.fee, std::max(1, steps)};
  };
}

void to_json(nlohmann::json& j, const PlannerConfig& c) {
  j = {{"kind", c.kind == ScoreKind::Myopic ? "myopic" : "value"},
       {"gamma", c.gamma},
       {"omega", c.omega},
       {"broadcast_radius", c.broadcast_radius},
       {"skip_threshold", c.skip_threshold},
       {"destination_at_arrival", c.destination_at_arrival},
       {"match_bonus", c.match_bonus}};
}

void from_json(const nlohmann::json& j, PlannerConfig& c) {
  constexpr std::string_view ctx = "planner";
  reject_unknown_keys(j,
                      {"kind", "gamma", "omega", "broadcast_radius", "skip_threshold",
                       "destination_at_arrival", "match_bonus"},
                      ctx);
  if (j.contains("kind")) {
    const std::string k = j.at("kind").get<std::string>();
    if (k == "myopic") {
      c.kind = ScoreKind::Myopic;
    } else if (k == "value") {
      c.kind = ScoreKind::Value;
    } else {
      throw ConfigError("planner.kind must be 'myopic' or 'value'");
    }
  }
  read_optional(j, "gamma", c.gamma, ctx);
  read_optional(j, "omega", c.omega, ctx);
  read_optional(j, "broadcast_radius", c.broadcast_radius, ctx);
  read_optional(j, "skip_threshold", c.skip_threshold, ctx);
  read_optional(j, "destination_at_arrival", c.destination_at_arrival, ctx);
  read_optional(j, "match_bonus", c.match_bonus, ctx);
  if (!(c.gamma > 0.0 && c.gamma <= 1.0)) throw ConfigError("planner.gamma must be in (0, 1]");
  if (!(c.broadcast_radius >= 0.0)) throw ConfigError("planner.broadcast_radius must be >= 0");
}

std::size_t ValueCache::KeyHash::operator()(const Key& k) const noexcept {
  return static_cast<std::size_t>(mix64(mix64(k.x ^ mix64(k.y)) ^ static_cast<std::uint64_t>(k.t)));
}

double ValueCache::operator()(const GeoPoint& l, ClockTime mu) {
  ++lookups_;
  if (!v_) return 0.0;
  const Key key{std::bit_cast<std::uint64_t>(l.x), std::bit_cast<std::uint64_t>(l.y), mu.seconds()};
  const auto it = memo_.find(key);
  if (it != memo_.end()) return it->second;
  ++evaluations_;
  const double value = v_->value(l, mu);
  memo_.emplace(key, value);
  return value;
}

UtilityTerms utility_score(const DispatchCandidate& c, ValueCache& values, double gamma,
                           double omega) {
  if (c.duration_steps < 1) throw std::invalid_argument("candidate duration must be >= 1");
  UtilityTerms t;
  const int k = c.duration_steps;
  t.reward_term = discounted_option_reward(c.fee, k, gamma);
  t.value_gain = std::pow(gamma, k) * values(c.destination, c.destination_time) -
                 values(c.driver_location, c.driver_time);
  t.experience = omega * (-c.pickup_distance / 1000.0);
  t.utility = t.reward_term + t.value_gain + t.experience;
  return t;
}

UtilityTerms score_candidate(const DispatchCandidate& c, ValueCache* values,
                             const PlannerConfig& cfg) {
  UtilityTerms t;
  if (cfg.kind == ScoreKind::Myopic) {
    t.experience = -c.pickup_distance / 1000.0;
    t.utility = t.experience;
  } else {
    ValueCache none(nullptr);
    t = utility_score(c, values ? *values : none, cfg.gamma, cfg.omega);
  }
  t.utility += cfg.match_bonus;
  return t;
}

std::vector<ScoredCandidate> build_utility_matrix(std::span<const DispatchDriver> drivers,
                                                  std::span<const DispatchOrder> orders,
                                                  ClockTime now, const StateValueFunction* value,
                                                  const PlannerConfig& cfg,
                                                  const TripEstimator& estimator,
                                                  ValueCache* cache) {
  ValueCache local(value);
  ValueCache* values = cache ? cache : &local;
  std::vector<ScoredCandidate> out;
  for (const auto& o : orders) {
    for (const auto& d : drivers) {
      const double pickup = distance(d.location, o.origin);
      if (pickup > cfg.broadcast_radius) continue;
      const TripEstimate est = estimator(d, o, now);
      DispatchCandidate c;
      c.driver_id = d.id;
      c.order_id = o.id;
      c.pickup_distance = pickup;
      c.fee = est.fee;
      c.duration_steps = std::max(1, est.duration_steps);
      c.driver_location = d.location;
      c.driver_time = now;
      c.destination = o.destination;
      c.destination_time =
          cfg.destination_at_arrival ? now.advanced(c.duration_steps * kStepSeconds) : now;
      out.push_back({c, score_candidate(c, values, cfg)});
    }
  }
  return out;
}

HungarianResult hungarian_min_cost(const std::vector<std::vector<double>>& a) {
  const int n = static_cast<int>(a.size());
  HungarianResult res;
  res.row_to_col.assign(static_cast<std::size_t>(n), -1);
  res.u.assign(static_cast<std::size_t>(n), 0.0);
  res.v.assign(static_cast<std::size_t>(n), 0.0);
  if (n == 0) return res;
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // 1-based potentials and column owners; column 0 is the virtual root.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = kInf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  for (int j = 1; j <= n; ++j) res.row_to_col[p[j] - 1] = j - 1;
  for (int i = 0; i < n; ++i) {
    res.u[i] = u[i + 1];
    res.v[i] = v[i + 1];
    res.cost += a[i][res.row_to_col[i]];
  }
  return res;
}

namespace {

// Lexicographic refinement over the tight-edge subgraph of an optimal dual.
// Every perfect matching on tight edges is optimal, so fixing rows greedily
// (smallest admissible column first, "unmatched" last) while a perfect
// matching survives yields the lexicographically smallest optimum.
class TightRefiner {
 public:
  enum class Mode { Free, Fixed, Zero };

  TightRefiner(int n, std::vector<std::vector<char>> tight, std::vector<std::vector<char>> real,
               std::vector<int> match)
      : n_(n), tight_(std::move(tight)), real_(std::move(real)), row_to_col_(std::move(match)),
        col_to_row_(static_cast<std::size_t>(n)), mode_(static_cast<std::size_t>(n), Mode::Free),
        fixed_col_(static_cast<std::size_t>(n), -1), col_fixed_(static_cast<std::size_t>(n), 0) {
    for (int i = 0; i < n_; ++i) col_to_row_[static_cast<std::size_t>(row_to_col_[i])] = i;
  }

  bool allowed(int row, int col) const {
    if (!tight_[row][col]) return false;
    switch (mode_[row]) {
      case Mode::Fixed: return fixed_col_[row] == col;
      case Mode::Zero: return !real_[row][col] && !col_fixed_[col];
      case Mode::Free: return !col_fixed_[col];
    }
    return false;
  }

  bool try_fix(int row, int col) {
    mode_[row] = Mode::Fixed;
    fixed_col_[row] = col;
    col_fixed_[col] = 1;
    if (reroute(row)) return true;
    mode_[row] = Mode::Free;
    fixed_col_[row] = -1;
    col_fixed_[col] = 0;
    return false;
  }

  void set_zero(int row) {
    mode_[row] = Mode::Zero;
    if (!reroute(row)) throw std::logic_error("assignment refinement lost feasibility");
  }

  const std::vector<int>& row_to_col() const { return row_to_col_; }

 private:
  // Make `row` sit on an allowed column by an alternating cycle through its
  // current column.
  bool reroute(int row) {
    const int home = row_to_col_[row];
    if (allowed(row, home)) return true;
    std::vector<char> seen(static_cast<std::size_t>(n_), 0);
    seen[static_cast<std::size_t>(home)] = 1;
    return augment(row, home, seen);
  }

  bool augment(int row, int target, std::vector<char>& seen) {
    for (int c = 0; c < n_; ++c) {
      if (!allowed(row, c)) continue;
      if (c == target) {
        assign(row, c);
        return true;
      }
      if (seen[static_cast<std::size_t>(c)]) continue;
      seen[static_cast<std::size_t>(c)] = 1;
      const int owner = col_to_row_[static_cast<std::size_t>(c)];
      if (augment(owner, target, seen)) {
        assign(row, c);
        return true;
      }
    }
    return false;
  }

  void assign(int row, int col) {
    row_to_col_[row] = col;
    col_to_row_[static_cast<std::size_t>(col)] = row;
  }

  int n_;
  std::vector<std::vector<char>> tight_;
  std::vector<std::vector<char>> real_;
  std::vector<int> row_to_col_;
  std::vector<int> col_to_row_;
  std::vector<Mode> mode_;
  std::vector<int> fixed_col_;
  std::vector<char> col_fixed_;
};

}  // namespace

Assignment solve_assignment(std::span<const ScoredCandidate> candidates, double skip_threshold) {
  std::map<std::pair<int, int>, double> util;
  for (const auto& sc : candidates) {
    const double u = sc.terms.utility;
    if (!std::isfinite(u)) throw std::invalid_argument("non-finite utility");
    const auto key = std::make_pair(sc.candidate.driver_id, sc.candidate.order_id);
    auto [it, inserted] = util.emplace(key, u);
    if (!inserted) it->second = std::max(it->second, u);
  }
  std::vector<int> drivers, orders;
  for (const auto& [key, u] : util) {
    drivers.push_back(key.first);
    orders.push_back(key.second);
  }
  std::sort(drivers.begin(), drivers.end());
  drivers.erase(std::unique(drivers.begin(), drivers.end()), drivers.end());
  std::sort(orders.begin(), orders.end());
  orders.erase(std::unique(orders.begin(), orders.end()), orders.end());

  Assignment out;
  const int nd = static_cast<int>(drivers.size());
  const int no = static_cast<int>(orders.size());
  const int n = std::max(nd, no);
  if (n == 0) return out;

  auto row_of = [&](int id) {
    return static_cast<int>(std::lower_bound(drivers.begin(), drivers.end(), id) - drivers.begin());
  };
  auto col_of = [&](int id) {
    return static_cast<int>(std::lower_bound(orders.begin(), orders.end(), id) - orders.begin());
  };
  // Pairs with negative utility never beat leaving both sides unmatched, so
  // they are treated as inadmissible even when the threshold is below zero.
  std::vector<std::vector<double>> w(n, std::vector<double>(n, 0.0));
  std::vector<std::vector<char>> real(n, std::vector<char>(n, 0));
  double scale = 1.0;
  for (const auto& [key, u] : util) {
    if (!(u > skip_threshold) || u < 0.0) continue;
    const int i = row_of(key.first), j = col_of(key.second);
    w[i][j] = u;
    real[i][j] = 1;
    scale = std::max(scale, std::abs(u));
  }
  std::vector<std::vector<double>> cost(n, std::vector<double>(n));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) cost[i][j] = -w[i][j];
  const HungarianResult h = hungarian_min_cost(cost);

  const double tol = 1e-9 * scale * n;
  std::vector<std::vector<char>> tight(n, std::vector<char>(n, 0));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) tight[i][j] = cost[i][j] - h.u[i] - h.v[j] <= tol;
  for (int i = 0; i < n; ++i) tight[i][h.row_to_col[i]] = 1;

  TightRefiner refine(n, tight, real, h.row_to_col);
  for (int i = 0; i < nd; ++i) {
    bool fixed = false;
    for (int j = 0; j < no && !fixed; ++j) {
      if (real[i][j] && tight[i][j]) fixed = refine.try_fix(i, j);
    }
    if (!fixed) refine.set_zero(i);
  }

  std::vector<char> order_used(static_cast<std::size_t>(no), 0);
  for (int i = 0; i < nd; ++i) {
    const int j = refine.row_to_col()[i];
    if (j < no && real[i][j]) {
      out.pairs.push_back({drivers[i], orders[j], w[i][j]});
      out.total_utility += w[i][j];
      order_used[static_cast<std::size_t>(j)] = 1;
    } else {
      out.unassigned_drivers.push_back(drivers[i]);
    }
  }
  for (int j = 0; j < no; ++j) {
    if (!order_used[static_cast<std::size_t>(j)]) out.unassigned_orders.push_back(orders[j]);
  }
  return out;
}

void write_dispatch_debug(std::ostream& out, ClockTime now,
                          std::span<const ScoredCandidate> candidates, const Assignment& a) {
  nlohmann::json line;
  line["t"] = now.seconds();
  auto& cs = line["candidates"] = nlohmann::json::array();
  for (const auto& sc : candidates) {
    cs.push_back({{"driver", sc.candidate.driver_id},
                  {"order", sc.candidate.order_id},
                  {"pickup_m", sc.candidate.pickup_distance},
                  {"fee", sc.candidate.fee},
                  {"k", sc.candidate.duration_steps},
                  {"reward_term", sc.terms.reward_term},
                  {"value_gain", sc.terms.value_gain},
                  {"omega_u", sc.terms.experience},
                  {"utility", sc.terms.utility}});
  }
  auto& ms = line["matching"] = nlohmann::json::array();
  for (const auto& p : a.pairs) {
    ms.push_back({{"driver", p.driver_id}, {"order", p.order_id}, {"utility", p.utility}});
  }
  line["total_utility"] = a.total_utility;
  out << line.dump() << '\n';
}

}  // namespace cvnet
