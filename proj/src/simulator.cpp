#include "cvnet/simulator.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>
#include <numbers>
#include <ostream>
#include <random>
#include <stdexcept>
#include <thread>
#include <unordered_map>

#include "cvnet/config_json.hpp"

namespace cvnet {

namespace {

// Relative demand per hour of the day, sampled at the middle of each hour.
const std::vector<double>& builtin_profile() {
  static const std::vector<double> p{0.30, 0.18, 0.12, 0.10, 0.10, 0.18, 0.40, 0.80,
                                     1.00, 0.85, 0.65, 0.60, 0.70, 0.70, 0.62, 0.62,
                                     0.72, 0.90, 1.00, 0.90, 0.72, 0.60, 0.40, 0.15};
  return p;
}

double bump(double hour, double center, double width) {
  const double z = (hour - center) / width;
  return std::exp(-0.5 * z * z);
}

GeoPoint step_toward(const GeoPoint& from, const GeoPoint& to, double len) {
  const double d = distance(from, to);
  if (d <= len || d == 0.0) return to;
  return {from.x + (to.x - from.x) * len / d, from.y + (to.y - from.y) * len / d};
}

int ceil_seconds(double s) { return std::max(1, static_cast<int>(std::ceil(s))); }

class CheckpointValue : public StateValueFunction {
 public:
  explicit CheckpointValue(std::shared_ptr<const Checkpoint> ckpt)
      : ckpt_(std::move(ckpt)), net_(*ckpt_, ValueHead::Distilled) {}
  double value(const GeoPoint& l, ClockTime mu) const override { return net_.value(l, mu); }

 private:
  std::shared_ptr<const Checkpoint> ckpt_;
  NetworkValueFunction net_;
};

nlohmann::json point_json(const GeoPoint& p) { return nlohmann::json::array({p.x, p.y}); }

}  // namespace

// ---------------------------------------------------------------- config

void WorldConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("world: " + m); };
  if (!(world_size > 0)) fail("world_size must be > 0");
  if (horizon_seconds <= 0 || horizon_seconds > kSecondsPerDay) {
    fail("horizon_seconds must be in (0, 86400]");
  }
  if (window_seconds <= 0) fail("window_seconds must be > 0");
  if (driver_count < 0) fail("driver_count must be >= 0");
  if (!(daily_orders >= 0)) fail("daily_orders must be >= 0");
  if (!(query_conversion > 0 && query_conversion <= 1)) fail("query_conversion must be in (0, 1]");
  if (hotspot_count < 0) fail("hotspot_count must be >= 0");
  if (!(background_fraction >= 0 && background_fraction <= 1)) {
    fail("background_fraction must be in [0, 1]");
  }
  if (!hourly_profile.empty()) {
    if (hourly_profile.size() != 24) fail("hourly_profile needs 24 values");
    for (double v : hourly_profile) {
      if (!(v >= 0) || !std::isfinite(v)) fail("hourly_profile values must be >= 0");
    }
  }
  if (!(base_fare >= 0) || !(per_km_fare >= 0)) fail("fares must be >= 0");
  if (!(speed > 0)) fail("speed must be > 0");
  if (patience_seconds <= 0) fail("patience_seconds must be > 0");
  if (!(cancel_max >= 0 && cancel_max <= 1)) fail("cancel_max must be in [0, 1]");
  if (!(cancel_distance_scale > 0)) fail("cancel_distance_scale must be > 0");
  if (!(hotspot_move_probability >= 0 && hotspot_move_probability <= 1)) {
    fail("hotspot_move_probability must be in [0, 1]");
  }
  if (!(idle_speed >= 0)) fail("idle_speed must be >= 0");
  if (!(offline_hazard >= 0) || !(online_hazard >= 0)) fail("hazards must be >= 0");
  if (!(initial_online >= 0 && initial_online <= 1)) fail("initial_online must be in [0, 1]");
  if (!(broadcast_radius >= 0)) fail("broadcast_radius must be >= 0");
  if (feature_interval_seconds <= 0 || feature_window_seconds <= 0) {
    fail("feature intervals must be > 0");
  }
  index.validate();
}

double WorldConfig::hourly_intensity(double t) const {
  const auto& p = hourly_profile.empty() ? builtin_profile() : hourly_profile;
  const double h = t / 3600.0 - 0.5;
  if (h <= 0) return p.front();
  if (h >= 23) return p.back();
  const int i = static_cast<int>(std::floor(h));
  const double f = h - i;
  return p[static_cast<std::size_t>(i)] * (1 - f) + p[static_cast<std::size_t>(i + 1)] * f;
}

void to_json(nlohmann::json& j, const WorldConfig& c) {
  j = {{"world_size", c.world_size},
       {"horizon_seconds", c.horizon_seconds},
       {"window_seconds", c.window_seconds},
       {"driver_count", c.driver_count},
       {"daily_orders", c.daily_orders},
       {"query_conversion", c.query_conversion},
       {"hotspot_count", c.hotspot_count},
       {"background_fraction", c.background_fraction},
       {"hourly_profile", c.hourly_profile},
       {"base_fare", c.base_fare},
       {"per_km_fare", c.per_km_fare},
       {"speed", c.speed},
       {"patience_seconds", c.patience_seconds},
       {"cancel_max", c.cancel_max},
       {"cancel_distance_scale", c.cancel_distance_scale},
       {"hotspot_move_probability", c.hotspot_move_probability},
       {"idle_speed", c.idle_speed},
       {"offline_hazard", c.offline_hazard},
       {"online_hazard", c.online_hazard},
       {"initial_online", c.initial_online},
       {"broadcast_radius", c.broadcast_radius},
       {"feature_interval_seconds", c.feature_interval_seconds},
       {"feature_window_seconds", c.feature_window_seconds},
       {"index", c.index},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, WorldConfig& c) {
  constexpr std::string_view ctx = "world";
  reject_unknown_keys(
      j,
      {"world_size", "horizon_seconds", "window_seconds", "driver_count", "daily_orders",
       "query_conversion", "hotspot_count", "background_fraction", "hourly_profile", "base_fare",
       "per_km_fare", "speed", "patience_seconds", "cancel_max", "cancel_distance_scale",
       "hotspot_move_probability", "idle_speed", "offline_hazard", "online_hazard",
       "initial_online", "broadcast_radius", "feature_interval_seconds", "feature_window_seconds",
       "index", "seed"},
      ctx);
  read_optional(j, "world_size", c.world_size, ctx);
  read_optional(j, "horizon_seconds", c.horizon_seconds, ctx);
  read_optional(j, "window_seconds", c.window_seconds, ctx);
  read_optional(j, "driver_count", c.driver_count, ctx);
  read_optional(j, "daily_orders", c.daily_orders, ctx);
  read_optional(j, "query_conversion", c.query_conversion, ctx);
  read_optional(j, "hotspot_count", c.hotspot_count, ctx);
  read_optional(j, "background_fraction", c.background_fraction, ctx);
  read_optional(j, "hourly_profile", c.hourly_profile, ctx);
  read_optional(j, "base_fare", c.base_fare, ctx);
  read_optional(j, "per_km_fare", c.per_km_fare, ctx);
  read_optional(j, "speed", c.speed, ctx);
  read_optional(j, "patience_seconds", c.patience_seconds, ctx);
  read_optional(j, "cancel_max", c.cancel_max, ctx);
  read_optional(j, "cancel_distance_scale", c.cancel_distance_scale, ctx);
  read_optional(j, "hotspot_move_probability", c.hotspot_move_probability, ctx);
  read_optional(j, "idle_speed", c.idle_speed, ctx);
  read_optional(j, "offline_hazard", c.offline_hazard, ctx);
  read_optional(j, "online_hazard", c.online_hazard, ctx);
  read_optional(j, "initial_online", c.initial_online, ctx);
  read_optional(j, "broadcast_radius", c.broadcast_radius, ctx);
  read_optional(j, "feature_interval_seconds", c.feature_interval_seconds, ctx);
  read_optional(j, "feature_window_seconds", c.feature_window_seconds, ctx);
  if (j.contains("index")) c.index = j.at("index").get<IndexConfig>();
  read_optional(j, "seed", c.seed, ctx);
  c.validate();
}

// ---------------------------------------------------------------- entities

GeoPoint Hotspot::center_at(double t) const {
  const double f = t / kSecondsPerDay - 0.5;
  return {center.x + drift.x * f, center.y + drift.y * f};
}

// Morning flows residential -> business, evening flows back, leisure peaks
// late. Hours are local clock hours.
double Hotspot::origin_weight(double t) const {
  const double h = t / 3600.0;
  switch (kind) {
    case HotspotKind::Residential:
      return weight * (0.3 + 2.0 * bump(h, 8.0, 1.5) + 0.5 * bump(h, 22.0, 1.5));
    case HotspotKind::Business:
      return weight * (0.3 + 2.0 * bump(h, 18.5, 1.5) + 0.6 * bump(h, 12.5, 1.0));
    case HotspotKind::Leisure:
      return weight * (0.2 + 1.5 * bump(h, 22.0, 1.5) + 0.4 * bump(h, 14.0, 2.0));
  }
  return weight;
}

double Hotspot::destination_weight(double t) const {
  const double h = t / 3600.0;
  switch (kind) {
    case HotspotKind::Residential:
      return weight * (0.3 + 2.0 * bump(h, 18.5, 1.5) + 1.0 * bump(h, 22.5, 1.5));
    case HotspotKind::Business:
      return weight * (0.3 + 2.0 * bump(h, 8.0, 1.5) + 0.6 * bump(h, 12.5, 1.0));
    case HotspotKind::Leisure:
      return weight * (0.2 + 1.5 * bump(h, 20.0, 1.5) + 0.4 * bump(h, 13.0, 2.0));
  }
  return weight;
}

DriverStatus Driver::status(int now) const {
  if (!online) return DriverStatus::Offline;
  if (!busy(now)) return DriverStatus::Idle;
  return now < pickup_until ? DriverStatus::EnRoute : DriverStatus::OnTrip;
}

const char* to_string(OrderState s) {
  switch (s) {
    case OrderState::Pending: return "pending";
    case OrderState::Answered: return "answered";
    case OrderState::Finished: return "finished";
    case OrderState::Cancelled: return "cancelled";
    case OrderState::Expired: return "expired";
  }
  return "?";
}

Policy myopic_policy(double match_bonus, double broadcast_radius) {
  Policy p;
  p.name = "myopic";
  p.planner.kind = ScoreKind::Myopic;
  p.planner.match_bonus = match_bonus;
  p.planner.broadcast_radius = broadcast_radius;
  return p;
}

Policy cvnet_policy(std::shared_ptr<const Checkpoint> ckpt, PlannerConfig planner,
                    std::string name) {
  Policy p;
  p.name = std::move(name);
  planner.kind = ScoreKind::Value;
  p.planner = planner;
  p.value = std::make_shared<CheckpointValue>(std::move(ckpt));
  return p;
}

Policy tabular_policy(std::shared_ptr<const StateValueFunction> table, PlannerConfig planner,
                      std::string name) {
  Policy p;
  p.name = std::move(name);
  planner.kind = ScoreKind::Value;
  p.planner = planner;
  p.value = std::move(table);
  return p;
}

// ---------------------------------------------------------------- auditor

void Auditor::check_window(const std::vector<Driver>& drivers, const std::vector<Order>& orders,
                           const Assignment& a, int now) {
  std::vector<char> seen_driver(drivers.size(), 0), seen_order(orders.size(), 0);
  for (const MatchedPair& m : a.pairs) {
    if (m.driver_id < 0 || m.driver_id >= static_cast<int>(drivers.size()) || m.order_id < 0 ||
        m.order_id >= static_cast<int>(orders.size())) {
      throw std::logic_error("audit: assignment references an unknown id");
    }
    auto& sd = seen_driver[static_cast<std::size_t>(m.driver_id)];
    auto& so = seen_order[static_cast<std::size_t>(m.order_id)];
    if (sd || so) throw std::logic_error("audit: double booking");
    sd = so = 1;
    const Driver& d = drivers[static_cast<std::size_t>(m.driver_id)];
    if (!d.online || d.busy(now) || d.order >= 0) {
      throw std::logic_error("audit: busy or offline driver matched");
    }
    if (orders[static_cast<std::size_t>(m.order_id)].state != OrderState::Pending) {
      throw std::logic_error("audit: non-pending order matched");
    }
  }
}

void Auditor::check_income(const std::vector<Driver>& drivers, const std::vector<Order>& orders) {
  if (last_income_.size() != drivers.size()) last_income_.assign(drivers.size(), 0.0);
  double income = 0.0, fares = 0.0;
  for (std::size_t i = 0; i < drivers.size(); ++i) {
    if (drivers[i].income < last_income_[i] || drivers[i].income < 0) {
      throw std::logic_error("audit: driver income decreased");
    }
    last_income_[i] = drivers[i].income;
    income += drivers[i].income;
  }
  for (const Order& o : orders) {
    if (o.state == OrderState::Finished) fares += o.fare;
  }
  if (std::abs(income - fares) > 1e-9 * std::max(1.0, fares)) {
    throw std::logic_error("audit: income does not match finished fares");
  }
}

// ---------------------------------------------------------------- world

World::World(WorldConfig cfg, std::uint64_t day_seed)
    : cfg_(std::move(cfg)),
      day_seed_(day_seed),
      cancel_stream_(substream_seed(day_seed, "cancel")),
      move_stream_(substream_seed(day_seed, "move")),
      online_stream_(substream_seed(day_seed, "online")),
      features_(cfg_.index, default_dynamic_features(),
                RangeQueryConfig{1800, cfg_.feature_interval_seconds}) {
  cfg_.validate();
  const double w = cfg_.world_size;

  std::mt19937_64 city(substream_seed(cfg_.seed, "city"));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (int i = 0; i < cfg_.hotspot_count; ++i) {
    Hotspot h;
    h.kind = static_cast<HotspotKind>(i % 3);
    h.center = {w * (0.15 + 0.7 * u01(city)), w * (0.15 + 0.7 * u01(city))};
    const double angle = 2 * std::numbers::pi * u01(city);
    const double mag = 0.1 * w * u01(city);
    h.drift = {mag * std::cos(angle), mag * std::sin(angle)};
    h.sigma = w * (0.04 + 0.05 * u01(city));
    h.weight = 0.6 + 0.8 * u01(city);
    hotspots_.push_back(h);
  }

  std::mt19937_64 rng(substream_seed(day_seed, "drivers"));
  drivers_.resize(static_cast<std::size_t>(cfg_.driver_count));
  for (int i = 0; i < cfg_.driver_count; ++i) {
    Driver& d = drivers_[static_cast<std::size_t>(i)];
    d.id = i;
    d.position = sample_point(rng, 0.0, true);
    d.online = u01(rng) < cfg_.initial_online;
    if (d.online) open_session(d, 0);
  }
  generate_arrivals(day_seed);
}

World generate_city(const WorldConfig& cfg, std::uint64_t day_seed) { return World(cfg, day_seed); }

GeoPoint World::clamp(GeoPoint p) const {
  p.x = std::clamp(p.x, 0.0, cfg_.world_size);
  p.y = std::clamp(p.y, 0.0, cfg_.world_size);
  return p;
}

template <typename Rng>
GeoPoint World::sample_point(Rng& rng, double t, bool origin) const {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double pick = u01(rng);
  const double a = u01(rng), b = u01(rng);
  const double w = cfg_.world_size;
  if (hotspots_.empty() || pick < cfg_.background_fraction) return {a * w, b * w};
  double total = 0.0;
  for (const Hotspot& h : hotspots_) total += origin ? h.origin_weight(t) : h.destination_weight(t);
  double target = (pick - cfg_.background_fraction) / (1.0 - cfg_.background_fraction) * total;
  const Hotspot* chosen = &hotspots_.back();
  for (const Hotspot& h : hotspots_) {
    target -= origin ? h.origin_weight(t) : h.destination_weight(t);
    if (target < 0) {
      chosen = &h;
      break;
    }
  }
  // Box-Muller from the two remaining uniforms.
  const double r = chosen->sigma * std::sqrt(-2.0 * std::log(1.0 - a));
  const GeoPoint c = chosen->center_at(t);
  return clamp({c.x + r * std::cos(2 * std::numbers::pi * b),
                c.y + r * std::sin(2 * std::numbers::pi * b)});
}

void World::generate_arrivals(std::uint64_t day_seed) {
  if (cfg_.daily_orders <= 0) return;
  const int minutes = (cfg_.horizon_seconds + 59) / 60;
  double total = 0.0;
  for (int m = 0; m < minutes; ++m) total += cfg_.hourly_intensity(m * 60.0 + 30.0);
  if (total <= 0) return;
  const double query_volume = cfg_.daily_orders / cfg_.query_conversion;

  std::mt19937_64 rng(substream_seed(day_seed, "arrivals"));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  for (int m = 0; m < minutes; ++m) {
    const double mean = query_volume * cfg_.hourly_intensity(m * 60.0 + 30.0) / total;
    std::poisson_distribution<int> pois(mean);
    const int n = mean > 0 ? pois(rng) : 0;
    std::vector<int> times;
    for (int i = 0; i < n; ++i) times.push_back(m * 60 + static_cast<int>(u01(rng) * 60.0));
    std::sort(times.begin(), times.end());
    for (int t : times) {
      if (t >= cfg_.horizon_seconds) continue;
      Query q;
      q.time = t;
      q.location = sample_point(rng, t, true);
      const bool converted = u01(rng) < cfg_.query_conversion;
      GeoPoint dest = sample_point(rng, t, false);
      for (int tries = 0; tries < 8 && distance(dest, q.location) < 500.0; ++tries) {
        dest = sample_point(rng, t, false);
      }
      if (converted) {
        Order o;
        o.id = static_cast<int>(orders_.size());
        o.request_time = t;
        o.origin = q.location;
        o.destination = dest;
        o.fare = cfg_.base_fare + cfg_.per_km_fare * distance(q.location, dest) / 1000.0;
        q.order = o.id;
        orders_.push_back(o);
      }
      queries_.push_back(q);
    }
  }
}

std::string World::base_cell_code(const GeoPoint& p) const {
  const int base = cfg_.index.n_tilings() - 1;
  return spatial_cell_code(base, layer_cell(cfg_.index.layers[static_cast<std::size_t>(base)], p));
}

void World::open_session(Driver& d, int t) {
  d.last_time = t;
  d.last_position = d.position;
  d.events.clear();
}

void World::close_session(Driver& d, int t) {
  if (t > d.last_time) {
    d.events.push_back({false, d.last_time, t, d.last_position, d.position, 0.0});
  }
  if (!d.events.empty()) {
    sessions_.push_back({"s" + std::to_string(day_seed_) + "-d" + std::to_string(d.id) + "-" +
                             std::to_string(d.session),
                         std::move(d.events)});
  }
  d.events.clear();
  ++d.session;
}

void World::complete_trips(int t, bool all, nlohmann::json* events) {
  for (Driver& d : drivers_) {
    if (d.order < 0 || (!all && d.busy_until > t)) continue;
    Order& o = orders_[static_cast<std::size_t>(d.order)];
    o.state = OrderState::Finished;
    o.finish_time = d.busy_until;
    d.income += o.fare;
    tdi_ += o.fare;
    ++finished_count_;
    d.position = o.destination;
    d.order = -1;
    if (events) {
      events->push_back({{"type", "finish"}, {"driver", d.id}, {"order", o.id},
                         {"fare", o.fare}, {"time", o.finish_time}});
    }
  }
}

void World::record_features(int t, nlohmann::json* events) {
  std::map<std::string, std::array<int, 3>> counts;
  const int from = t - cfg_.feature_window_seconds;
  auto lo = std::lower_bound(queries_.begin(), queries_.end(), from,
                             [](const Query& q, int v) { return q.time < v; });
  for (auto it = lo; it != queries_.end() && it->time < t; ++it) {
    auto& c = counts[base_cell_code(it->location)];
    ++c[0];
    if (it->order >= 0) ++c[1];
  }
  nlohmann::json idle = nlohmann::json::array();
  for (const Driver& d : drivers_) {
    if (d.status(t) != DriverStatus::Idle) continue;
    ++counts[base_cell_code(d.position)][2];
    if (events) idle.push_back({d.id, d.position.x, d.position.y});
  }
  const auto& names = default_dynamic_features();
  for (const auto& [code, c] : counts) {
    for (std::size_t f = 0; f < 3; ++f) features_.put(names[f], code, t, c[f]);
  }
  if (events) events->push_back({{"type", "snapshot"}, {"time", t}, {"idle", std::move(idle)}});
}

WindowReport World::step_window(const Policy& policy) {
  if (finished_) throw std::logic_error("world already finished");
  const int t_end = std::min(now_ + cfg_.window_seconds, cfg_.horizon_seconds);
  nlohmann::json log_events = nlohmann::json::array();
  nlohmann::json* ev = event_log_ ? &log_events : nullptr;
  WindowReport rep;

  while (next_order_ < orders_.size() && orders_[next_order_].request_time < t_end) {
    const Order& o = orders_[next_order_];
    pending_.push_back(o.id);
    ++requested_;
    ++rep.new_orders;
    if (ev) {
      ev->push_back({{"type", "request"}, {"order", o.id}, {"time", o.request_time},
                     {"origin", point_json(o.origin)}, {"destination", point_json(o.destination)},
                     {"fare", o.fare}});
    }
    ++next_order_;
  }

  complete_trips(t_end, false, ev);

  std::erase_if(pending_, [&](int id) {
    Order& o = orders_[static_cast<std::size_t>(id)];
    if (o.request_time + cfg_.patience_seconds > t_end) return false;
    o.state = OrderState::Expired;
    ++expired_;
    if (ev) ev->push_back({{"type", "expire"}, {"order", id}});
    return true;
  });

  // Dispatch.
  std::vector<DispatchDriver> idle;
  for (const Driver& d : drivers_) {
    if (d.status(t_end) == DriverStatus::Idle) idle.push_back({d.id, d.position});
  }
  std::vector<DispatchOrder> open;
  for (int id : pending_) {
    const Order& o = orders_[static_cast<std::size_t>(id)];
    open.push_back({o.id, o.origin, o.destination, o.fare});
  }
  if (!idle.empty() && !open.empty()) {
    const ClockTime now(t_end);
    ValueCache cache(policy.value.get());
    const auto candidates =
        build_utility_matrix(idle, open, now, policy.value.get(), policy.planner,
                             straight_line_estimator(cfg_.speed), &cache);
    rep.candidates = static_cast<int>(candidates.size());
    const Assignment a = solve_assignment(candidates, policy.planner.skip_threshold);
    auditor_.check_window(drivers_, orders_, a, t_end);
    if (dispatch_log_ && !candidates.empty()) write_dispatch_debug(*dispatch_log_, now, candidates, a);
    for (const MatchedPair& m : a.pairs) {
      Driver& d = drivers_[static_cast<std::size_t>(m.driver_id)];
      Order& o = orders_[static_cast<std::size_t>(m.order_id)];
      const double pickup = distance(d.position, o.origin);
      o.state = OrderState::Answered;
      o.driver = d.id;
      o.pickup_distance = pickup;
      o.answer_time = t_end;
      ++answered_;
      ++rep.matched;
      pickup_sum_ += pickup;
      const double p_cancel = std::min(cfg_.cancel_max, pickup / cfg_.cancel_distance_scale);
      const bool cancelled =
          keyed_uniform(cancel_stream_, static_cast<std::uint64_t>(o.id)) < p_cancel;
      if (ev) {
        ev->push_back({{"type", "assign"}, {"driver", d.id}, {"order", o.id},
                       {"pickup_distance", pickup}, {"utility", m.utility}});
      }
      if (cancelled) {
        o.state = OrderState::Cancelled;
        ++cancelled_;
        if (ev) ev->push_back({{"type", "cancel"}, {"order", o.id}});
        continue;
      }
      d.order = o.id;
      d.pickup_until = t_end + ceil_seconds(pickup / cfg_.speed);
      d.busy_until = t_end + ceil_seconds((pickup + distance(o.origin, o.destination)) / cfg_.speed);
      if (t_end > d.last_time) {
        d.events.push_back({false, d.last_time, t_end, d.last_position, d.position, 0.0});
      }
      d.events.push_back({true, t_end, d.busy_until, d.position, o.destination, o.fare});
      d.last_time = d.busy_until;
      d.last_position = o.destination;
    }
    std::erase_if(pending_, [&](int id) {
      return orders_[static_cast<std::size_t>(id)].state != OrderState::Pending;
    });
  }

  // Idle movement and online/offline transitions, keyed per (driver, window).
  const double step_len = cfg_.idle_speed * (t_end - now_);
  const double p_off = 1.0 - std::exp(-cfg_.offline_hazard * (t_end - now_));
  const double p_on = 1.0 - std::exp(-cfg_.online_hazard * (t_end - now_));
  const auto w = static_cast<std::uint64_t>(window_index_);
  for (Driver& d : drivers_) {
    const auto id = static_cast<std::uint64_t>(d.id);
    const DriverStatus st = d.status(t_end);
    if (st == DriverStatus::Idle) {
      if (keyed_uniform(online_stream_, id, w) < p_off) {
        close_session(d, t_end);
        d.online = false;
        if (ev) ev->push_back({{"type", "offline"}, {"driver", d.id}});
        continue;
      }
      const double u0 = keyed_uniform(move_stream_, id, 3 * w);
      const double u1 = keyed_uniform(move_stream_, id, 3 * w + 1);
      if (!hotspots_.empty() && u0 < cfg_.hotspot_move_probability) {
        // Nearby, currently busy hotspots attract idle drivers.
        std::vector<double> attract;
        double total = 0.0;
        for (const Hotspot& h : hotspots_) {
          const double a = h.origin_weight(t_end) *
                           std::exp(-distance(d.position, h.center_at(t_end)) / 2000.0);
          attract.push_back(a);
          total += a;
        }
        double target = u1 * total;
        std::size_t k = hotspots_.size() - 1;
        for (std::size_t i = 0; i < attract.size(); ++i) {
          target -= attract[i];
          if (target < 0) {
            k = i;
            break;
          }
        }
        d.position = clamp(step_toward(d.position, hotspots_[k].center_at(t_end), step_len));
      } else {
        const double angle = 2 * std::numbers::pi * keyed_uniform(move_stream_, id, 3 * w + 2);
        d.position = clamp({d.position.x + step_len * std::cos(angle),
                            d.position.y + step_len * std::sin(angle)});
      }
    } else if (st == DriverStatus::Offline) {
      if (keyed_uniform(online_stream_, id, w) < p_on) {
        d.online = true;
        open_session(d, t_end);
        if (ev) ev->push_back({{"type", "online"}, {"driver", d.id}});
      }
    }
  }

  if (t_end % cfg_.feature_interval_seconds == 0 && t_end < kSecondsPerDay) {
    record_features(t_end, ev);
  }

  auditor_.check_income(drivers_, orders_);
  now_ = t_end;
  ++window_index_;

  rep.time = t_end;
  rep.requested = requested_;
  rep.answered = answered_;
  rep.finished = finished_count_;
  rep.cancelled = cancelled_;
  rep.expired = expired_;
  rep.pending = static_cast<int>(pending_.size());
  rep.tdi = tdi_;
  series_.push_back(rep);
  if (event_log_ && !log_events.empty()) {
    *event_log_ << nlohmann::json{{"t", t_end}, {"events", std::move(log_events)}}.dump() << '\n';
  }
  return rep;
}

void World::finish() {
  if (finished_) return;
  nlohmann::json log_events = nlohmann::json::array();
  nlohmann::json* ev = event_log_ ? &log_events : nullptr;
  // Trips in flight at the horizon run to completion and are paid.
  complete_trips(now_, true, ev);
  for (int id : pending_) {
    orders_[static_cast<std::size_t>(id)].state = OrderState::Expired;
    ++expired_;
    if (ev) ev->push_back({{"type", "expire"}, {"order", id}});
  }
  pending_.clear();
  for (Driver& d : drivers_) {
    if (d.online) close_session(d, std::max(now_, d.last_time));
  }
  auditor_.check_income(drivers_, orders_);
  finished_ = true;
  if (event_log_ && !log_events.empty()) {
    *event_log_ << nlohmann::json{{"t", now_}, {"final", true}, {"events", std::move(log_events)}}
                       .dump()
                << '\n';
  }
}

EpisodeMetrics World::metrics() const {
  EpisodeMetrics m;
  // Summed in order-id order so the value does not depend on completion order.
  for (const Order& o : orders_) {
    if (o.state == OrderState::Finished) m.tdi += o.fare;
  }
  m.requested = requested_;
  m.answered = answered_;
  m.finished = finished_count_;
  m.cancelled = cancelled_;
  m.expired = expired_;
  if (requested_ > 0) {
    m.answer_rate = static_cast<double>(answered_) / requested_;
    m.finish_rate = static_cast<double>(finished_count_) / requested_;
  }
  if (answered_ > 0) m.mean_pickup_distance = pickup_sum_ / answered_;
  m.series = series_;
  return m;
}

void World::export_trajectories(std::ostream& out) const {
  out << nlohmann::json{{"index_config", cfg_.index}}.dump() << '\n';
  for (const FinishedSession& s : sessions_) {
    nlohmann::json events = nlohmann::json::array();
    for (const TrajectoryEvent& e : s.events) {
      nlohmann::json j{{"type", e.trip ? "trip" : "idle"},
                       {"t0", e.t0}, {"x0", e.from.x}, {"y0", e.from.y},
                       {"t1", e.t1}, {"x1", e.to.x},   {"y1", e.to.y}};
      if (e.trip) j["fare"] = e.fare;
      events.push_back(std::move(j));
    }
    out << nlohmann::json{{"traj_id", s.id}, {"events", std::move(events)}}.dump() << '\n';
  }
}

// ---------------------------------------------------------------- runners

EpisodeResult run_episode(const WorldConfig& cfg, const Policy& policy, std::uint64_t day_seed,
                          std::ostream* event_log) {
  EpisodeResult r;
  r.world = std::make_unique<World>(cfg, day_seed);
  r.world->set_event_log(event_log);
  while (!r.world->done()) r.world->step_window(policy);
  r.world->finish();
  r.metrics = r.world->metrics();
  return r;
}

namespace {

void mean_std(const std::vector<double>& v, double& mean, double& sd) {
  mean = sd = 0.0;
  if (v.empty()) return;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace

ExperimentResult run_experiment(const WorldConfig& cfg, const std::vector<Policy>& policies,
                                const std::vector<std::uint64_t>& seeds, int workers) {
  if (policies.empty()) throw ConfigError("experiment needs at least one policy");
  if (seeds.empty()) throw ConfigError("experiment needs at least one seed");
  cfg.validate();
  ExperimentResult res;
  const std::size_t n = policies.size() * seeds.size();
  res.cells.resize(n);
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        const Policy& p = policies[i / seeds.size()];
        const std::uint64_t seed = seeds[i % seeds.size()];
        EpisodeResult r = run_episode(cfg, p, seed);
        r.metrics.series.clear();
        res.cells[i] = {p.name, seed, std::move(r.metrics), 1.0};
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  const int threads = std::clamp(workers, 1, static_cast<int>(n));
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);

  std::size_t base = 0;
  for (std::size_t p = 0; p < policies.size(); ++p) {
    if (policies[p].name == "myopic") {
      base = p;
      break;
    }
  }
  res.baseline = policies[base].name;
  for (std::size_t i = 0; i < n; ++i) {
    const double b = res.cells[base * seeds.size() + i % seeds.size()].metrics.tdi;
    const double x = res.cells[i].metrics.tdi;
    res.cells[i].normalized_tdi = b > 0 ? x / b : (x == b ? 1.0 : HUGE_VAL);
  }
  for (std::size_t p = 0; p < policies.size(); ++p) {
    PolicySummary s;
    s.policy = policies[p].name;
    s.seeds = static_cast<int>(seeds.size());
    std::vector<double> tdi, norm, ar, fr, pd;
    for (std::size_t k = 0; k < seeds.size(); ++k) {
      const ExperimentCell& c = res.cells[p * seeds.size() + k];
      tdi.push_back(c.metrics.tdi);
      norm.push_back(c.normalized_tdi);
      ar.push_back(c.metrics.answer_rate);
      fr.push_back(c.metrics.finish_rate);
      pd.push_back(c.metrics.mean_pickup_distance);
    }
    double unused = 0.0;
    mean_std(tdi, s.tdi_mean, s.tdi_std);
    mean_std(norm, s.normalized_tdi_mean, s.normalized_tdi_std);
    mean_std(ar, s.answer_rate_mean, unused);
    mean_std(fr, s.finish_rate_mean, unused);
    mean_std(pd, s.pickup_distance_mean, unused);
    res.summary.push_back(s);
  }
  return res;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

}  // namespace

void write_metrics_csv(std::ostream& out, const std::vector<ExperimentCell>& cells) {
  out << "policy,seed,tdi,normalized_tdi,requested,answered,finished,cancelled,expired,"
         "answer_rate,finish_rate,mean_pickup_distance\n";
  for (const ExperimentCell& c : cells) {
    const EpisodeMetrics& m = c.metrics;
    out << c.policy << ',' << c.seed << ',' << fmt(m.tdi) << ',' << fmt(c.normalized_tdi) << ','
        << m.requested << ',' << m.answered << ',' << m.finished << ',' << m.cancelled << ','
        << m.expired << ',' << fmt(m.answer_rate) << ',' << fmt(m.finish_rate) << ','
        << fmt(m.mean_pickup_distance) << '\n';
  }
}

void write_summary_csv(std::ostream& out, const std::vector<PolicySummary>& summary) {
  out << "policy,seeds,tdi_mean,tdi_std,normalized_tdi_mean,normalized_tdi_std,"
         "answer_rate_mean,finish_rate_mean,pickup_distance_mean\n";
  for (const PolicySummary& s : summary) {
    out << s.policy << ',' << s.seeds << ',' << fmt(s.tdi_mean) << ',' << fmt(s.tdi_std) << ','
        << fmt(s.normalized_tdi_mean) << ',' << fmt(s.normalized_tdi_std) << ','
        << fmt(s.answer_rate_mean) << ',' << fmt(s.finish_rate_mean) << ','
        << fmt(s.pickup_distance_mean) << '\n';
  }
}

void write_series_csv(std::ostream& out, const std::vector<WindowReport>& series) {
  out << "time,requested,answered,finished,cancelled,expired,pending,new_orders,candidates,"
         "matched,tdi\n";
  for (const WindowReport& r : series) {
    out << r.time << ',' << r.requested << ',' << r.answered << ',' << r.finished << ','
        << r.cancelled << ',' << r.expired << ',' << r.pending << ',' << r.new_orders << ','
        << r.candidates << ',' << r.matched << ',' << fmt(r.tdi) << '\n';
  }
}

PairedTest paired_one_sided_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) {
    throw std::invalid_argument("paired test needs two equal samples of size >= 2");
  }
  static constexpr double kT95[] = {6.314, 2.920, 2.353, 2.132, 2.015, 1.943, 1.895, 1.860,
                                    1.833, 1.812, 1.796, 1.782, 1.771, 1.761, 1.753, 1.746,
                                    1.740, 1.734, 1.729, 1.725, 1.721, 1.717, 1.714, 1.711,
                                    1.708, 1.706, 1.703, 1.701, 1.699, 1.697};
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  PairedTest r;
  double sd = 0.0;
  mean_std(d, r.mean_difference, sd);
  const std::size_t df = d.size() - 1;
  r.critical = df <= 30 ? kT95[df - 1] : 1.645;
  if (sd > 0) {
    r.t = r.mean_difference / (sd / std::sqrt(static_cast<double>(d.size())));
  } else {
    r.t = r.mean_difference > 0 ? HUGE_VAL : 0.0;
  }
  r.significant = r.t > r.critical;
  return r;
}

}  // namespace cvnet
