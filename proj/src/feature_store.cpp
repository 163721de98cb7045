#include "cvnet/feature_store.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <tuple>

namespace cvnet {

namespace {

struct RawEvent {
  bool trip = false;
  double t0 = 0, t1 = 0;
  GeoPoint p0, p1;
  double fare = 0;
};

int step_floor(double t) { return static_cast<int>(std::floor(t / kStepSeconds)); }

RawEvent parse_event(const nlohmann::json& e) {
  RawEvent ev;
  const std::string type = e.at("type").get<std::string>();
  if (type != "trip" && type != "idle") throw DataError("unknown event type '" + type + "'");
  ev.trip = type == "trip";
  ev.t0 = e.at("t0").get<double>();
  ev.t1 = e.at("t1").get<double>();
  ev.p0 = {e.at("x0").get<double>(), e.at("y0").get<double>()};
  ev.p1 = {e.at("x1").get<double>(), e.at("y1").get<double>()};
  ev.fare = e.value("fare", 0.0);
  if (!std::isfinite(ev.t0) || !std::isfinite(ev.t1) || !std::isfinite(ev.fare) ||
      !std::isfinite(ev.p0.x) || !std::isfinite(ev.p0.y) || !std::isfinite(ev.p1.x) ||
      !std::isfinite(ev.p1.y)) {
    throw DataError("non-finite event field");
  }
  if (ev.t1 <= ev.t0) throw DataError("event ends at or before it starts");
  if (ev.t0 < 0) throw DataError("event starts before midnight");
  if (ev.fare < 0) throw DataError("negative fare");
  if (!ev.trip) ev.fare = 0.0;
  return ev;
}

// Appends the option from (p0, t0) to (p1, t1) on the step grid. Options that
// cross the end of the day are cut at T with the fare prorated.
void emit(std::vector<TransitionTuple>& out, const std::string& id, const Eigen::VectorXd& stat,
          bool trip, double t0, double t1, GeoPoint p0, GeoPoint p1, double fare) {
  const int s0 = step_floor(t0);
  const int last_step = kSecondsPerDay / kStepSeconds;
  if (s0 >= last_step) return;
  int k = step_floor(t1) - s0;
  if (k <= 0) {
    if (!trip) return;  // sub-step idle gap
    k = 1;
  }
  TransitionTuple t;
  t.trajectory_id = id;
  t.static_context = stat;
  t.is_trip = trip;
  t.origin = p0;
  t.destination = p1;
  t.origin_time = ClockTime(s0 * kStepSeconds);
  double reward = fare;
  if (s0 + k > last_step) {
    const int kept = last_step - s0;
    reward = fare * static_cast<double>(kept) / static_cast<double>(k);
    k = kept;
    t.is_terminal = true;
  }
  t.duration_steps = k;
  t.reward = reward;
  t.destination_time = ClockTime((s0 + k) * kStepSeconds);
  out.push_back(std::move(t));
}

}  // namespace

std::vector<TransitionTuple> split_trajectory(const nlohmann::json& traj) {
  std::vector<TransitionTuple> out;
  std::string id;
  Eigen::VectorXd stat;
  std::vector<RawEvent> events;
  try {
    id = traj.at("traj_id").get<std::string>();
    if (traj.contains("static")) {
      const auto v = traj.at("static").get<std::vector<double>>();
      stat = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
    }
    for (const auto& e : traj.at("events")) events.push_back(parse_event(e));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("schema violation: ") + e.what());
  }
  for (std::size_t i = 0; i < events.size(); ++i) {
    const RawEvent& ev = events[i];
    if (i > 0) {
      const RawEvent& prev = events[i - 1];
      if (ev.t0 < prev.t1) throw DataError("overlapping events in trajectory " + id);
      if (ev.t0 > prev.t1) emit(out, id, stat, false, prev.t1, ev.t0, prev.p1, ev.p0, 0.0);
    }
    emit(out, id, stat, ev.trip, ev.t0, ev.t1, ev.p0, ev.p1, ev.fare);
  }
  if (!out.empty()) out.back().is_terminal = true;
  return out;
}

TrajectoryDataset ingest_trajectories(std::istream& in) {
  TrajectoryDataset ds;
  std::string line;
  std::size_t lineno = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const nlohmann::json j = nlohmann::json::parse(line);
      if (first && j.is_object() && j.contains("index_config")) {
        ds.index = j.at("index_config").get<IndexConfig>();
        first = false;
        continue;
      }
      first = false;
      auto ts = split_trajectory(j);
      ds.transitions.insert(ds.transitions.end(), std::make_move_iterator(ts.begin()),
                            std::make_move_iterator(ts.end()));
      ++ds.trajectories;
    } catch (const nlohmann::json::exception& e) {
      first = false;
      ds.errors.push_back({lineno, std::string("malformed JSON: ") + e.what()});
    } catch (const std::exception& e) {
      first = false;
      ds.errors.push_back({lineno, e.what()});
    }
  }
  return ds;
}

std::size_t FeatureStore::KeyHash::operator()(const Key& k) const noexcept {
  std::uint64_t h = mix64(static_cast<std::uint64_t>(k.name) << 32 ^ static_cast<std::uint32_t>(k.layer));
  h = mix64(h ^ static_cast<std::uint32_t>(k.q));
  h = mix64(h ^ (static_cast<std::uint64_t>(static_cast<std::uint32_t>(k.r)) << 32 ^
                 static_cast<std::uint32_t>(k.bucket)));
  return static_cast<std::size_t>(h);
}

FeatureStore::FeatureStore(IndexConfig index, std::vector<std::string> feature_names,
                           RangeQueryConfig range)
    : index_(std::move(index)), names_(std::move(feature_names)), range_(range) {
  index_.validate();
  if (range_.interval_seconds <= 0) throw ConfigError("logging interval must be positive");
  if (range_.rg_seconds < 0) throw ConfigError("rg must be non-negative");
  global_mean_ = Eigen::VectorXd::Zero(dimension());
}

bool FeatureStore::put(const std::string& name, const std::string& cell_code, int bucket_seconds,
                       double value) {
  const auto it = std::find(names_.begin(), names_.end(), name);
  int layer = 0;
  HexCoord cell;
  if (it == names_.end() || !parse_spatial_cell_code(cell_code, layer, cell) ||
      layer >= index_.n_tilings() || !std::isfinite(value)) {
    return false;
  }
  const Key key{static_cast<int>(it - names_.begin()), layer, cell.q, cell.r, bucket_seconds};
  auto [pos, inserted] = records_.insert_or_assign(key, value);
  (void)pos;
  if (!inserted) ++duplicates_;
  finalized_ = false;
  return true;
}

std::optional<double> FeatureStore::get(const std::string& name, const std::string& cell_code,
                                        int bucket_seconds) const {
  const auto it = std::find(names_.begin(), names_.end(), name);
  int layer = 0;
  HexCoord cell;
  if (it == names_.end() || !parse_spatial_cell_code(cell_code, layer, cell)) return std::nullopt;
  const auto rec =
      records_.find({static_cast<int>(it - names_.begin()), layer, cell.q, cell.r, bucket_seconds});
  if (rec == records_.end()) return std::nullopt;
  return rec->second;
}

std::vector<ContextSample> FeatureStore::range_query(const GeoPoint& l, ClockTime mu,
                                                     int rg_seconds) const {
  std::vector<ContextSample> out;
  if (rg_seconds < 0) throw std::invalid_argument("range_query: rg must be >= 0");
  if (records_.empty()) return out;
  const int n_layers = index_.n_tilings();
  std::vector<HexCoord> cells(static_cast<std::size_t>(n_layers));
  for (int i = 0; i < n_layers; ++i) cells[static_cast<std::size_t>(i)] = layer_cell(index_.layers[static_cast<std::size_t>(i)], l);

  const int iv = range_.interval_seconds;
  const int lo = std::max(0, mu.seconds() - rg_seconds);
  const int hi = std::min(kSecondsPerDay - 1, mu.seconds() + rg_seconds);
  for (int b = (lo / iv) * iv; b <= (hi / iv) * iv; b += iv) {
    ContextSample s{b, Eigen::VectorXd::Zero(dimension())};
    bool any = false;
    for (int n = 0; n < dimension(); ++n) {
      for (int layer = n_layers - 1; layer >= 0; --layer) {
        const HexCoord& c = cells[static_cast<std::size_t>(layer)];
        const auto it = records_.find({n, layer, c.q, c.r, b});
        if (it != records_.end()) {
          s.values(n) = it->second;
          any = true;
          break;
        }
      }
    }
    if (any) out.push_back(std::move(s));
  }
  return out;
}

std::string FeatureStore::base_code(const GeoPoint& l) const {
  const int base = index_.n_tilings() - 1;
  return spatial_cell_code(base, layer_cell(index_.layers[static_cast<std::size_t>(base)], l));
}

void FeatureStore::finalize() {
  const int base = index_.n_tilings() - 1;
  std::unordered_map<std::string, std::pair<Eigen::VectorXd, Eigen::VectorXd>> acc;
  Eigen::VectorXd gsum = Eigen::VectorXd::Zero(dimension());
  Eigen::VectorXd gcnt = Eigen::VectorXd::Zero(dimension());
  for (const auto& [key, value] : records_) {
    gsum(key.name) += value;
    gcnt(key.name) += 1;
    if (key.layer != base) continue;
    auto& [sum, cnt] = acc.try_emplace(spatial_cell_code(base, {key.q, key.r}),
                                       Eigen::VectorXd::Zero(dimension()),
                                       Eigen::VectorXd::Zero(dimension()))
                           .first->second;
    sum(key.name) += value;
    cnt(key.name) += 1;
  }
  global_mean_ = Eigen::VectorXd::Zero(dimension());
  for (int n = 0; n < dimension(); ++n) {
    if (gcnt(n) > 0) global_mean_(n) = gsum(n) / gcnt(n);
  }
  cell_means_.clear();
  for (auto& [code, sc] : acc) {
    Eigen::VectorXd mean = global_mean_;
    for (int n = 0; n < dimension(); ++n) {
      if (sc.second(n) > 0) mean(n) = sc.first(n) / sc.second(n);
    }
    cell_means_.emplace(code, std::move(mean));
  }
  finalized_ = true;
}

Eigen::VectorXd FeatureStore::cell_mean(const GeoPoint& l) const {
  if (!finalized_) throw std::logic_error("FeatureStore::finalize() not called");
  const auto it = cell_means_.find(base_code(l));
  return it == cell_means_.end() ? global_mean_ : it->second;
}

void FeatureStore::write_csv(std::ostream& out) const {
  out << "# " << nlohmann::json{{"index_config", index_}}.dump() << "\n";
  out << "name,cell_code,bucket_seconds,value\n";
  std::vector<std::pair<Key, double>> rows(records_.begin(), records_.end());
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    return std::tie(a.first.name, a.first.layer, a.first.q, a.first.r, a.first.bucket) <
           std::tie(b.first.name, b.first.layer, b.first.q, b.first.r, b.first.bucket);
  });
  char buf[64];
  for (const auto& [k, v] : rows) {
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    out << names_[static_cast<std::size_t>(k.name)] << ','
        << spatial_cell_code(k.layer, {k.q, k.r}) << ',' << k.bucket << ','
        << std::string(buf, res.ptr) << '\n';
  }
}

FeatureStore ingest_features(std::istream& in, const IndexConfig* fallback_index,
                             std::vector<std::string> names, RangeQueryConfig range) {
  std::string line;
  std::size_t lineno = 0;
  std::optional<IndexConfig> index;
  std::vector<std::pair<std::size_t, std::string>> body;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (!index) {
        try {
          const auto j = nlohmann::json::parse(line.substr(1));
          if (j.contains("index_config")) index = j.at("index_config").get<IndexConfig>();
        } catch (const nlohmann::json::exception&) {
          // plain comment
        }
      }
      continue;
    }
    if (line.rfind("name,", 0) == 0) continue;
    body.emplace_back(lineno, line);
  }
  if (!index) {
    if (!fallback_index) throw ConfigError("feature file has no IndexConfig header");
    index = *fallback_index;
  }
  FeatureStore store(*index, std::move(names), range);
  for (const auto& [no, row] : body) {
    std::vector<std::string> f;
    std::stringstream ss(row);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 4) {
      store.record_error(no, "expected 4 columns");
      continue;
    }
    int bucket = 0;
    double value = 0;
    const auto b = std::from_chars(f[2].data(), f[2].data() + f[2].size(), bucket);
    const auto v = std::from_chars(f[3].data(), f[3].data() + f[3].size(), value);
    if (b.ec != std::errc{} || v.ec != std::errc{}) {
      store.record_error(no, "unparseable number");
      continue;
    }
    if (!store.put(f[0], f[1], bucket, value)) {
      store.record_error(no, "unknown feature name or cell code '" + f[1] + "'");
    }
  }
  store.finalize();
  return store;
}

AugmentedTransition randomize_context(const TransitionTuple& t, int rg_seconds,
                                      const FeatureStore& store, std::mt19937_64& rng) {
  AugmentedTransition a;
  auto pick = [&](const GeoPoint& l, ClockTime mu, bool& missing) -> Eigen::VectorXd {
    const auto samples = store.range_query(l, mu, rg_seconds);
    if (samples.empty()) {
      missing = true;
      return store.cell_mean(l);
    }
    std::uniform_int_distribution<std::size_t> d(0, samples.size() - 1);
    return samples[d(rng)].values;
  };
  a.origin_context = pick(t.origin, t.origin_time, a.origin_missing);
  a.destination_context = pick(t.destination, t.destination_time, a.destination_missing);
  return a;
}

}  // namespace cvnet
