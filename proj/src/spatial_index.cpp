#include "cvnet/spatial_index.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace cvnet {

namespace {

constexpr double kSqrt3 = 1.7320508075688772;

constexpr HexCoord kNeighbors[6] = {{1, 0}, {1, -1}, {0, -1},
                                    {-1, 0}, {-1, 1}, {0, 1}};

double squared_distance_to_center(const GeoPoint& p, const HexCoord& c,
                                  double edge) {
  const GeoPoint center = hex_center(c, edge);
  const double dx = p.x - center.x;
  const double dy = p.y - center.y;
  return dx * dx + dy * dy;
}

void require_finite(const GeoPoint& p) {
  if (!std::isfinite(p.x) || !std::isfinite(p.y)) {
    throw std::invalid_argument("GeoPoint must be finite");
  }
}

}  // namespace

double distance(const GeoPoint& a, const GeoPoint& b) noexcept {
  return std::hypot(a.x - b.x, a.y - b.y);
}

ClockTime::ClockTime(int seconds_of_day) : seconds_(seconds_of_day) {
  if (seconds_of_day < 0 || seconds_of_day > kSecondsPerDay) {
    throw std::invalid_argument("ClockTime out of range: " +
                                std::to_string(seconds_of_day));
  }
}

ClockTime ClockTime::advanced(int seconds) const {
  const long long t = static_cast<long long>(seconds_) + seconds;
  return ClockTime(static_cast<int>(std::clamp<long long>(t, 0, kSecondsPerDay)));
}

GeoPoint hex_center(const HexCoord& cell, double edge) noexcept {
  return {edge * kSqrt3 * (cell.q + 0.5 * cell.r), edge * 1.5 * cell.r};
}

HexCoord hex_cell_at(const GeoPoint& p, double edge) {
  require_finite(p);
  if (!(edge > 0.0) || !std::isfinite(edge)) {
    throw std::invalid_argument("hex edge length must be positive");
  }
  const double qf = (kSqrt3 / 3.0 * p.x - p.y / 3.0) / edge;
  const double rf = (2.0 / 3.0 * p.y) / edge;
  const double sf = -qf - rf;

  double rq = std::round(qf);
  double rr = std::round(rf);
  const double rs = std::round(sf);
  const double dq = std::abs(rq - qf);
  const double dr = std::abs(rr - rf);
  const double ds = std::abs(rs - sf);
  if (dq > dr && dq > ds) {
    rq = -rr - rs;
  } else if (dr > ds) {
    rr = -rq - rs;
  }
  HexCoord best{static_cast<int>(rq), static_cast<int>(rr)};

  // Boundary points are equidistant from two or three centers; pick the
  // lexicographically smallest of those.
  double best_d = squared_distance_to_center(p, best, edge);
  const double tol = 1e-12 * edge * edge;
  const HexCoord base = best;
  for (const HexCoord& n : kNeighbors) {
    const HexCoord cand{base.q + n.q, base.r + n.r};
    const double d = squared_distance_to_center(p, cand, edge);
    if (d < best_d - tol || (std::abs(d - best_d) <= tol && cand < best)) {
      best = cand;
      best_d = std::min(best_d, d);
    }
  }
  return best;
}

IndexConfig IndexConfig::defaults() {
  IndexConfig cfg;
  const double edges[3] = {3430.0, 1297.0, 490.0};
  const int widths[3] = {1800, 900, 600};
  const int phases[3] = {0, 300, 450};
  for (int i = 0; i < 3; ++i) {
    TilingLayer layer;
    layer.edge_length = edges[i];
    layer.time_bucket_seconds = widths[i];
    layer.time_offset_seconds = phases[i];
    layer.lattice_offset = {0.37 * i * edges[i], 0.23 * i * edges[i]};
    cfg.layers.push_back(layer);
  }
  cfg.memory_size = 20000;
  cfg.hash_seed = 0;
  return cfg;
}

IndexConfig IndexConfig::single_layer(double edge_length, int bucket_seconds,
                                      std::int64_t memory_size,
                                      std::uint64_t hash_seed) {
  IndexConfig cfg;
  TilingLayer layer;
  layer.edge_length = edge_length;
  layer.time_bucket_seconds = bucket_seconds;
  cfg.layers.push_back(layer);
  cfg.memory_size = memory_size;
  cfg.hash_seed = hash_seed;
  return cfg;
}

void IndexConfig::validate() const {
  if (layers.empty()) throw ConfigError("IndexConfig: at least one layer");
  if (memory_size <= 0) throw ConfigError("IndexConfig: memory_size must be > 0");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const TilingLayer& l = layers[i];
    if (!(l.edge_length > 0.0) || !std::isfinite(l.edge_length)) {
      throw ConfigError("IndexConfig: edge_length must be positive");
    }
    if (l.time_bucket_seconds <= 0) {
      throw ConfigError("IndexConfig: time_bucket_seconds must be positive");
    }
    if (!std::isfinite(l.lattice_offset.x) || !std::isfinite(l.lattice_offset.y)) {
      throw ConfigError("IndexConfig: lattice offset must be finite");
    }
    if (i > 0) {
      const double ratio = (layers[i - 1].edge_length * layers[i - 1].edge_length) /
                           (l.edge_length * l.edge_length);
      if (std::abs(ratio - 7.0) > 0.07) {
        throw ConfigError("IndexConfig: successive layer areas must shrink by 7");
      }
    }
  }
}

void to_json(nlohmann::json& j, const IndexConfig& cfg) {
  nlohmann::json layers = nlohmann::json::array();
  for (const TilingLayer& l : cfg.layers) {
    layers.push_back({{"edge_length", l.edge_length},
                      {"time_bucket_seconds", l.time_bucket_seconds},
                      {"time_offset_seconds", l.time_offset_seconds},
                      {"lattice_offset", {l.lattice_offset.x, l.lattice_offset.y}}});
  }
  j = {{"layers", layers},
       {"memory_size", cfg.memory_size},
       {"hash_seed", cfg.hash_seed},
       {"hash_algorithm", kHashAlgorithm}};
}

void from_json(const nlohmann::json& j, IndexConfig& cfg) {
  try {
    if (j.contains("hash_algorithm") &&
        j.at("hash_algorithm").get<std::string>() != kHashAlgorithm) {
      throw ConfigError("IndexConfig: unsupported hash algorithm");
    }
    cfg = IndexConfig{};
    for (const auto& lj : j.at("layers")) {
      TilingLayer l;
      l.edge_length = lj.at("edge_length").get<double>();
      l.time_bucket_seconds = lj.at("time_bucket_seconds").get<int>();
      l.time_offset_seconds = lj.value("time_offset_seconds", 0);
      if (lj.contains("lattice_offset")) {
        l.lattice_offset = {lj.at("lattice_offset").at(0).get<double>(),
                            lj.at("lattice_offset").at(1).get<double>()};
      }
      cfg.layers.push_back(l);
    }
    cfg.memory_size = j.at("memory_size").get<std::int64_t>();
    cfg.hash_seed = j.value("hash_seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("IndexConfig: ") + e.what());
  }
  cfg.validate();
}

std::int64_t time_bucket(const TilingLayer& layer, ClockTime t) noexcept {
  const std::int64_t shifted = t.seconds() - layer.time_offset_seconds;
  const std::int64_t w = layer.time_bucket_seconds;
  return shifted >= 0 ? shifted / w : -((-shifted + w - 1) / w);
}

HexCoord layer_cell(const TilingLayer& layer, const GeoPoint& p) {
  return hex_cell_at({p.x - layer.lattice_offset.x, p.y - layer.lattice_offset.y},
                     layer.edge_length);
}

std::string spatial_cell_code(int layer, const HexCoord& cell) {
  return "h" + std::to_string(layer) + ":" + std::to_string(cell.q) + ":" +
         std::to_string(cell.r);
}

bool parse_spatial_cell_code(const std::string& code, int& layer,
                             HexCoord& cell) {
  if (code.size() < 6 || code[0] != 'h') return false;
  const char* p = code.data() + 1;
  const char* end = code.data() + code.size();
  int values[3];
  for (int i = 0; i < 3; ++i) {
    auto [next, ec] = std::from_chars(p, end, values[i]);
    if (ec != std::errc{}) return false;
    p = next;
    if (i < 2) {
      if (p == end || *p != ':') return false;
      ++p;
    }
  }
  if (p != end || values[0] < 0) return false;
  layer = values[0];
  cell = {values[1], values[2]};
  return true;
}

std::vector<TileId> quantize(const GeoPoint& l, ClockTime mu,
                             const IndexConfig& cfg) {
  require_finite(l);
  std::vector<TileId> tiles;
  tiles.reserve(cfg.layers.size());
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    const TilingLayer& layer = cfg.layers[i];
    const HexCoord c = layer_cell(layer, l);
    const std::int64_t b = time_bucket(layer, mu);
    tiles.push_back({static_cast<int>(i),
                     "q" + std::to_string(i) + ":" + std::to_string(c.q) + ":" +
                         std::to_string(c.r) + ":" + std::to_string(b)});
  }
  return tiles;
}

std::int64_t map_to_memory(const std::string& cell_code, const IndexConfig& cfg) {
  const std::uint64_t h = fnv1a64(cell_code, fnv1a64_u64(cfg.hash_seed));
  return static_cast<std::int64_t>(h % static_cast<std::uint64_t>(cfg.memory_size));
}

std::int64_t map_to_memory(const TileId& tile, const IndexConfig& cfg) {
  return map_to_memory(tile.cell_code, cfg);
}

int ActivationVector::total_count() const noexcept {
  int total = 0;
  for (const auto& e : entries) total += e.second;
  return total;
}

ActivationVector activation_from_tiles(const std::vector<TileId>& tiles,
                                       const IndexConfig& cfg) {
  ActivationVector c;
  c.n_tilings = static_cast<int>(tiles.size());
  for (const TileId& t : tiles) {
    const std::int64_t idx = map_to_memory(t, cfg);
    auto it = std::lower_bound(
        c.entries.begin(), c.entries.end(), idx,
        [](const std::pair<std::int64_t, int>& e, std::int64_t v) { return e.first < v; });
    if (it != c.entries.end() && it->first == idx) {
      ++it->second;
    } else {
      c.entries.insert(it, {idx, 1});
    }
  }
  return c;
}

ActivationVector activation_vector(const GeoPoint& l, ClockTime mu,
                                   const IndexConfig& cfg) {
  return activation_from_tiles(quantize(l, mu, cfg), cfg);
}

int activation_difference_mass(const ActivationVector& a,
                               const ActivationVector& b) {
  int mass = 0;
  std::size_t i = 0, j = 0;
  while (i < a.entries.size() || j < b.entries.size()) {
    if (j == b.entries.size() ||
        (i < a.entries.size() && a.entries[i].first < b.entries[j].first)) {
      mass += a.entries[i++].second;
    } else if (i == a.entries.size() || b.entries[j].first < a.entries[i].first) {
      mass += b.entries[j++].second;
    } else {
      mass += std::abs(a.entries[i++].second - b.entries[j++].second);
    }
  }
  return mass;
}

std::uint64_t find_collision_free_seed(const std::vector<std::string>& codes,
                                       const IndexConfig& cfg,
                                       std::uint64_t start, int max_tries) {
  IndexConfig probe = cfg;
  for (int attempt = 0; attempt < max_tries; ++attempt) {
    probe.hash_seed = start + static_cast<std::uint64_t>(attempt);
    std::unordered_set<std::int64_t> seen;
    bool ok = true;
    for (const std::string& code : codes) {
      if (!seen.insert(map_to_memory(code, probe)).second) {
        ok = false;
        break;
      }
    }
    if (ok) return probe.hash_seed;
  }
  throw ConfigError("no collision-free hash seed found; increase memory_size");
}

}  // namespace cvnet
