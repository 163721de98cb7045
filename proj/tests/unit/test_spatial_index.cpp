#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>
#include <set>

#include "cvnet/spatial_index.hpp"

using namespace cvnet;

namespace {

// Brute force: the hex cell is the lattice point whose center is nearest.
HexCoord nearest_center(const GeoPoint& p, double edge) {
  const HexCoord guess = hex_cell_at(p, edge);
  HexCoord best = guess;
  double best_d = std::numeric_limits<double>::infinity();
  for (int dq = -3; dq <= 3; ++dq)
    for (int dr = -3; dr <= 3; ++dr) {
      const HexCoord c{guess.q + dq, guess.r + dr};
      const double d = distance(p, hex_center(c, edge));
      if (d < best_d - 1e-9) {
        best_d = d;
        best = c;
      }
    }
  return best;
}

}  // namespace

TEST_CASE("hex cell matches the nearest lattice center") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-20000, 20000);
  for (double edge : {490.0, 1297.0, 3430.0}) {
    for (int i = 0; i < 5000; ++i) {
      const GeoPoint p{u(rng), u(rng)};
      CHECK(hex_cell_at(p, edge) == nearest_center(p, edge));
    }
  }
}

TEST_CASE("hex centers round-trip") {
  for (int q = -5; q <= 5; ++q)
    for (int r = -5; r <= 5; ++r) CHECK(hex_cell_at(hex_center({q, r}, 700), 700) == HexCoord{q, r});
}

TEST_CASE("clock time saturates at the terminal time") {
  CHECK(ClockTime(86000).advanced(1000) == ClockTime::terminal());
  CHECK(ClockTime::terminal().is_terminal());
  CHECK_FALSE(ClockTime(kSecondsPerDay - 1).is_terminal());
  CHECK_THROWS(ClockTime(-1));
}

TEST_CASE("default index has three layers, finest last") {
  const IndexConfig cfg = IndexConfig::defaults();
  REQUIRE(cfg.n_tilings() == 3);
  CHECK(cfg.layers[0].edge_length > cfg.layers[1].edge_length);
  CHECK(cfg.layers[1].edge_length > cfg.layers[2].edge_length);
  CHECK_NOTHROW(cfg.validate());
  IndexConfig bad = cfg;
  bad.layers[1].edge_length = 2000;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = cfg;
  bad.memory_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("time buckets honour the phase") {
  TilingLayer l;
  l.time_bucket_seconds = 600;
  l.time_offset_seconds = 450;
  CHECK(time_bucket(l, ClockTime(449)) == -1);
  CHECK(time_bucket(l, ClockTime(450)) == 0);
  CHECK(time_bucket(l, ClockTime(1049)) == 0);
  CHECK(time_bucket(l, ClockTime(1050)) == 1);
}

TEST_CASE("activation vector has one count per layer") {
  const IndexConfig cfg = IndexConfig::defaults();
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 10000);
  for (int i = 0; i < 200; ++i) {
    const ActivationVector a = activation_vector({u(rng), u(rng)}, ClockTime(i * 400), cfg);
    CHECK(a.total_count() == 3);
    CHECK(a.n_tilings == 3);
    for (std::size_t k = 1; k < a.entries.size(); ++k) CHECK(a.entries[k - 1].first < a.entries[k].first);
    for (const auto& [idx, n] : a.entries) {
      CHECK(idx >= 0);
      CHECK(idx < cfg.memory_size);
    }
  }
}

TEST_CASE("the hash is deterministic and seed dependent") {
  IndexConfig a = IndexConfig::defaults();
  IndexConfig b = a;
  b.hash_seed = 99;
  const auto tiles = quantize({1234, 5678}, ClockTime(40000), a);
  CHECK(map_to_memory(tiles[0], a) == map_to_memory(tiles[0], a));
  int differ = 0;
  for (const auto& t : tiles) differ += map_to_memory(t, a) != map_to_memory(t, b);
  CHECK(differ > 0);
}

TEST_CASE("nearby states share tiles, distant ones mostly do not") {
  const IndexConfig cfg = IndexConfig::defaults();
  const auto a = activation_vector({5000, 5000}, ClockTime(36000), cfg);
  CHECK(activation_difference_mass(a, a) == 0);
  const auto far = activation_vector({500, 9500}, ClockTime(72000), cfg);
  CHECK(activation_difference_mass(a, far) == 6);
}

TEST_CASE("collision-free seed search") {
  IndexConfig cfg = IndexConfig::single_layer(500, 3600, 600);
  std::vector<std::string> codes;
  for (int q = 0; q < 4; ++q)
    for (int b = 0; b < 24; ++b)
      codes.push_back(quantize(hex_center({q, 0}, 500), ClockTime(b * 3600), cfg)[0].cell_code);
  cfg.hash_seed = find_collision_free_seed(codes, cfg);
  std::set<std::int64_t> rows;
  for (const auto& c : codes) rows.insert(map_to_memory(c, cfg));
  CHECK(rows.size() == codes.size());

  IndexConfig tiny = IndexConfig::single_layer(500, 3600, 10);
  CHECK_THROWS_AS(find_collision_free_seed(codes, tiny, 0, 50), ConfigError);
}

TEST_CASE("spatial cell codes parse back") {
  int layer = -1;
  HexCoord c;
  REQUIRE(parse_spatial_cell_code(spatial_cell_code(2, {-3, 7}), layer, c));
  CHECK(layer == 2);
  CHECK(c == HexCoord{-3, 7});
  CHECK_FALSE(parse_spatial_cell_code("x1:2:3", layer, c));
  CHECK_FALSE(parse_spatial_cell_code("h1:2", layer, c));
}

TEST_CASE("index config JSON round trip") {
  IndexConfig cfg = IndexConfig::defaults();
  cfg.hash_seed = 17;
  const nlohmann::json j = cfg;
  CHECK(j.get<IndexConfig>() == cfg);
}
