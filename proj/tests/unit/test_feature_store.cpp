#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "cvnet/feature_store.hpp"
#include "cvnet/policy_evaluation.hpp"

using namespace cvnet;

namespace {

std::string code_at(const IndexConfig& idx, int layer, const GeoPoint& p) {
  return spatial_cell_code(layer, layer_cell(idx.layers[static_cast<std::size_t>(layer)], p));
}

}  // namespace

TEST_CASE("discounted option reward") {
  CHECK(discounted_option_reward(10, 1, 0.9) == doctest::Approx(10));
  // (10/2)(1 + 0.9)
  CHECK(discounted_option_reward(10, 2, 0.9) == doctest::Approx(9.5));
  // (12/3)(1 + 0.5 + 0.25)
  CHECK(discounted_option_reward(12, 3, 0.5) == doctest::Approx(7.0));
  CHECK(discounted_option_reward(12, 3, 1.0) == doctest::Approx(12.0));
  CHECK(td_target(12, 3, 0.5, 8, false) == doctest::Approx(7.0 + 1.0));
  CHECK(td_target(12, 3, 0.5, 8, true) == doctest::Approx(7.0));
}

TEST_CASE("trajectory splitting fills idle gaps") {
  const auto j = nlohmann::json::parse(R"({"traj_id": "d1", "events": [
    {"type": "trip", "t0": 0, "t1": 600, "x0": 0, "y0": 0, "x1": 1000, "y1": 0, "fare": 5},
    {"type": "trip", "t0": 900, "t1": 1500, "x0": 1100, "y0": 0, "x1": 2000, "y1": 0, "fare": 6},
    {"type": "trip", "t0": 1800, "t1": 2400, "x0": 2000, "y0": 100, "x1": 0, "y1": 0, "fare": 7}]})");
  const auto ts = split_trajectory(j);
  REQUIRE(ts.size() == 5);
  CHECK(ts[0].is_trip);
  CHECK(ts[0].duration_steps == 10);
  CHECK(ts[0].reward == 5);
  CHECK_FALSE(ts[1].is_trip);
  CHECK(ts[1].reward == 0);
  CHECK(ts[1].duration_steps == 5);
  CHECK(ts[1].origin == GeoPoint{1000, 0});
  CHECK(ts[1].destination == GeoPoint{1100, 0});
  CHECK(ts[4].is_terminal);
  for (int i = 0; i < 4; ++i) CHECK_FALSE(ts[static_cast<std::size_t>(i)].is_terminal);
}

TEST_CASE("malformed trajectories are rejected per line") {
  std::stringstream in;
  in << R"({"traj_id": "a", "events": [{"type": "trip", "t0": 10, "t1": 5, "x0": 0, "y0": 0, "x1": 0, "y1": 0}]})"
     << "\n{not json\n"
     << R"({"traj_id": "b", "events": [{"type": "idle", "t0": 0, "t1": 120, "x0": 0, "y0": 0, "x1": 5, "y1": 5}]})"
     << "\n";
  const TrajectoryDataset ds = ingest_trajectories(in);
  CHECK(ds.trajectories == 1);
  CHECK(ds.transitions.size() == 1);
  REQUIRE(ds.errors.size() == 2);
  CHECK(ds.errors[0].line == 1);
  CHECK(ds.errors[1].line == 2);
}

TEST_CASE("range query covers the buckets meeting the window") {
  const IndexConfig idx = IndexConfig::defaults();
  FeatureStore store(idx);
  const GeoPoint l{5000, 5000};
  const std::string base = code_at(idx, 2, l);
  for (int b = 0; b < 24 * 3600; b += 300) REQUIRE(store.put("order_count", base, b, b / 300.0));
  const auto s = store.range_query(l, ClockTime(3600), 600);
  REQUIRE(s.size() == 5);
  CHECK(s.front().bucket_seconds == 3000);
  CHECK(s.back().bucket_seconds == 4200);
  CHECK(s.front().values(1) == 10.0);
  CHECK(s.front().values(0) == 0.0);  // missing feature in a present bucket
  CHECK(store.range_query(l, ClockTime(3600), 0).size() == 1);
  CHECK(store.range_query({100, 9900}, ClockTime(3600), 600).empty());
}

TEST_CASE("missing base cells fall back to coarser layers") {
  const IndexConfig idx = IndexConfig::defaults();
  FeatureStore store(idx);
  const GeoPoint l{3000, 7000};
  REQUIRE(store.put("query_count", code_at(idx, 0, l), 600, 4.0));
  REQUIRE(store.put("query_count", code_at(idx, 1, l), 600, 5.0));
  auto s = store.range_query(l, ClockTime(600), 0);
  REQUIRE(s.size() == 1);
  CHECK(s[0].values(0) == 5.0);
  REQUIRE(store.put("query_count", code_at(idx, 2, l), 600, 6.0));
  s = store.range_query(l, ClockTime(600), 0);
  CHECK(s[0].values(0) == 6.0);
  CHECK_FALSE(store.put("no_such_feature", code_at(idx, 2, l), 600, 1.0));
  CHECK_FALSE(store.put("query_count", "h9:0:0", 600, 1.0));
}

TEST_CASE("feature CSV round trip") {
  const IndexConfig idx = IndexConfig::defaults();
  FeatureStore store(idx);
  store.put("order_count", code_at(idx, 2, {1, 1}), 300, 2.5);
  store.put("idle_driver_count", code_at(idx, 1, {9000, 1}), 86100, 7);
  std::stringstream csv;
  store.write_csv(csv);
  const FeatureStore back = ingest_features(csv);
  CHECK(back.index() == idx);
  CHECK(back.size() == 2);
  CHECK(back.get("order_count", code_at(idx, 2, {1, 1}), 300) == 2.5);
  std::stringstream again;
  back.write_csv(again);
  std::stringstream first;
  store.write_csv(first);
  CHECK(again.str() == first.str());
}

TEST_CASE("empty range query falls back to the cell mean") {
  const IndexConfig idx = IndexConfig::defaults();
  FeatureStore store(idx);
  const GeoPoint l{5000, 5000};
  store.put("order_count", code_at(idx, 2, l), 300, 2.0);
  store.put("order_count", code_at(idx, 2, l), 600, 4.0);
  store.finalize();
  TransitionTuple t;
  t.origin = l;
  t.origin_time = ClockTime(50000);
  t.destination = l;
  t.destination_time = ClockTime(50600);
  std::mt19937_64 rng(1);
  const AugmentedTransition a = randomize_context(t, 300, store, rng);
  CHECK(a.origin_missing);
  CHECK(a.origin_context(1) == doctest::Approx(3.0));
}

TEST_CASE("tabular DP on a three-state chain") {
  // A -> B -> end, one step each, unit fares, gamma 0.5: V = (1.5, 1, 0).
  const TabularGrid grid{IndexConfig::single_layer(500, 3600, 100).layers[0]};
  TransitionTuple ab, bt;
  ab.origin = {0, 0};
  ab.origin_time = ClockTime(1800);
  ab.destination = {5000, 0};
  ab.destination_time = ClockTime(5400);
  ab.reward = 1;
  ab.duration_steps = 1;
  bt = ab;
  bt.origin = ab.destination;
  bt.origin_time = ab.destination_time;
  bt.destination_time = ClockTime::terminal();
  bt.is_terminal = true;
  const std::vector<TransitionTuple> data{ab, bt};
  const TabularValue v = tabular_dp_evaluate(data, grid, 0.5);
  CHECK(v.value(ab.origin, ab.origin_time) == doctest::Approx(1.5));
  CHECK(v.value(bt.origin, bt.origin_time) == doctest::Approx(1.0));
  CHECK(v.value(bt.origin, ClockTime::terminal()) == 0.0);

  std::stringstream csv;
  v.write_csv(csv);
  const TabularValue back = TabularValue::read_csv(csv);
  CHECK(back.value(ab.origin, ab.origin_time) == doctest::Approx(1.5));
}

TEST_CASE("train config rejects unknown keys and bad values") {
  CHECK_THROWS(nlohmann::json{{"gama", 0.9}}.get<TrainConfig>());
  TrainConfig c;
  c.gamma = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  const nlohmann::json j = TrainConfig{};
  CHECK(j.get<TrainConfig>().gamma == 0.92);
}

TEST_CASE("histogram and value profile") {
  const std::vector<double> xs{0.0, 0.1, 0.5, 0.99, 1.0, -1.0};
  const Histogram h = histogram(xs, 0.0, 1.0, 2);
  REQUIRE(h.counts.size() == 2);
  CHECK(h.counts[0] + h.counts[1] <= 6);
  CHECK(h.edges.size() == 3);

  struct Ramp : StateValueFunction {
    double value(const GeoPoint&, ClockTime mu) const override {
      return mu.is_terminal() ? 0.0 : mu.seconds() / 3600.0;
    }
  } ramp;
  const std::vector<GeoPoint> locs{{0, 0}, {1, 1}};
  const auto prof = value_profile(ramp, locs, 3600);
  REQUIRE(prof.size() == 24);
  CHECK(prof[0].mean == doctest::Approx(0.5));
  CHECK(prof[23].mean == doctest::Approx(23.5));
  CHECK(prof[5].stddev == doctest::Approx(0.0));
}
