#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "cvnet/transfer.hpp"

using namespace cvnet;

TEST_CASE("feature splits must partition the features") {
  const FeatureSplit s = FeatureSplit::contiguous(4, 3);
  CHECK(s.width == 7);
  CHECK(s.nonadaptive == std::vector<int>{0, 1, 2, 3});
  CHECK_NOTHROW(s.validate());
  FeatureSplit bad = s;
  bad.adaptive.push_back(0);
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = s;
  bad.adaptive.pop_back();
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  const nlohmann::json j = s;
  CHECK(j.get<FeatureSplit>() == s);
}

TEST_CASE("progressive backward matches finite differences") {
  std::mt19937_64 rng(1);
  Mlp<double> src({3, 4, 3, 1}), tgt({2, 5, 3, 1});
  src.he_uniform_init(rng);
  tgt.he_uniform_init(rng);
  auto p = ProgressiveParams<double>::make(src, tgt);
  std::normal_distribution<double> n01(0, 1);
  for (std::size_t i = 1; i < p.laterals.size(); ++i)
    for (Eigen::Index k = 0; k < p.laterals[i].size(); ++k) p.laterals[i].data()[k] = 0.5 * n01(rng);
  for (auto& l : p.target.layers) l.bias.setConstant(0.05);
  Eigen::MatrixXd xs(3, 4), xt(2, 4);
  for (Eigen::Index k = 0; k < xs.size(); ++k) xs.data()[k] = n01(rng);
  for (Eigen::Index k = 0; k < xt.size(); ++k) xt.data()[k] = n01(rng);
  const Eigen::RowVectorXd w = Eigen::RowVectorXd::LinSpaced(4, -1, 2);
  auto f = [&] { return progressive_forward<double>(p, xs, xt).dot(w); };

  ProgressiveTrace<double> tr;
  progressive_forward<double>(p, xs, xt, &tr);
  auto g = zero_gradients(p);
  const Eigen::MatrixXd dx = progressive_backward<double>(p, tr, w, g);
  const double h = 1e-6;
  auto fd = [&](double& x) {
    const double keep = x;
    x = keep + h;
    const double up = f();
    x = keep - h;
    const double down = f();
    x = keep;
    return (up - down) / (2 * h);
  };
  for (std::size_t i = 0; i < p.target.layers.size(); ++i)
    for (Eigen::Index k = 0; k < p.target.layers[i].weight.size(); ++k)
      CHECK(g.target.layers[i].weight.data()[k] ==
            doctest::Approx(fd(p.target.layers[i].weight.data()[k])).epsilon(1e-6));
  for (std::size_t i = 1; i < p.laterals.size(); ++i)
    for (Eigen::Index k = 0; k < p.laterals[i].size(); ++k)
      CHECK(g.laterals[i].data()[k] == doctest::Approx(fd(p.laterals[i].data()[k])).epsilon(1e-6));
  for (Eigen::Index k = 0; k < xt.size(); ++k)
    CHECK(dx.data()[k] == doctest::Approx(fd(xt.data()[k])).epsilon(1e-6));
}

TEST_CASE("zero laterals reproduce the target column exactly") {
  const IndexConfig index = IndexConfig::defaults();
  TransferModelConfig mc;
  mc.seed = 4;
  mc.embedding_dim = 6;
  mc.hidden = {8, 8};
  const FeatureSplit split = default_transfer_split(mc.embedding_dim, mc.context_dim);
  TransferNetwork source = make_source_network(index, split, mc);
  const auto data = SyntheticCity::generate(1).samples(300, 2, 0.1, mc.context_dim);
  TransferTrainConfig tc;
  tc.steps = 50;
  train_transfer(source, data, data, tc);
  const TransferNetwork base = make_transfer_network(index, split, mc);
  const TransferNetwork cfpt = make_transfer_network(index, split, mc, &source.columns.target);
  CHECK_FALSE(base.columns.has_source());
  CHECK(cfpt.columns.has_source());
  for (const auto& s : data) CHECK(base.value(s.location, s.time, s.context) == cfpt.value(s.location, s.time, s.context));
}

TEST_CASE("training never writes the source column") {
  const IndexConfig index = IndexConfig::defaults();
  TransferModelConfig mc;
  mc.embedding_dim = 4;
  mc.hidden = {6, 6};
  const FeatureSplit split = default_transfer_split(mc.embedding_dim, mc.context_dim);
  const TransferNetwork source = make_source_network(index, split, mc);
  TransferNetwork net = make_transfer_network(index, split, mc, &source.columns.target);
  const Mlp<double> frozen = net.columns.source;
  const auto data = SyntheticCity::generate(2).samples(200, 3, 0.5, mc.context_dim);
  TransferTrainConfig tc;
  tc.steps = 40;
  tc.eval_interval = 10;
  const auto curve = train_transfer(net, data, data, tc);
  CHECK(net.columns.source == frozen);
  REQUIRE(curve.size() == 5);
  CHECK(curve.front().step == 0);
  CHECK(curve.back().step == 40);
  CHECK(curve.back().eval_loss < curve.front().eval_loss);
}

TEST_CASE("steps to reach a loss") {
  const std::vector<TransferCurvePoint> c{{0, 5}, {10, 3}, {20, 1}, {30, 2}};
  CHECK(steps_to_reach(c, 3.0) == 10);
  CHECK(steps_to_reach(c, 1.0) == 20);
  CHECK_FALSE(steps_to_reach(c, 0.5).has_value());
}

TEST_CASE("synthetic noise is standard normal") {
  const SyntheticCity city = SyntheticCity::generate(9);
  const auto s = city.samples(4000, 10, 1.0, 3);
  std::vector<double> r;
  for (const auto& x : s) r.push_back(x.target - city.true_value(x.location, x.time, x.context));
  std::sort(r.begin(), r.end());
  double d = 0;
  const double n = static_cast<double>(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double cdf = 0.5 * std::erfc(-r[i] / std::sqrt(2.0));
    d = std::max({d, std::abs(cdf - i / n), std::abs(cdf - (i + 1) / n)});
  }
  CHECK(d < 1.63 / std::sqrt(n));  // Kolmogorov-Smirnov at the 1% level
  for (const auto& x : city.samples(50, 11, 0.0, 3))
    CHECK(x.target == city.true_value(x.location, x.time, x.context));
}

TEST_CASE("time features are periodic") {
  const Eigen::VectorXd a = time_features(ClockTime(0));
  const Eigen::VectorXd b = time_features(ClockTime(43200));
  REQUIRE(a.size() == kTimeFeatureDim);
  CHECK(a(0) == doctest::Approx(0.0));
  CHECK((a.head(6) - time_features(ClockTime(kSecondsPerDay - 1)).head(6)).norm() < 1e-3);
  CHECK((a - b).norm() > 0.5);
}

TEST_CASE("finetuning copies heads and freezes them") {
  std::mt19937_64 rng(6);
  NetworkShape shape;
  shape.memory_size = 64;
  shape.embedding_dim = 4;
  shape.hidden = {5};
  Checkpoint src;
  src.net = ValueNetwork::initialized(shape, rng);
  src.index = IndexConfig::defaults();
  src.index.memory_size = 64;
  IndexConfig target = IndexConfig::defaults();
  target.memory_size = 128;
  target.hash_seed = 3;
  const ValueNetwork net = init_finetune(&src, target, 1);
  CHECK(net.main == src.net.main);
  CHECK(net.memory_size() == 128);
  const FreezeMask mask = freeze_all_copied(net);
  CHECK(std::all_of(mask.main_layers.begin(), mask.main_layers.end(), [](bool b) { return b; }));
  CHECK(mask.main_layers.size() == net.main.layers.size());
  NetworkShape other = shape;
  other.hidden = {7};
  CHECK_THROWS_AS(init_finetune(&src, target, 1, &other), ConfigError);
}

TEST_CASE("transfer checkpoint round trip") {
  TransferModelConfig mc;
  mc.embedding_dim = 4;
  mc.hidden = {6, 6};
  const IndexConfig index = IndexConfig::defaults();
  const FeatureSplit split = default_transfer_split(4, 3);
  TransferCheckpoint ck;
  const TransferNetwork source = make_source_network(index, split, mc);
  ck.net = make_transfer_network(index, split, mc, &source.columns.target);
  ck.source_hash = "abc";
  const std::string bytes = save_transfer_checkpoint(ck);
  const TransferCheckpoint back = load_transfer_checkpoint(bytes);
  CHECK(back.source_hash == "abc");
  CHECK(save_transfer_checkpoint(back) == bytes);
  CHECK(transfer_content_hash(back) == transfer_content_hash(ck));
  CHECK_THROWS(load_transfer_checkpoint(bytes.substr(0, 20)));
}
