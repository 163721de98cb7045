#include <doctest.h>

#include <random>

#include "cvnet/checkpoint.hpp"
#include "cvnet/value_network.hpp"

using namespace cvnet;

namespace {

NetworkShape tiny_shape() {
  NetworkShape s;
  s.memory_size = 16;
  s.embedding_dim = 3;
  s.hidden = {4};
  s.static_dim = 1;
  s.dynamic_dim = 2;
  return s;
}

IndexConfig tiny_index() {
  IndexConfig idx = IndexConfig::defaults();
  idx.memory_size = 16;
  return idx;
}

StateFeatures state_at(double x, double y, int t, const IndexConfig& idx) {
  Eigen::VectorXd st(1), dyn(2);
  st << 0.3;
  dyn << -0.5, 1.2;
  return {activation_vector({x, y}, ClockTime(t), idx), st, dyn};
}

}  // namespace

TEST_CASE("operator norms of a 2x2 matrix") {
  Eigen::MatrixXd w(2, 2);
  w << 1, -2, 3, 4;
  CHECK(operator_norm(w, NormOrder::L1) == doctest::Approx(6.0));    // max column sum
  CHECK(operator_norm(w, NormOrder::LInf) == doctest::Approx(7.0));  // max row sum
  // Largest singular value: sqrt of the top eigenvalue of W^T W.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(w.transpose() * w);
  CHECK(operator_norm(w, NormOrder::L2) == doctest::Approx(std::sqrt(es.eigenvalues().maxCoeff())).epsilon(1e-6));
}

TEST_CASE("embedding bound is twice the largest row norm") {
  RowMajorMatrixX<double> theta(2, 2);
  theta << 1, 1, 0, 3;
  CHECK(embedding_lipschitz(theta, NormOrder::L1) == doctest::Approx(6.0));
  CHECK(embedding_lipschitz(theta, NormOrder::LInf) == doctest::Approx(6.0));
  theta << 2, 2, 0, 3;
  CHECK(embedding_lipschitz(theta, NormOrder::L1) == doctest::Approx(8.0));
  CHECK(embedding_lipschitz(theta, NormOrder::LInf) == doctest::Approx(6.0));
}

TEST_CASE("penalty sums layer constants, the logged bound multiplies them") {
  std::mt19937_64 rng(1);
  const ValueNetwork net = ValueNetwork::initialized(tiny_shape(), rng);
  for (NormOrder p : {NormOrder::L1, NormOrder::LInf}) {
    const double emb = embedding_lipschitz(net.embedding, p);
    const double l0 = operator_norm(net.main.layers[0].weight, p);
    const double l1 = operator_norm(net.main.layers[1].weight, p);
    CHECK(lipschitz_penalty(net, p) == doctest::Approx(emb + l0 + l1));
    CHECK(lipschitz_bound(net, p).product == doctest::Approx(std::max(emb, 1.0) * l0 * l1));
  }
}

TEST_CASE("embedding is the count-weighted mean of active rows") {
  std::mt19937_64 rng(2);
  const ValueNetwork net = ValueNetwork::initialized(tiny_shape(), rng);
  const IndexConfig idx = tiny_index();
  const StateFeatures f = state_at(1000, 2000, 30000, idx);
  Eigen::VectorXd expect = Eigen::VectorXd::Zero(3);
  for (const auto& [row, n] : f.activation.entries) expect += n * net.embedding.row(row).transpose();
  expect /= 3.0;
  CHECK((embed(f, net) - expect).norm() < 1e-14);
}

TEST_CASE("backward matches finite differences") {
  std::mt19937_64 rng(3);
  ValueNetwork net = ValueNetwork::initialized(tiny_shape(), rng);
  std::normal_distribution<double> n01(0, 1);
  for (Eigen::Index i = 0; i < net.embedding.size(); ++i) net.embedding.data()[i] = 0.5 * n01(rng);
  for (auto& l : net.main.layers) l.bias.setConstant(0.1);
  const IndexConfig idx = tiny_index();
  std::vector<LabeledState> batch{{state_at(1000, 2000, 3000, idx), 1.0},
                                  {state_at(8000, 500, 70000, idx), -2.0},
                                  {state_at(4000, 4000, 40000, idx), 0.5}};
  for (NormOrder p : {NormOrder::L1, NormOrder::LInf}) {
    const double lambda = 0.1;
    const auto res = backward<double>(batch, net, lambda, p);
    auto loss = [&] { return backward<double>(batch, net, lambda, p).loss; };
    const double h = 1e-6;
    auto fd = [&](double& x) {
      const double keep = x;
      x = keep + h;
      const double up = loss();
      x = keep - h;
      const double down = loss();
      x = keep;
      return (up - down) / (2 * h);
    };
    for (std::size_t k = 0; k < net.main.layers.size(); ++k) {
      auto& w = net.main.layers[k].weight;
      for (Eigen::Index i = 0; i < w.size(); ++i)
        CHECK(res.gradients.main.layers[k].weight.data()[i] == doctest::Approx(fd(w.data()[i])).epsilon(1e-5));
    }
    for (const auto& [row, g] : res.gradients.embedding_rows)
      for (Eigen::Index c = 0; c < 3; ++c) CHECK(g(c) == doctest::Approx(fd(net.embedding(row, c))).epsilon(1e-5));
  }
}

TEST_CASE("distilled head ignores dynamic context") {
  std::mt19937_64 rng(4);
  const ValueNetwork net = ValueNetwork::initialized(tiny_shape(), rng);
  StateFeatures f = state_at(100, 100, 100, tiny_index());
  const double v = forward_distilled(f, net);
  f.dynamic_context = Eigen::Vector2d(9, 9);
  CHECK(forward_distilled(f, net) == v);
}

TEST_CASE("checkpoint round trip and corruption") {
  std::mt19937_64 rng(5);
  Checkpoint ck;
  ck.net = ValueNetwork::initialized(tiny_shape(), rng);
  ck.index = tiny_index();
  ck.scaling = ContextScaling::identity(2);
  ck.gamma = 0.9;
  ck.metadata["note"] = "x";
  const std::string bytes = save_checkpoint(ck);
  const Checkpoint back = load_checkpoint(bytes);
  CHECK(back.net == ck.net);
  CHECK(back.index == ck.index);
  CHECK(back.gamma == 0.9);
  CHECK(save_checkpoint(back) == bytes);
  CHECK(checkpoint_content_hash(back) == checkpoint_content_hash(ck));

  CHECK_THROWS_AS(load_checkpoint(bytes.substr(0, bytes.size() / 2)), CorruptCheckpoint);
  std::string flipped = bytes;
  flipped[flipped.size() - 9] ^= 0x40;
  CHECK_THROWS_AS(load_checkpoint(flipped), CorruptCheckpoint);

  IndexConfig other = ck.index;
  other.hash_seed = 7;
  CHECK_THROWS_AS(load_checkpoint(bytes, &other), ConfigError);
}

TEST_CASE("context scaling is log1p then standardize") {
  std::vector<Eigen::VectorXd> raw{Eigen::Vector2d(0, 1), Eigen::Vector2d(2, 3), Eigen::Vector2d(4, 5)};
  const ContextScaling s = ContextScaling::fit(raw, 2);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(2);
  for (const auto& r : raw) mean += r.array().log1p().matrix() / 3.0;
  CHECK((s.mean - mean).norm() < 1e-12);
  const Eigen::VectorXd z = s.apply(Eigen::Vector2d(2, 3));
  CHECK(z(0) == doctest::Approx((std::log1p(2.0) - mean(0)) / s.stddev(0)));
}
