#pragma once

// Cerebellar value network: hashed tile embedding followed by a ReLU MLP.
//
//   x(s)  = [ c(s)^T theta / n ; static context ; dynamic context ]
//   V(s)  = main MLP (x(s))
//   V~(s) = distilled MLP ([ c(s)^T theta / n ; static context ])
//
// The two heads share the embedding matrix theta (A x m).

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cvnet/lipschitz.hpp"
#include "cvnet/mlp.hpp"
#include "cvnet/spatial_index.hpp"

namespace cvnet {

struct StateFeatures {
  ActivationVector activation;
  Eigen::VectorXd static_context;
  std::optional<Eigen::VectorXd> dynamic_context;
};

struct NetworkShape {
  std::int64_t memory_size = 20000;
  int embedding_dim = 50;
  std::vector<int> hidden{32, 128, 32};
  int static_dim = 0;
  int dynamic_dim = 3;

  int main_input_width() const { return embedding_dim + static_dim + dynamic_dim; }
  int distilled_input_width() const { return embedding_dim + static_dim; }
};

void to_json(nlohmann::json& j, const NetworkShape& s);
void from_json(const nlohmann::json& j, NetworkShape& s);

template <typename Scalar>
struct BasicValueNetwork {
  RowMajorMatrixX<Scalar> embedding;  // A x m
  Mlp<Scalar> main;
  Mlp<Scalar> distilled;
  int static_dim = 0;
  int dynamic_dim = 0;

  std::int64_t memory_size() const { return embedding.rows(); }
  int embedding_dim() const { return static_cast<int>(embedding.cols()); }

  NetworkShape shape() const {
    NetworkShape s;
    s.memory_size = memory_size();
    s.embedding_dim = embedding_dim();
    const auto w = main.widths();
    s.hidden.assign(w.begin() + 1, w.end() - 1);
    s.static_dim = static_dim;
    s.dynamic_dim = dynamic_dim;
    return s;
  }

  /// All-zero network of the given shape.
  static BasicValueNetwork zeros(const NetworkShape& shape) {
    BasicValueNetwork net;
    if (shape.memory_size <= 0 || shape.embedding_dim <= 0 || shape.static_dim < 0 ||
        shape.dynamic_dim < 0) {
      throw ConfigError("invalid network shape");
    }
    net.embedding = RowMajorMatrixX<Scalar>::Zero(shape.memory_size, shape.embedding_dim);
    net.static_dim = shape.static_dim;
    net.dynamic_dim = shape.dynamic_dim;
    auto widths = [&](int in) {
      std::vector<int> w{in};
      w.insert(w.end(), shape.hidden.begin(), shape.hidden.end());
      w.push_back(1);
      return w;
    };
    net.main = Mlp<Scalar>(widths(shape.main_input_width()));
    net.distilled = Mlp<Scalar>(widths(shape.distilled_input_width()));
    return net;
  }

  /// Embedding rows uniform in [-0.01, 0.01]; MLPs He-uniform.
  template <typename Rng>
  static BasicValueNetwork initialized(const NetworkShape& shape, Rng& rng) {
    BasicValueNetwork net = zeros(shape);
    std::uniform_real_distribution<double> emb(-0.01, 0.01);
    for (Eigen::Index r = 0; r < net.embedding.rows(); ++r)
      for (Eigen::Index c = 0; c < net.embedding.cols(); ++c)
        net.embedding(r, c) = static_cast<Scalar>(emb(rng));
    net.main.he_uniform_init(rng);
    net.distilled.he_uniform_init(rng);
    return net;
  }

  friend bool operator==(const BasicValueNetwork& a, const BasicValueNetwork& b) {
    return a.static_dim == b.static_dim && a.dynamic_dim == b.dynamic_dim &&
           a.embedding.rows() == b.embedding.rows() &&
           a.embedding.cols() == b.embedding.cols() && a.embedding == b.embedding &&
           a.main == b.main && a.distilled == b.distilled;
  }
};

using ValueNetwork = BasicValueNetwork<double>;

/// c(s)^T theta / n.
template <typename Scalar>
VectorX<Scalar> embed(const ActivationVector& c, const BasicValueNetwork<Scalar>& net) {
  VectorX<Scalar> out = VectorX<Scalar>::Zero(net.embedding_dim());
  if (c.n_tilings <= 0) throw ConfigError("activation vector has no tilings");
  for (const auto& [idx, count] : c.entries) {
    if (idx < 0 || idx >= net.memory_size()) {
      throw ConfigError("activation index " + std::to_string(idx) +
                        " outside embedding memory");
    }
    out += Scalar(count) * net.embedding.row(idx).transpose();
  }
  return out / Scalar(c.n_tilings);
}

template <typename Scalar>
VectorX<Scalar> embed(const StateFeatures& f, const BasicValueNetwork<Scalar>& net) {
  return embed(f.activation, net);
}

template <typename Scalar>
VectorX<Scalar> main_input(const StateFeatures& f, const BasicValueNetwork<Scalar>& net) {
  if (!f.dynamic_context) throw std::invalid_argument("dynamic context absent");
  if (f.static_context.size() != net.static_dim ||
      f.dynamic_context->size() != net.dynamic_dim) {
    throw ConfigError("context width does not match network");
  }
  VectorX<Scalar> x(net.embedding_dim() + net.static_dim + net.dynamic_dim);
  x << embed(f, net), f.static_context.template cast<Scalar>(),
      f.dynamic_context->template cast<Scalar>();
  return x;
}

template <typename Scalar>
VectorX<Scalar> distilled_input(const StateFeatures& f, const BasicValueNetwork<Scalar>& net) {
  if (f.static_context.size() != net.static_dim) {
    throw ConfigError("static context width does not match network");
  }
  VectorX<Scalar> x(net.embedding_dim() + net.static_dim);
  x << embed(f, net), f.static_context.template cast<Scalar>();
  return x;
}

template <typename Scalar>
Scalar forward_value(const StateFeatures& f, const BasicValueNetwork<Scalar>& net) {
  return net.main.forward_one(main_input(f, net));
}

template <typename Scalar>
Scalar forward_distilled(const StateFeatures& f, const BasicValueNetwork<Scalar>& net) {
  return net.distilled.forward_one(distilled_input(f, net));
}

/// Gradient of the regularized objective. Embedding gradients are sparse:
/// only activated rows (and the penalty's arg-max row) appear.
template <typename Scalar>
struct ValueGradients {
  std::map<std::int64_t, VectorX<Scalar>> embedding_rows;
  Mlp<Scalar> main;

  void add_row(std::int64_t row, const VectorX<Scalar>& g) {
    auto it = embedding_rows.find(row);
    if (it == embedding_rows.end()) {
      embedding_rows.emplace(row, g);
    } else {
      it->second += g;
    }
  }

  Scalar squared_norm() const {
    Scalar s = main.squared_norm();
    for (const auto& [row, g] : embedding_rows) s += g.squaredNorm();
    return s;
  }

  void scale(Scalar f) {
    main *= f;
    for (auto& [row, g] : embedding_rows) g *= f;
  }
};

template <typename Scalar>
struct BackwardResult {
  ValueGradients<Scalar> gradients;
  Scalar loss = 0;        // data_loss + lambda * penalty
  Scalar data_loss = 0;   // (1/2) mean (V - y)^2
  Scalar penalty = 0;     // sum of per-layer Lipschitz constants
  Scalar mean_value = 0;  // mean V over the batch
};

struct LabeledState {
  StateFeatures features;
  double target = 0.0;
};

/// Row p-norms of theta, kept current by the trainer after each update so
/// that the embedding bound is an O(A) scan rather than O(A m).
template <typename Scalar>
struct RowNormCache {
  NormOrder p = NormOrder::L1;
  VectorX<Scalar> norms;

  void rebuild(const RowMajorMatrixX<Scalar>& theta, NormOrder order) {
    p = order;
    norms.resize(theta.rows());
    for (Eigen::Index i = 0; i < theta.rows(); ++i) norms(i) = vector_norm(theta.row(i), p);
  }
  void update(const RowMajorMatrixX<Scalar>& theta, Eigen::Index row) {
    norms(row) = vector_norm(theta.row(row), p);
  }
  /// Same first-index tie rule as embedding_lipschitz.
  Eigen::Index argmax() const {
    Scalar best = Scalar(0);
    Eigen::Index row = 0;
    for (Eigen::Index i = 0; i < norms.size(); ++i) {
      if (norms(i) > best) {
        best = norms(i);
        row = i;
      }
    }
    return row;
  }
};

/// Penalty R(theta): embedding bound plus the operator norm of every dense
/// layer of the main head. ReLU constants are 1 and carry no gradient, so
/// they are left out of the sum.
template <typename Scalar>
Scalar lipschitz_penalty(const BasicValueNetwork<Scalar>& net, NormOrder p,
                         const RowNormCache<Scalar>* cache = nullptr) {
  Scalar r = cache ? Scalar(2) * cache->norms(cache->argmax())
                   : embedding_lipschitz(net.embedding, p);
  for (const auto& l : net.main.layers) r += operator_norm(l.weight, p);
  return r;
}

template <typename Scalar>
void add_penalty_gradient(const BasicValueNetwork<Scalar>& net, NormOrder p, Scalar lambda,
                          ValueGradients<Scalar>& g,
                          const RowNormCache<Scalar>* cache = nullptr) {
  if (lambda == Scalar(0)) return;
  if (cache) {
    const Eigen::Index row = cache->argmax();
    g.add_row(row, lambda * embedding_row_subgradient(net.embedding.row(row), p));
  } else {
    auto [row, grow] = embedding_lipschitz_subgradient(net.embedding, p);
    g.add_row(row, lambda * grow);
  }
  for (std::size_t i = 0; i < net.main.layers.size(); ++i) {
    g.main.layers[i].weight += lambda * operator_norm_subgradient(net.main.layers[i].weight, p);
  }
}

/// Loss and gradient of (1/2B) sum_b (V(s_b) - y_b)^2 + lambda R(theta).
template <typename Scalar>
BackwardResult<Scalar> backward(std::span<const LabeledState> batch,
                                const BasicValueNetwork<Scalar>& net, Scalar lambda,
                                NormOrder p, const RowNormCache<Scalar>* cache = nullptr) {
  if (batch.empty()) throw std::invalid_argument("backward: empty batch");
  if (lambda < Scalar(0)) throw std::invalid_argument("backward: lambda must be >= 0");
  const Eigen::Index B = static_cast<Eigen::Index>(batch.size());
  const int m = net.embedding_dim();
  MatrixX<Scalar> inputs(net.main.input_width(), B);
  for (Eigen::Index b = 0; b < B; ++b) {
    if (!std::isfinite(batch[static_cast<std::size_t>(b)].target)) {
      throw DataError("non-finite regression target");
    }
    inputs.col(b) = main_input(batch[static_cast<std::size_t>(b)].features, net);
  }
  typename Mlp<Scalar>::Trace trace;
  const RowVectorX<Scalar> out = net.main.forward(inputs, &trace);

  BackwardResult<Scalar> res;
  res.gradients.main = net.main.zeros_like();
  RowVectorX<Scalar> resid(B);
  for (Eigen::Index b = 0; b < B; ++b) {
    resid(b) = out(b) - Scalar(batch[static_cast<std::size_t>(b)].target);
  }
  res.data_loss = Scalar(0.5) * resid.squaredNorm() / Scalar(B);
  res.mean_value = out.mean();
  const RowVectorX<Scalar> dout = resid / Scalar(B);
  const MatrixX<Scalar> dx = net.main.backward(trace, dout, res.gradients.main);
  for (Eigen::Index b = 0; b < B; ++b) {
    const ActivationVector& c = batch[static_cast<std::size_t>(b)].features.activation;
    const VectorX<Scalar> de = dx.col(b).head(m) / Scalar(c.n_tilings);
    for (const auto& [idx, count] : c.entries) res.gradients.add_row(idx, Scalar(count) * de);
  }
  if (cache && cache->p != p) throw std::invalid_argument("row norm cache built for another p");
  res.penalty = lipschitz_penalty(net, p, cache);
  add_penalty_gradient(net, p, lambda, res.gradients, cache);
  res.loss = res.data_loss + lambda * res.penalty;
  return res;
}

struct LipschitzReport {
  std::vector<std::pair<std::string, double>> per_layer;
  double product = 1.0;
  double embedding_constant = 0.0;  // 2 max_i ||theta_i||_p
  NormOrder p = NormOrder::L1;
};

/// Product of the per-layer constants of an MLP (ReLU layers contribute 1).
template <typename Scalar>
LipschitzReport mlp_lipschitz(const Mlp<Scalar>& mlp, NormOrder p) {
  LipschitzReport rep;
  rep.p = p;
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    const double l = static_cast<double>(operator_norm(mlp.layers[i].weight, p));
    rep.per_layer.emplace_back("linear" + std::to_string(i), l);
    rep.product *= l;
    if (i + 1 < mlp.layers.size()) rep.per_layer.emplace_back("relu" + std::to_string(i), 1.0);
  }
  return rep;
}

/// Layerwise product bound for the main head V.
///
/// The input layer maps (c, context) to (c^T theta / n, context). Its
/// constant is the embedding bound when there is no context, and
/// max(embedding bound, 1) when raw context passes through alongside it.
template <typename Scalar>
LipschitzReport lipschitz_bound(const BasicValueNetwork<Scalar>& net, NormOrder p) {
  LipschitzReport rep;
  rep.p = p;
  rep.embedding_constant = static_cast<double>(embedding_lipschitz(net.embedding, p));
  const bool has_context = net.static_dim + net.dynamic_dim > 0;
  const double input = has_context ? std::max(rep.embedding_constant, 1.0) : rep.embedding_constant;
  rep.per_layer.emplace_back(has_context ? "embedding+context" : "embedding", input);
  rep.product = input;
  const LipschitzReport tail = mlp_lipschitz(net.main, p);
  rep.per_layer.insert(rep.per_layer.end(), tail.per_layer.begin(), tail.per_layer.end());
  rep.product *= tail.product;
  return rep;
}

}  // namespace cvnet
