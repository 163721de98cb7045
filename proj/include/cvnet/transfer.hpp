#pragma once

// Cross-city transfer.
//
// Finetuning copies the context-processing MLP blocks of a trained network
// into a fresh network for the target city; the location embedding is
// city-specific and always starts fresh.
//
// The progressive variants keep a frozen source column and train a target
// column whose layers i >= 1 also read the source's hidden activations
// through lateral matrices:
//
//   h_i = f(W_i h_{i-1} + b_i + U_i s_{i-1}),   f = ReLU, identity at the top
//
// For the correlated-feature variant the state feature vector
//   x = [ embedding(l, mu) | time features(mu) | context ]
// is split into adaptive indices (fed to the source column) and nonadaptive
// ones (fed to the target column). Laterals start at zero, so an untrained
// transfer model computes exactly what the target column alone computes.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "cvnet/checkpoint.hpp"
#include "cvnet/mlp.hpp"
#include "cvnet/policy_evaluation.hpp"
#include "cvnet/spatial_index.hpp"

namespace cvnet {

struct FeatureSplit {
  std::vector<int> adaptive;     // transferable: time features, context
  std::vector<int> nonadaptive;  // city-specific: the location embedding
  int width = 0;

  /// Throws ConfigError unless the two sets partition [0, width).
  void validate() const;
  /// [nonadaptive_width | adaptive_width] laid out contiguously.
  static FeatureSplit contiguous(int nonadaptive_width, int adaptive_width);

  friend bool operator==(const FeatureSplit&, const FeatureSplit&) = default;
};

void to_json(nlohmann::json& j, const FeatureSplit& s);
void from_json(const nlohmann::json& j, FeatureSplit& s);

// ------------------------------------------------------------ finetuning

/// Target-city network: MLP heads copied from `source` (when given), fresh
/// embedding sized for `target_index`. Without a source the result is a
/// plain fresh initialization of `shape`. A shape whose MLP widths differ
/// from the source's is a ConfigError.
ValueNetwork init_finetune(const Checkpoint* source, const IndexConfig& target_index,
                           std::uint64_t seed, const NetworkShape* shape = nullptr);

/// Freeze mask covering every copied block (all main layers).
FreezeMask freeze_all_copied(const ValueNetwork& net);

// ------------------------------------------------------------ progressive

template <typename Scalar>
struct ProgressiveParams {
  Mlp<Scalar> source;  // frozen; empty when there is no source column
  Mlp<Scalar> target;
  std::vector<MatrixX<Scalar>> laterals;  // [i] : target out_i x source out_{i-1}; [0] unused

  bool has_source() const { return !source.empty(); }

  /// Zero laterals sized for the two columns, which must have equal depth.
  static ProgressiveParams make(Mlp<Scalar> source, Mlp<Scalar> target) {
    ProgressiveParams p;
    p.source = std::move(source);
    p.target = std::move(target);
    p.laterals.resize(p.target.layers.size());
    if (!p.has_source()) return p;
    if (p.source.depth() != p.target.depth()) {
      throw ConfigError("progressive columns need equal depth");
    }
    for (std::size_t i = 1; i < p.target.layers.size(); ++i) {
      p.laterals[i] =
          MatrixX<Scalar>::Zero(p.target.layers[i].out(), p.source.layers[i - 1].out());
    }
    return p;
  }
};

template <typename Scalar>
struct ProgressiveTrace {
  typename Mlp<Scalar>::Trace source;
  std::vector<MatrixX<Scalar>> target;  // [0] = input, [i] = output of layer i
};

/// Batched forward on column inputs (source_in may have zero rows when there
/// is no source column).
template <typename Scalar>
RowVectorX<Scalar> progressive_forward(const ProgressiveParams<Scalar>& p,
                                       const MatrixX<Scalar>& source_in,
                                       const MatrixX<Scalar>& target_in,
                                       ProgressiveTrace<Scalar>* trace = nullptr) {
  ProgressiveTrace<Scalar> local;
  ProgressiveTrace<Scalar>& tr = trace ? *trace : local;
  const bool lateral = p.has_source();
  if (lateral) p.source.forward(source_in, &tr.source);
  if (target_in.rows() != p.target.input_width()) {
    throw ConfigError("target column input width mismatch");
  }
  tr.target.clear();
  tr.target.push_back(target_in);
  MatrixX<Scalar> a = target_in;
  for (std::size_t i = 0; i < p.target.layers.size(); ++i) {
    MatrixX<Scalar> z = p.target.layers[i].weight * a;
    z.colwise() += p.target.layers[i].bias;
    if (lateral && i > 0) z.noalias() += p.laterals[i] * tr.source.activations[i];
    if (i + 1 < p.target.layers.size()) z = z.cwiseMax(Scalar(0));
    a = std::move(z);
    tr.target.push_back(a);
  }
  return a.row(0);
}

template <typename Scalar>
Scalar progressive_forward(const ProgressiveParams<Scalar>& p, const VectorX<Scalar>& source_in,
                           const VectorX<Scalar>& target_in) {
  return progressive_forward<Scalar>(p, MatrixX<Scalar>(source_in), MatrixX<Scalar>(target_in))(0);
}

template <typename Scalar>
struct ProgressiveGradients {
  Mlp<Scalar> target;
  std::vector<MatrixX<Scalar>> laterals;
};

template <typename Scalar>
ProgressiveGradients<Scalar> zero_gradients(const ProgressiveParams<Scalar>& p) {
  ProgressiveGradients<Scalar> g;
  g.target = p.target.zeros_like();
  for (const auto& u : p.laterals) g.laterals.push_back(MatrixX<Scalar>::Zero(u.rows(), u.cols()));
  return g;
}

/// Accumulates d(sum_b dout_b * out_b) into target and lateral gradients and
/// returns the gradient with respect to the target input. The source column
/// is a constant of this function: nothing flows into it.
template <typename Scalar>
MatrixX<Scalar> progressive_backward(const ProgressiveParams<Scalar>& p,
                                     const ProgressiveTrace<Scalar>& tr,
                                     const RowVectorX<Scalar>& dout,
                                     ProgressiveGradients<Scalar>& g) {
  MatrixX<Scalar> delta = dout;
  for (std::size_t k = p.target.layers.size(); k-- > 0;) {
    if (k + 1 < p.target.layers.size()) {
      delta = delta.cwiseProduct(
          (tr.target[k + 1].array() > Scalar(0)).template cast<Scalar>().matrix());
    }
    g.target.layers[k].weight.noalias() += delta * tr.target[k].transpose();
    g.target.layers[k].bias += delta.rowwise().sum();
    if (p.has_source() && k > 0) {
      g.laterals[k].noalias() += delta * tr.source.activations[k].transpose();
    }
    delta = p.target.layers[k].weight.transpose() * delta;
  }
  return delta;
}

// ------------------------------------------------------------ CFPT model

/// Periodic encoding of the time of day: three harmonics and the linear
/// fraction of the day.
inline constexpr int kTimeFeatureDim = 7;
Eigen::VectorXd time_features(ClockTime mu);

struct TransferSample {
  GeoPoint location;
  ClockTime time;
  Eigen::VectorXd context;
  double target = 0.0;  // regression target (a return sample)
};

struct TransferNetwork {
  IndexConfig index;                  // target city tiling
  RowMajorMatrixX<double> embedding;  // A x m, city-specific
  int context_dim = 0;
  FeatureSplit split;
  bool additive_raw = false;       // target column also reads raw adaptive features
  std::vector<int> source_inputs;  // feature indices into the source column
  std::vector<int> target_inputs;  // feature indices into the target column
  ProgressiveParams<double> columns;

  int embedding_dim() const { return static_cast<int>(embedding.cols()); }
  int feature_width() const { return embedding_dim() + kTimeFeatureDim + context_dim; }

  /// x = [embedding | time features | context].
  Eigen::VectorXd features(const GeoPoint& l, ClockTime mu, const Eigen::VectorXd& ctx) const;
  double value(const GeoPoint& l, ClockTime mu, const Eigen::VectorXd& ctx) const;
};

/// Split placing the embedding in the nonadaptive group and time features
/// plus context in the adaptive group.
FeatureSplit default_transfer_split(int embedding_dim, int context_dim);

struct TransferModelConfig {
  int embedding_dim = 16;
  std::vector<int> hidden{32, 32};
  int context_dim = 3;
  bool additive_raw = false;
  std::uint64_t seed = 0;
};

/// Target-city model. With `source` the frozen column reads the split's
/// adaptive features (no source column when that set is empty); without it
/// the result is the no-transfer baseline. The target column and embedding
/// are drawn from `cfg.seed` identically in both cases.
TransferNetwork make_transfer_network(const IndexConfig& target_index, const FeatureSplit& split,
                                      const TransferModelConfig& cfg,
                                      const Mlp<double>* source = nullptr);

/// Source-city model whose single column reads only the adaptive features.
/// Its trained column is what make_transfer_network expects as `source`.
TransferNetwork make_source_network(const IndexConfig& source_index, const FeatureSplit& split,
                                    const TransferModelConfig& cfg);

struct TransferTrainConfig {
  std::int64_t steps = 2000;
  int batch_size = 32;
  double learning_rate = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
  bool train_embedding = true;
  int eval_interval = 50;
  std::uint64_t seed = 0;
};

struct TransferCurvePoint {
  std::int64_t step = 0;
  double eval_loss = 0.0;  // mean squared error on the evaluation set
};

/// Minibatch Adam on 1/2 (V - y)^2 over the target column, the laterals and
/// (optionally) the embedding. The source column is never written.
class TransferTrainer {
 public:
  TransferTrainer(TransferNetwork& net, std::span<const TransferSample> train,
                  TransferTrainConfig cfg);

  /// One minibatch step; returns the batch data loss.
  double step();
  std::int64_t steps() const { return t_; }

 private:
  struct Prepared {
    ActivationVector activation;
    Eigen::VectorXd rest;  // time features and context
    double target;
  };
  TransferNetwork& net_;
  TransferTrainConfig cfg_;
  std::vector<Prepared> data_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::int64_t t_ = 0;
  Mlp<double> m_t_, v_t_;
  std::vector<MatrixX<double>> m_u_, v_u_;
  RowMajorMatrixX<double> m_e_, v_e_;
};

double transfer_eval_loss(const TransferNetwork& net, std::span<const TransferSample> eval);

/// Trains and records the evaluation loss every eval_interval steps
/// (including step 0 and the last step).
std::vector<TransferCurvePoint> train_transfer(TransferNetwork& net,
                                               std::span<const TransferSample> train,
                                               std::span<const TransferSample> eval,
                                               const TransferTrainConfig& cfg);

/// First recorded step whose evaluation loss is <= `loss`, if any.
std::optional<std::int64_t> steps_to_reach(const std::vector<TransferCurvePoint>& curve,
                                           double loss);

// ------------------------------------------------------------ synthetic cities

/// A city whose true value is V*(l, t, c) = f(t, c) + g_city(l): the
/// temporal/context part f is shared by all cities, the spatial part g is a
/// city-specific sum of Gaussian bumps.
struct SyntheticCity {
  double size = 10000.0;
  std::vector<GeoPoint> bump_centers;
  std::vector<double> bump_heights;
  std::vector<double> bump_widths;

  static SyntheticCity generate(std::uint64_t seed, int bumps = 6, double size = 10000.0);

  static double shared_part(ClockTime mu, const Eigen::VectorXd& ctx);
  double spatial_part(const GeoPoint& l) const;
  double true_value(const GeoPoint& l, ClockTime mu, const Eigen::VectorXd& ctx) const {
    return shared_part(mu, ctx) + spatial_part(l);
  }

  /// n samples with uniform location and time, standard normal context, and
  /// target V* + N(0, noise^2). noise = 0 gives exact values.
  std::vector<TransferSample> samples(std::size_t n, std::uint64_t seed, double noise,
                                      int context_dim = 3) const;
};

// ------------------------------------------------------------ checkpoints

struct TransferCheckpoint {
  TransferNetwork net;
  std::string source_hash;  // content hash of the source checkpoint, "" if none
  nlohmann::json metadata = nlohmann::json::object();
};

std::string save_transfer_checkpoint(const TransferCheckpoint& ckpt);
TransferCheckpoint load_transfer_checkpoint(const std::string& bytes);
/// FNV-1a-64 of the serialized transfer checkpoint, hex encoded.
std::string transfer_content_hash(const TransferCheckpoint& ckpt);

}  // namespace cvnet
