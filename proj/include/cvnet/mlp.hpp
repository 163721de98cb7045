#pragma once

// Fully connected ReLU network with a linear scalar output, evaluated on
// column batches. Hidden layers use ReLU; the last layer is linear.

#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "cvnet/common.hpp"

namespace cvnet {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
template <typename Scalar>
using RowMajorMatrixX =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
struct DenseLayer {
  MatrixX<Scalar> weight;  // out x in
  VectorX<Scalar> bias;    // out

  int in() const { return static_cast<int>(weight.cols()); }
  int out() const { return static_cast<int>(weight.rows()); }
};

template <typename Scalar>
class Mlp {
 public:
  std::vector<DenseLayer<Scalar>> layers;

  Mlp() = default;

  /// Zero network with the given widths, e.g. {in, 32, 128, 32, 1}.
  explicit Mlp(const std::vector<int>& widths) {
    if (widths.size() < 2) throw ConfigError("Mlp needs at least two widths");
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      if (widths[i] < 0 || widths[i + 1] <= 0) throw ConfigError("Mlp widths must be positive");
      layers.push_back({MatrixX<Scalar>::Zero(widths[i + 1], widths[i]),
                        VectorX<Scalar>::Zero(widths[i + 1])});
    }
  }

  bool empty() const { return layers.empty(); }
  int input_width() const { return layers.empty() ? 0 : layers.front().in(); }
  int depth() const { return static_cast<int>(layers.size()); }

  std::vector<int> widths() const {
    std::vector<int> w;
    if (layers.empty()) return w;
    w.push_back(layers.front().in());
    for (const auto& l : layers) w.push_back(l.out());
    return w;
  }

  Mlp zeros_like() const {
    Mlp z;
    for (const auto& l : layers) {
      z.layers.push_back({MatrixX<Scalar>::Zero(l.weight.rows(), l.weight.cols()),
                          VectorX<Scalar>::Zero(l.bias.size())});
    }
    return z;
  }

  /// He-uniform weights, zero biases.
  template <typename Rng>
  void he_uniform_init(Rng& rng) {
    for (auto& l : layers) {
      const double bound = std::sqrt(6.0 / std::max(1, l.in()));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c)
        for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
          l.weight(r, c) = static_cast<Scalar>(dist(rng));
      l.bias.setZero();
    }
  }

  struct Trace {
    std::vector<MatrixX<Scalar>> activations;  // [0] = input, [i] = output of layer i
  };

  /// Outputs for a batch of column inputs (in x B).
  RowVectorX<Scalar> forward(const MatrixX<Scalar>& inputs, Trace* trace = nullptr) const {
    check_input(inputs.rows());
    MatrixX<Scalar> a = inputs;
    if (trace) {
      trace->activations.clear();
      trace->activations.push_back(a);
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
      MatrixX<Scalar> z = layers[i].weight * a;
      z.colwise() += layers[i].bias;
      if (i + 1 < layers.size()) z = z.cwiseMax(Scalar(0));
      a = std::move(z);
      if (trace) trace->activations.push_back(a);
    }
    return a.row(0);
  }

  Scalar forward_one(const VectorX<Scalar>& input) const {
    check_input(input.size());
    VectorX<Scalar> a = input;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      VectorX<Scalar> z = layers[i].weight * a + layers[i].bias;
      if (i + 1 < layers.size()) z = z.cwiseMax(Scalar(0));
      a = std::move(z);
    }
    return a(0);
  }

  /// Accumulates d(sum_b dout_b * out_b)/d(params) into `grads` and returns
  /// the gradient with respect to the inputs (in x B).
  MatrixX<Scalar> backward(const Trace& trace, const RowVectorX<Scalar>& dout,
                           Mlp& grads) const {
    MatrixX<Scalar> delta = dout;  // 1 x B
    for (std::size_t k = layers.size(); k-- > 0;) {
      if (k + 1 < layers.size()) {
        // ReLU derivative; zero at the kink.
        delta = delta.cwiseProduct(
            (trace.activations[k + 1].array() > Scalar(0)).template cast<Scalar>().matrix());
      }
      grads.layers[k].weight.noalias() += delta * trace.activations[k].transpose();
      grads.layers[k].bias += delta.rowwise().sum();
      delta = layers[k].weight.transpose() * delta;
    }
    return delta;
  }

  Mlp& operator+=(const Mlp& other) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      layers[i].weight += other.layers[i].weight;
      layers[i].bias += other.layers[i].bias;
    }
    return *this;
  }

  Mlp& operator*=(Scalar s) {
    for (auto& l : layers) {
      l.weight *= s;
      l.bias *= s;
    }
    return *this;
  }

  Scalar squared_norm() const {
    Scalar s = 0;
    for (const auto& l : layers) s += l.weight.squaredNorm() + l.bias.squaredNorm();
    return s;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

  friend bool operator==(const Mlp& a, const Mlp& b) {
    if (a.layers.size() != b.layers.size()) return false;
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
      const auto& x = a.layers[i];
      const auto& y = b.layers[i];
      if (x.weight.rows() != y.weight.rows() || x.weight.cols() != y.weight.cols()) return false;
      if (x.weight != y.weight || x.bias != y.bias) return false;
    }
    return true;
  }

 private:
  void check_input(Eigen::Index rows) const {
    if (layers.empty()) throw ConfigError("Mlp has no layers");
    if (rows != layers.front().weight.cols()) {
      throw ConfigError("Mlp input width mismatch: got " + std::to_string(rows) +
                        ", expected " + std::to_string(layers.front().weight.cols()));
    }
  }
};

}  // namespace cvnet
