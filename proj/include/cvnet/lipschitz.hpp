#pragma once

// Operator norms of dense layers and the cerebellar-embedding bound, plus
// the subgradients used by the Lipschitz penalty.

#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

#include <Eigen/Dense>

namespace cvnet {

enum class NormOrder { L1, L2, LInf };

inline NormOrder parse_norm_order(std::string_view s) {
  if (s == "1" || s == "l1" || s == "L1") return NormOrder::L1;
  if (s == "2" || s == "l2" || s == "L2") return NormOrder::L2;
  if (s == "inf" || s == "linf" || s == "Linf" || s == "LInf") return NormOrder::LInf;
  throw std::invalid_argument("unsupported norm order: " + std::string(s));
}

inline std::string to_string(NormOrder p) {
  switch (p) {
    case NormOrder::L1: return "1";
    case NormOrder::L2: return "2";
    case NormOrder::LInf: return "inf";
  }
  return "?";
}

inline constexpr int kPowerIterations = 50;
inline constexpr double kPowerTolerance = 1e-6;

/// Largest singular value by power iteration on W^T W, with the unit
/// singular vectors. Start vector is all-ones, so the result is
/// deterministic.
template <typename Derived>
typename Derived::Scalar spectral_norm(
    const Eigen::MatrixBase<Derived>& w,
    Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1>* left = nullptr,
    Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1>* right = nullptr) {
  using Scalar = typename Derived::Scalar;
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  if (w.size() == 0) return Scalar(0);
  Vec v = Vec::Constant(w.cols(), Scalar(1) / std::sqrt(Scalar(w.cols())));
  Vec u = w * v;
  Scalar sigma = u.norm();
  for (int it = 0; it < kPowerIterations && sigma > Scalar(0); ++it) {
    Vec next = w.transpose() * u;
    const Scalar nn = next.norm();
    if (nn == Scalar(0)) break;
    v = next / nn;
    u = w * v;
    const Scalar s = u.norm();
    const bool done = std::abs(s - sigma) <= Scalar(kPowerTolerance) * std::max(s, Scalar(1));
    sigma = s;
    if (done) break;
  }
  if (left) *left = sigma > Scalar(0) ? Vec(u / sigma) : Vec::Zero(w.rows());
  if (right) *right = v;
  return sigma;
}

/// Operator norm induced by the vector p-norm: p=1 max abs column sum,
/// p=inf max abs row sum, p=2 spectral norm.
template <typename Derived>
typename Derived::Scalar operator_norm(const Eigen::MatrixBase<Derived>& w,
                                       NormOrder p) {
  using Scalar = typename Derived::Scalar;
  if (w.size() == 0) return Scalar(0);
  switch (p) {
    case NormOrder::L1: return w.cwiseAbs().colwise().sum().maxCoeff();
    case NormOrder::LInf: return w.cwiseAbs().rowwise().sum().maxCoeff();
    case NormOrder::L2: return spectral_norm(w);
  }
  throw std::invalid_argument("unsupported norm order");
}

template <typename Scalar>
Scalar sign_of(Scalar v) {
  return v > Scalar(0) ? Scalar(1) : (v < Scalar(0) ? Scalar(-1) : Scalar(0));
}

/// A subgradient of operator_norm(w, p) with respect to w. Ties for the
/// maximizing column/row go to the first index. For p=2 the singular vectors
/// are treated as constants (gradient u v^T).
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic>
operator_norm_subgradient(const Eigen::MatrixBase<Derived>& w, NormOrder p) {
  using Scalar = typename Derived::Scalar;
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  Mat g = Mat::Zero(w.rows(), w.cols());
  if (w.size() == 0) return g;
  Eigen::Index idx = 0;
  switch (p) {
    case NormOrder::L1:
      w.cwiseAbs().colwise().sum().maxCoeff(&idx);
      for (Eigen::Index r = 0; r < w.rows(); ++r) g(r, idx) = sign_of(w(r, idx));
      break;
    case NormOrder::LInf:
      w.cwiseAbs().rowwise().sum().maxCoeff(&idx);
      for (Eigen::Index c = 0; c < w.cols(); ++c) g(idx, c) = sign_of(w(idx, c));
      break;
    case NormOrder::L2: {
      Vec u, v;
      spectral_norm(w, &u, &v);
      g = u * v.transpose();
      break;
    }
  }
  return g;
}

/// Vector p-norm.
template <typename Derived>
typename Derived::Scalar vector_norm(const Eigen::MatrixBase<Derived>& x,
                                     NormOrder p) {
  using Scalar = typename Derived::Scalar;
  if (x.size() == 0) return Scalar(0);
  switch (p) {
    case NormOrder::L1: return x.template lpNorm<1>();
    case NormOrder::L2: return x.norm();
    case NormOrder::LInf: return x.template lpNorm<Eigen::Infinity>();
  }
  throw std::invalid_argument("unsupported norm order");
}

/// Bound on the output change of the cerebellar embedding c^T theta / n:
/// 2 * max_i ||theta_i||_p over rows theta_i. Also reports the arg-max row.
template <typename Derived>
typename Derived::Scalar embedding_lipschitz(const Eigen::MatrixBase<Derived>& theta,
                                             NormOrder p,
                                             Eigen::Index* argmax_row = nullptr) {
  using Scalar = typename Derived::Scalar;
  Scalar best = Scalar(0);
  Eigen::Index best_row = 0;
  for (Eigen::Index i = 0; i < theta.rows(); ++i) {
    const Scalar n = vector_norm(theta.row(i), p);
    if (n > best) {
      best = n;
      best_row = i;
    }
  }
  if (argmax_row) *argmax_row = best_row;
  return Scalar(2) * best;
}

/// Subgradient of 2 ||r||_p with respect to the row r.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> embedding_row_subgradient(
    const Eigen::MatrixBase<Derived>& r, NormOrder p) {
  using Scalar = typename Derived::Scalar;
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  Vec g = Vec::Zero(r.size());
  switch (p) {
    case NormOrder::L1:
      for (Eigen::Index c = 0; c < r.size(); ++c) g(c) = Scalar(2) * sign_of(r(c));
      break;
    case NormOrder::LInf: {
      if (r.size() == 0) break;
      Eigen::Index c = 0;
      r.cwiseAbs().maxCoeff(&c);
      g(c) = Scalar(2) * sign_of(r(c));
      break;
    }
    case NormOrder::L2: {
      const Scalar n = r.norm();
      if (n > Scalar(0)) g = Scalar(2) * r.transpose() / n;
      break;
    }
  }
  return g;
}

/// Subgradient of embedding_lipschitz restricted to its arg-max row.
template <typename Derived>
std::pair<Eigen::Index, Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1>>
embedding_lipschitz_subgradient(const Eigen::MatrixBase<Derived>& theta, NormOrder p) {
  using Scalar = typename Derived::Scalar;
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  Eigen::Index row = 0;
  embedding_lipschitz(theta, p, &row);
  if (theta.rows() == 0) return {row, Vec::Zero(theta.cols())};
  return {row, embedding_row_subgradient(theta.row(row), p)};
}

}  // namespace cvnet
