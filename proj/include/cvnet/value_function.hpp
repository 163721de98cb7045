#pragma once

#include <optional>

#include <Eigen/Dense>

#include "cvnet/checkpoint.hpp"
#include "cvnet/spatial_index.hpp"

namespace cvnet {

/// Spatiotemporal state value used by the planner and the diagnostics.
/// Terminal time always evaluates to 0.
class StateValueFunction {
 public:
  virtual ~StateValueFunction() = default;
  virtual double value(const GeoPoint& l, ClockTime mu) const = 0;
};

enum class ValueHead { Main, Distilled };

/// Evaluates a trained network. The distilled head needs only the static
/// context; the main head additionally takes a raw dynamic context (scaled
/// with the checkpoint's statistics), defaulting to the training mean.
class NetworkValueFunction : public StateValueFunction {
 public:
  NetworkValueFunction(const Checkpoint& ckpt, ValueHead head,
                       Eigen::VectorXd static_context = {},
                       std::optional<Eigen::VectorXd> raw_dynamic_context = std::nullopt);

  double value(const GeoPoint& l, ClockTime mu) const override;

  const Checkpoint& checkpoint() const { return *ckpt_; }

 private:
  const Checkpoint* ckpt_;
  ValueHead head_;
  Eigen::VectorXd static_context_;
  Eigen::VectorXd scaled_dynamic_;
};

}  // namespace cvnet
