#include "cvnet/value_function.hpp"

#include "cvnet/value_network.hpp"

namespace cvnet {

NetworkValueFunction::NetworkValueFunction(const Checkpoint& ckpt, ValueHead head,
                                           Eigen::VectorXd static_context,
                                           std::optional<Eigen::VectorXd> raw_dynamic_context)
    : ckpt_(&ckpt), head_(head), static_context_(std::move(static_context)) {
  if (static_context_.size() == 0) static_context_ = Eigen::VectorXd::Zero(ckpt.net.static_dim);
  if (static_context_.size() != ckpt.net.static_dim) {
    throw ConfigError("static context width does not match checkpoint");
  }
  // Standardized context at the training mean is exactly zero.
  scaled_dynamic_ = raw_dynamic_context ? ckpt.scaling.apply(*raw_dynamic_context)
                                        : Eigen::VectorXd::Zero(ckpt.net.dynamic_dim);
  if (scaled_dynamic_.size() != ckpt.net.dynamic_dim) {
    throw ConfigError("dynamic context width does not match checkpoint");
  }
}

double NetworkValueFunction::value(const GeoPoint& l, ClockTime mu) const {
  if (mu.is_terminal()) return 0.0;
  StateFeatures f{activation_vector(l, mu, ckpt_->index), static_context_, std::nullopt};
  if (head_ == ValueHead::Distilled) return forward_distilled(f, ckpt_->net);
  f.dynamic_context = scaled_dynamic_;
  return forward_value(f, ckpt_->net);
}

}  // namespace cvnet
