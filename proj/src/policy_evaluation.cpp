#include "cvnet/policy_evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <tuple>

#include "cvnet/config_json.hpp"

namespace cvnet {

double discounted_option_reward(double reward, int k, double gamma) {
  if (k < 1) throw std::invalid_argument("option duration must be >= 1");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must be in (0, 1]");
  if (gamma == 1.0 || k == 1) return reward;
  // expm1/log1p keep the ratio accurate when gamma is close to 1.
  const double num = std::expm1(k * std::log(gamma));
  return reward * num / (k * (gamma - 1.0));
}

double td_target(double reward, int k, double gamma, double v_next, bool terminal) {
  const double r = discounted_option_reward(reward, k, gamma);
  return terminal ? r : r + std::pow(gamma, k) * v_next;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (!(gamma > 0.0 && gamma < 1.0)) fail("gamma must be in (0, 1) for training");
  if (!(lambda >= 0.0)) fail("lambda must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (max_epochs < 0) fail("max_epochs must be >= 0");
  if (max_steps && *max_steps < 0) fail("max_steps must be >= 0");
  if (target_sync_interval < 1) fail("target_sync_interval must be >= 1");
  if (!(learning_rate > 0.0)) fail("learning_rate must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas in [0, 1)");
  if (!(epsilon > 0.0)) fail("epsilon must be > 0");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) fail("lr_decay must be in (0, 1]");
  if (rg_seconds < 0) fail("rg_seconds must be >= 0");
  if (!(grad_clip_norm >= 0.0)) fail("grad_clip_norm must be >= 0");
  if (!(divergence_ceiling > 0.0)) fail("divergence_ceiling must be > 0");
  if (log_interval < 1) fail("log_interval must be >= 1");
  if (checkpoint_interval < 0) fail("checkpoint_interval must be >= 0");
  if (distill_max_epochs < 1) fail("distill_max_epochs must be >= 1");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"gamma", c.gamma},
       {"lambda", c.lambda},
       {"norm", to_string(c.norm)},
       {"batch_size", c.batch_size},
       {"max_epochs", c.max_epochs},
       {"max_steps", c.max_steps ? nlohmann::json(*c.max_steps) : nlohmann::json(nullptr)},
       {"target_sync_interval", c.target_sync_interval},
       {"learning_rate", c.learning_rate},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"epsilon", c.epsilon},
       {"lr_decay", c.lr_decay},
       {"rg_seconds", c.rg_seconds},
       {"seed", c.seed},
       {"grad_clip_norm", c.grad_clip_norm},
       {"divergence_ceiling", c.divergence_ceiling},
       {"log_interval", c.log_interval},
       {"checkpoint_interval", c.checkpoint_interval},
       {"distill", c.distill},
       {"distill_max_epochs", c.distill_max_epochs}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  constexpr std::string_view ctx = "train";
  reject_unknown_keys(j,
                      {"gamma", "lambda", "norm", "batch_size", "max_epochs", "max_steps",
                       "target_sync_interval", "learning_rate", "beta1", "beta2", "epsilon",
                       "lr_decay", "rg_seconds", "seed", "grad_clip_norm", "divergence_ceiling",
                       "log_interval", "checkpoint_interval", "distill", "distill_max_epochs"},
                      ctx);
  read_optional(j, "gamma", c.gamma, ctx);
  read_optional(j, "lambda", c.lambda, ctx);
  if (j.contains("norm")) {
    const auto& n = j.at("norm");
    try {
      c.norm = n.is_number() ? parse_norm_order(std::to_string(n.get<int>()))
                             : parse_norm_order(n.get<std::string>());
    } catch (const std::exception& e) {
      throw ConfigError(std::string("train.norm: ") + e.what());
    }
  }
  read_optional(j, "batch_size", c.batch_size, ctx);
  read_optional(j, "max_epochs", c.max_epochs, ctx);
  if (j.contains("max_steps") && !j.at("max_steps").is_null()) {
    std::int64_t s = 0;
    read_optional(j, "max_steps", s, ctx);
    c.max_steps = s;
  }
  read_optional(j, "target_sync_interval", c.target_sync_interval, ctx);
  read_optional(j, "learning_rate", c.learning_rate, ctx);
  read_optional(j, "beta1", c.beta1, ctx);
  read_optional(j, "beta2", c.beta2, ctx);
  read_optional(j, "epsilon", c.epsilon, ctx);
  read_optional(j, "lr_decay", c.lr_decay, ctx);
  read_optional(j, "rg_seconds", c.rg_seconds, ctx);
  read_optional(j, "seed", c.seed, ctx);
  read_optional(j, "grad_clip_norm", c.grad_clip_norm, ctx);
  read_optional(j, "divergence_ceiling", c.divergence_ceiling, ctx);
  read_optional(j, "log_interval", c.log_interval, ctx);
  read_optional(j, "checkpoint_interval", c.checkpoint_interval, ctx);
  read_optional(j, "distill", c.distill, ctx);
  read_optional(j, "distill_max_epochs", c.distill_max_epochs, ctx);
  c.validate();
}

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void write_training_log_csv(std::ostream& out, std::span<const TrainingLogRecord> log,
                            bool include_wall_time) {
  out << "step,data_loss,penalty,lipschitz_bound,mean_v";
  if (include_wall_time) out << ",wall_ms";
  out << '\n';
  for (const auto& r : log) {
    out << r.step << ',' << fmt_double(r.data_loss) << ',' << fmt_double(r.penalty) << ','
        << fmt_double(r.lipschitz_bound) << ',' << fmt_double(r.mean_v);
    if (include_wall_time) out << ',' << fmt_double(r.wall_ms);
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Adam

void Adam::init(const ValueNetwork& net, const Mlp<double>& mlp) {
  t = 0;
  m_emb = RowMajorMatrixX<double>::Zero(net.embedding.rows(), net.embedding.cols());
  v_emb = m_emb;
  m_mlp = mlp.zeros_like();
  v_mlp = mlp.zeros_like();
}

namespace {

template <typename P, typename G, typename M>
void adam_update(P&& param, const G& grad, M& m, M& v, double b1, double b2, double step,
                 double eps) {
  m = b1 * m + (1.0 - b1) * grad;
  v = b2 * v + (1.0 - b2) * grad.cwiseProduct(grad);
  param.array() -= step * m.array() / (v.array().sqrt() + eps);
}

}  // namespace

void Adam::step_mlp(Mlp<double>& params, const Mlp<double>& grads, const FreezeMask* freeze) {
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  // Bias-corrected step: lr * sqrt(c2) / c1 applied to m / (sqrt(v) + eps').
  const double step = learning_rate * std::sqrt(c2) / c1;
  const double eps = epsilon * std::sqrt(c2);
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    if (freeze && i < freeze->main_layers.size() && freeze->main_layers[i]) continue;
    adam_update(params.layers[i].weight, grads.layers[i].weight, m_mlp.layers[i].weight,
                v_mlp.layers[i].weight, beta1, beta2, step, eps);
    adam_update(params.layers[i].bias, grads.layers[i].bias, m_mlp.layers[i].bias,
                v_mlp.layers[i].bias, beta1, beta2, step, eps);
  }
}

void Adam::step_embedding(RowMajorMatrixX<double>& theta,
                          const std::map<std::int64_t, Eigen::VectorXd>& rows) {
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  const double step = learning_rate * std::sqrt(c2) / c1;
  const double eps = epsilon * std::sqrt(c2);
  for (const auto& [r, g] : rows) {
    auto m = m_emb.row(r);
    auto v = v_emb.row(r);
    m = beta1 * m + (1.0 - beta1) * g.transpose();
    v = beta2 * v + (1.0 - beta2) * g.transpose().cwiseProduct(g.transpose());
    theta.row(r).array() -= step * m.array() / (v.array().sqrt() + eps);
  }
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(TrainConfig config, NetworkShape shape, IndexConfig index,
                 std::span<const TransitionTuple> transitions, const FeatureStore* store)
    : cfg_(std::move(config)), shape_(std::move(shape)), index_(std::move(index)) {
  cfg_.validate();
  index_.validate();
  if (transitions.empty()) throw DataError("no transitions to train on");
  if (shape_.memory_size != index_.memory_size) {
    throw ConfigError("network memory size differs from the index memory size");
  }
  if (store) {
    if (!(store->index() == index_)) throw ConfigError("feature store IndexConfig mismatch");
    if (store->dimension() != shape_.dynamic_dim) {
      throw ConfigError("feature store width does not match dynamic_dim");
    }
  }

  std::vector<Eigen::VectorXd> raw_samples;
  data_.reserve(transitions.size());
  for (const auto& t : transitions) {
    PreparedTransition p;
    p.origin = activation_vector(t.origin, t.origin_time, index_);
    p.destination = activation_vector(t.destination, t.destination_time, index_);
    if (t.static_context.size() == 0) {
      p.static_context = Eigen::VectorXd::Zero(shape_.static_dim);
    } else if (t.static_context.size() == shape_.static_dim) {
      p.static_context = t.static_context;
    } else {
      throw ConfigError("transition static context width does not match static_dim");
    }
    if (store && shape_.dynamic_dim > 0) {
      for (auto& s : store->range_query(t.origin, t.origin_time, cfg_.rg_seconds)) {
        p.origin_contexts.push_back(std::move(s.values));
      }
      if (!t.is_terminal) {
        for (auto& s : store->range_query(t.destination, t.destination_time, cfg_.rg_seconds)) {
          p.destination_contexts.push_back(std::move(s.values));
        }
      }
      p.origin_fallback = store->cell_mean(t.origin);
      p.destination_fallback = store->cell_mean(t.destination);
      raw_samples.insert(raw_samples.end(), p.origin_contexts.begin(), p.origin_contexts.end());
    } else {
      p.origin_fallback = Eigen::VectorXd::Zero(shape_.dynamic_dim);
      p.destination_fallback = p.origin_fallback;
    }
    p.reward = t.reward;
    p.k = t.duration_steps;
    if (p.k < 1) throw DataError("transition with duration < 1");
    p.terminal = t.is_terminal;
    data_.push_back(std::move(p));
  }

  scaling_ = raw_samples.empty() ? ContextScaling::identity(shape_.dynamic_dim)
                                 : ContextScaling::fit(raw_samples, shape_.dynamic_dim);
  if (store && shape_.dynamic_dim > 0) {
    for (auto& p : data_) {
      for (auto& c : p.origin_contexts) c = scaling_.apply(c);
      for (auto& c : p.destination_contexts) c = scaling_.apply(c);
      p.origin_fallback = scaling_.apply(p.origin_fallback);
      p.destination_fallback = scaling_.apply(p.destination_fallback);
    }
  }

  std::mt19937_64 init_rng(substream_seed(cfg_.seed, "init"));
  net_ = ValueNetwork::initialized(shape_, init_rng);
  target_ = net_;
  shuffle_rng_.seed(substream_seed(cfg_.seed, "shuffle"));
  context_stream_ = substream_seed(cfg_.seed, "context");
  distill_stream_ = substream_seed(cfg_.seed, "distill");
  adam_.learning_rate = cfg_.learning_rate;
  adam_.beta1 = cfg_.beta1;
  adam_.beta2 = cfg_.beta2;
  adam_.epsilon = cfg_.epsilon;
  adam_.init(net_, net_.main);
  row_norms_.rebuild(net_.embedding, cfg_.norm);
  order_.resize(data_.size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  cursor_ = order_.size();
  total_steps_ = cfg_.max_steps ? *cfg_.max_steps : cfg_.max_epochs * steps_per_epoch();
  lr_ = cfg_.learning_rate;
  start_ = std::chrono::steady_clock::now();
}

std::int64_t Trainer::steps_per_epoch() const {
  const auto n = static_cast<std::int64_t>(data_.size());
  return (n + cfg_.batch_size - 1) / cfg_.batch_size;
}

void Trainer::set_network(const ValueNetwork& net) {
  const NetworkShape s = net.shape();
  if (s.memory_size != shape_.memory_size || s.embedding_dim != shape_.embedding_dim ||
      s.hidden != shape_.hidden || s.static_dim != shape_.static_dim ||
      s.dynamic_dim != shape_.dynamic_dim) {
    throw ConfigError("replacement network has a different shape");
  }
  net_ = net;
  target_ = net;
  adam_.init(net_, net_.main);
  row_norms_.rebuild(net_.embedding, cfg_.norm);
}

StateFeatures Trainer::features(const PreparedTransition& t, bool destination, double u,
                                bool* missing) const {
  const auto& options = destination ? t.destination_contexts : t.origin_contexts;
  StateFeatures f;
  f.activation = destination ? t.destination : t.origin;
  f.static_context = t.static_context;
  if (options.empty()) {
    if (missing) *missing = shape_.dynamic_dim > 0;
    f.dynamic_context = destination ? t.destination_fallback : t.origin_fallback;
  } else {
    if (missing) *missing = false;
    const auto i = std::min(options.size() - 1, static_cast<std::size_t>(u * options.size()));
    f.dynamic_context = options[i];
  }
  return f;
}

void Trainer::reshuffle() {
  std::shuffle(order_.begin(), order_.end(), shuffle_rng_);
  cursor_ = 0;
  ++stats_.epochs;
}

bool Trainer::step() {
  if (step_ >= total_steps_) return false;
  if (cursor_ >= order_.size()) reshuffle();
  const std::size_t end = std::min(order_.size(), cursor_ + static_cast<std::size_t>(cfg_.batch_size));
  const std::size_t B = end - cursor_;

  std::vector<LabeledState> batch;
  batch.reserve(B);
  std::vector<std::size_t> bootstrap;  // batch slots whose successor is non-terminal
  std::vector<StateFeatures> successors;
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t idx = order_[cursor_ + b];
    const PreparedTransition& t = data_[idx];
    bool miss_o = false, miss_d = false;
    const auto s = static_cast<std::uint64_t>(step_);
    batch.push_back({features(t, false, keyed_uniform(context_stream_, s, 2 * idx), &miss_o),
                     discounted_option_reward(t.reward, t.k, cfg_.gamma)});
    if (!t.terminal) {
      successors.push_back(features(t, true, keyed_uniform(context_stream_, s, 2 * idx + 1), &miss_d));
      bootstrap.push_back(b);
    }
    stats_.missing_context_draws += static_cast<int>(miss_o) + static_cast<int>(miss_d);
  }
  if (!successors.empty()) {
    MatrixX<double> inputs(target_.main.input_width(), static_cast<Eigen::Index>(successors.size()));
    for (std::size_t i = 0; i < successors.size(); ++i) {
      inputs.col(static_cast<Eigen::Index>(i)) = main_input(successors[i], target_);
    }
    const RowVectorX<double> v_next = target_.main.forward(inputs);
    for (std::size_t i = 0; i < successors.size(); ++i) {
      const PreparedTransition& t = data_[order_[cursor_ + bootstrap[i]]];
      batch[bootstrap[i]].target += std::pow(cfg_.gamma, t.k) * v_next(static_cast<Eigen::Index>(i));
    }
  }

  auto res = backward<double>(batch, net_, cfg_.lambda, cfg_.norm, &row_norms_);
  if (!std::isfinite(res.loss) || std::abs(res.mean_value) > cfg_.divergence_ceiling) {
    throw DivergenceError("training diverged at step " + std::to_string(step_ + 1) +
                          ": mean V = " + fmt_double(res.mean_value) +
                          ", loss = " + fmt_double(res.loss));
  }
  if (cfg_.grad_clip_norm > 0.0) {
    const double norm = std::sqrt(res.gradients.squared_norm());
    if (norm > cfg_.grad_clip_norm) res.gradients.scale(cfg_.grad_clip_norm / norm);
  }

  adam_.learning_rate = lr_;
  adam_.tick();
  if (!freeze_.embedding) {
    adam_.step_embedding(net_.embedding, res.gradients.embedding_rows);
    for (const auto& [row, g] : res.gradients.embedding_rows) row_norms_.update(net_.embedding, row);
  }
  adam_.step_mlp(net_.main, res.gradients.main, &freeze_);
  lr_ *= cfg_.lr_decay;

  ++step_;
  ++stats_.steps;
  cursor_ = end;
  if (step_ % cfg_.target_sync_interval == 0) {
    target_.embedding = net_.embedding;
    target_.main = net_.main;
    ++stats_.target_syncs;
  }

  if (step_ == 1 || step_ % cfg_.log_interval == 0 || step_ == total_steps_) {
    TrainingLogRecord r;
    r.step = step_;
    r.data_loss = res.data_loss;
    r.penalty = res.penalty;
    r.lipschitz_bound = lipschitz_bound(net_, cfg_.norm).product;
    r.mean_v = res.mean_value;
    r.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_)
                    .count();
    log_.push_back(r);
  }
  maybe_checkpoint(cursor_ >= order_.size());
  if (on_step) on_step(step_, net_, target_);
  return true;
}

void Trainer::maybe_checkpoint(bool end_of_epoch) {
  if (!cfg_.distill) return;
  const bool due = cfg_.checkpoint_interval > 0 ? step_ % cfg_.checkpoint_interval == 0
                                                : end_of_epoch;
  if (!due || step_ == last_checkpoint_step_) return;
  const int epochs = std::max<std::int64_t>(1, cfg_.distill_max_epochs - checkpoints_done_);
  stats_.distill_mse.push_back(run_distillation(epochs));
  ++checkpoints_done_;
  last_checkpoint_step_ = step_;
}

double Trainer::run_distillation(int epochs) {
  std::vector<StateFeatures> set;
  set.reserve(data_.size());
  const auto round = static_cast<std::uint64_t>(checkpoints_done_);
  for (std::size_t i = 0; i < data_.size(); ++i) {
    set.push_back(features(data_[i], false, keyed_uniform(distill_stream_, round, i)));
  }
  DistillConfig dc;
  dc.epochs = epochs;
  dc.batch_size = cfg_.batch_size;
  dc.learning_rate = cfg_.learning_rate;
  dc.seed = mix64(distill_stream_ ^ round);
  return distill(net_, set, dc);
}

TrainResult Trainer::run() {
  start_ = std::chrono::steady_clock::now();
  while (step()) {
  }
  if (cfg_.distill && step_ > last_checkpoint_step_) {
    stats_.distill_mse.push_back(run_distillation(1));
    ++checkpoints_done_;
    last_checkpoint_step_ = step_;
  }
  return {checkpoint(), log_, stats_};
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.net = net_;
  c.index = index_;
  c.scaling = scaling_;
  c.gamma = cfg_.gamma;
  c.lambda = cfg_.lambda;
  c.norm = cfg_.norm;
  c.metadata = {{"train_config", cfg_},
                {"steps", step_},
                {"epochs", stats_.epochs},
                {"target_syncs", stats_.target_syncs},
                {"missing_context_draws", stats_.missing_context_draws},
                {"transitions", data_.size()}};
  return c;
}

TrainResult train(const TrainConfig& config, const NetworkShape& shape, const IndexConfig& index,
                  std::span<const TransitionTuple> transitions, const FeatureStore* store) {
  Trainer t(config, shape, index, transitions, store);
  return t.run();
}

// ---------------------------------------------------------------------------
// Distillation

double distillation_mse(const ValueNetwork& net, std::span<const StateFeatures> transfer_set) {
  if (transfer_set.empty()) return 0.0;
  double s = 0.0;
  for (const auto& f : transfer_set) {
    const double d = forward_distilled(f, net) - forward_value(f, net);
    s += d * d;
  }
  return s / static_cast<double>(transfer_set.size());
}

void warm_start_distilled(ValueNetwork& net, const Eigen::VectorXd& dynamic_mean) {
  if (dynamic_mean.size() != net.dynamic_dim) throw ConfigError("dynamic mean width mismatch");
  const Eigen::Index keep = net.embedding_dim() + net.static_dim;
  Mlp<double> d = net.main;
  auto& first = d.layers.front();
  first.bias += first.weight.rightCols(net.dynamic_dim) * dynamic_mean;
  first.weight = MatrixX<double>(first.weight.leftCols(keep));
  net.distilled = std::move(d);
}

double distill(ValueNetwork& net, std::span<const StateFeatures> transfer_set,
               const DistillConfig& config) {
  if (config.epochs < 0 || config.batch_size < 1 || !(config.learning_rate > 0.0)) {
    throw ConfigError("invalid distillation config");
  }
  const auto n = static_cast<Eigen::Index>(transfer_set.size());
  if (n == 0) return 0.0;
  if (config.warm_start) {
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(net.dynamic_dim);
    for (const auto& f : transfer_set) {
      if (!f.dynamic_context) throw std::invalid_argument("transfer set needs full context");
      mean += *f.dynamic_context;
    }
    warm_start_distilled(net, mean / static_cast<double>(n));
  }
  MatrixX<double> x(net.distilled.input_width(), n);
  RowVectorX<double> y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& f = transfer_set[static_cast<std::size_t>(i)];
    x.col(i) = distilled_input(f, net);
    y(i) = forward_value(f, net);
  }
  auto mse = [&] {
    const RowVectorX<double> out = net.distilled.forward(x);
    return (out - y).squaredNorm() / static_cast<double>(n);
  };
  // Keep the best head seen; Adam can drift away from an exact fit.
  double best = mse();
  Mlp<double> best_head = net.distilled;
  if (config.epochs > 0) {
    Adam adam;
    adam.learning_rate = config.learning_rate;
    adam.m_mlp = net.distilled.zeros_like();
    adam.v_mlp = net.distilled.zeros_like();
    std::mt19937_64 rng(config.seed);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    double lr = config.learning_rate;
    Mlp<double>::Trace trace;
    for (int e = 0; e < config.epochs; ++e) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t start = 0; start < order.size();
           start += static_cast<std::size_t>(config.batch_size)) {
        const std::size_t stop =
            std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
        const auto B = static_cast<Eigen::Index>(stop - start);
        MatrixX<double> xb(x.rows(), B);
        RowVectorX<double> yb(B);
        for (Eigen::Index b = 0; b < B; ++b) {
          xb.col(b) = x.col(order[start + static_cast<std::size_t>(b)]);
          yb(b) = y(order[start + static_cast<std::size_t>(b)]);
        }
        const RowVectorX<double> out = net.distilled.forward(xb, &trace);
        Mlp<double> g = net.distilled.zeros_like();
        net.distilled.backward(trace, (out - yb) / static_cast<double>(B), g);
        adam.learning_rate = lr;
        adam.tick();
        adam.step_mlp(net.distilled, g);
        lr *= config.lr_decay;
      }
      if (const double e_mse = mse(); e_mse < best) {
        best = e_mse;
        best_head = net.distilled;
      }
    }
  }
  net.distilled = std::move(best_head);
  return best;
}

// ---------------------------------------------------------------------------
// Tabular baseline

std::size_t TabularGrid::KeyHash::operator()(const Key& k) const noexcept {
  std::uint64_t h = mix64(static_cast<std::uint64_t>(static_cast<std::uint32_t>(k.q)));
  h = mix64(h ^ static_cast<std::uint64_t>(static_cast<std::uint32_t>(k.r)));
  return static_cast<std::size_t>(mix64(h ^ static_cast<std::uint64_t>(k.bucket)));
}

TabularGrid::Key TabularGrid::key(const GeoPoint& l, ClockTime mu) const {
  const HexCoord c = layer_cell(layer, l);
  return {c.q, c.r, time_bucket(layer, mu)};
}

double TabularValue::at(const TabularGrid::Key& k) const {
  const auto it = values_.find(k);
  return it == values_.end() ? 0.0 : it->second;
}

double TabularValue::value(const GeoPoint& l, ClockTime mu) const {
  if (mu.is_terminal()) return 0.0;
  return at(grid_.key(l, mu));
}

void TabularValue::write_csv(std::ostream& out) const {
  const TilingLayer& L = grid_.layer;
  const nlohmann::json header = {{"edge_length", L.edge_length},
                                 {"time_bucket_seconds", L.time_bucket_seconds},
                                 {"time_offset_seconds", L.time_offset_seconds},
                                 {"lattice_offset", {L.lattice_offset.x, L.lattice_offset.y}}};
  out << "# " << header.dump() << '\n' << "q,r,bucket,value\n";
  std::vector<std::pair<TabularGrid::Key, double>> rows(values_.begin(), values_.end());
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    return std::tie(a.first.q, a.first.r, a.first.bucket) <
           std::tie(b.first.q, b.first.r, b.first.bucket);
  });
  for (const auto& [k, v] : rows) {
    out << k.q << ',' << k.r << ',' << k.bucket << ',' << fmt_double(v) << '\n';
  }
}

TabularValue TabularValue::read_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("# ", 0) != 0) {
    throw DataError("tabular value file: missing grid header");
  }
  TabularGrid grid;
  try {
    const auto h = nlohmann::json::parse(line.substr(2));
    grid.layer.edge_length = h.at("edge_length").get<double>();
    grid.layer.time_bucket_seconds = h.at("time_bucket_seconds").get<int>();
    grid.layer.time_offset_seconds = h.at("time_offset_seconds").get<int>();
    grid.layer.lattice_offset = {h.at("lattice_offset").at(0).get<double>(),
                                 h.at("lattice_offset").at(1).get<double>()};
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("tabular value file: bad header: ") + e.what());
  }
  if (!std::getline(in, line) || line != "q,r,bucket,value") {
    throw DataError("tabular value file: missing column header");
  }
  TabularValue v(grid);
  std::size_t lineno = 2;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    TabularGrid::Key k;
    double value = 0;
    char c1 = 0, c2 = 0, c3 = 0;
    long long bucket = 0;
    std::istringstream ss(line);
    if (!(ss >> k.q >> c1 >> k.r >> c2 >> bucket >> c3 >> value) || c1 != ',' || c2 != ',' ||
        c3 != ',' || !std::isfinite(value)) {
      throw DataError("tabular value file: bad row at line " + std::to_string(lineno));
    }
    k.bucket = bucket;
    v.set(k, value);
  }
  return v;
}

TabularValue tabular_dp_evaluate(std::span<const TransitionTuple> transitions,
                                 const TabularGrid& grid, double gamma, int max_sweeps,
                                 double tolerance, TabularDpStats* stats) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must be in (0, 1]");
  std::unordered_map<TabularGrid::Key, int, TabularGrid::KeyHash> id;
  std::vector<TabularGrid::Key> keys;
  auto intern = [&](const TabularGrid::Key& k) {
    auto [it, inserted] = id.emplace(k, static_cast<int>(keys.size()));
    if (inserted) keys.push_back(k);
    return it->second;
  };
  struct Edge {
    int from;
    int to;  // -1: terminal or unseen successor
    double reward;
    double discount;
  };
  std::vector<Edge> edges;
  edges.reserve(transitions.size());
  for (const auto& t : transitions) {
    edges.push_back({intern(grid.key(t.origin, t.origin_time)), -1,
                     discounted_option_reward(t.reward, t.duration_steps, gamma),
                     std::pow(gamma, t.duration_steps)});
  }
  // Successors only carry value if they are themselves origins of some data.
  for (std::size_t i = 0; i < transitions.size(); ++i) {
    const auto& t = transitions[i];
    if (t.is_terminal || t.destination_time.is_terminal()) continue;
    const auto it = id.find(grid.key(t.destination, t.destination_time));
    if (it != id.end()) edges[i].to = it->second;
  }
  const std::size_t n = keys.size();
  std::vector<double> count(n, 0.0);
  for (const auto& e : edges) count[static_cast<std::size_t>(e.from)] += 1.0;

  std::vector<double> v(n, 0.0), next(n, 0.0);
  int sweeps = 0;
  double change = 0.0;
  while (sweeps < max_sweeps) {
    std::fill(next.begin(), next.end(), 0.0);
    for (const auto& e : edges) {
      next[static_cast<std::size_t>(e.from)] +=
          e.reward + (e.to >= 0 ? e.discount * v[static_cast<std::size_t>(e.to)] : 0.0);
    }
    change = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      next[i] /= count[i];
      change = std::max(change, std::abs(next[i] - v[i]));
    }
    v.swap(next);
    ++sweeps;
    if (change < tolerance) break;
  }
  if (stats) *stats = {sweeps, change};
  TabularValue out(grid);
  for (std::size_t i = 0; i < n; ++i) out.set(keys[i], v[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Diagnostics

std::vector<ValueProfileRow> value_profile(const StateValueFunction& v,
                                           std::span<const GeoPoint> locations,
                                           int bucket_seconds) {
  if (bucket_seconds <= 0) throw std::invalid_argument("bucket_seconds must be > 0");
  std::vector<ValueProfileRow> rows;
  for (int start = 0; start < kSecondsPerDay; start += bucket_seconds) {
    const ClockTime t(std::min(kSecondsPerDay - 1, start + bucket_seconds / 2));
    double s = 0.0, sq = 0.0;
    for (const auto& l : locations) {
      const double x = v.value(l, t);
      s += x;
      sq += x * x;
    }
    const double n = std::max<std::size_t>(1, locations.size());
    const double mean = s / n;
    rows.push_back({start, mean, std::sqrt(std::max(0.0, sq / n - mean * mean))});
  }
  return rows;
}

Histogram histogram(std::span<const double> values, double lo, double hi, int bins) {
  if (bins < 1 || !(hi > lo)) throw std::invalid_argument("histogram needs bins >= 1, hi > lo");
  Histogram h;
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  for (int i = 0; i <= bins; ++i) h.edges.push_back(lo + (hi - lo) * i / bins);
  for (double x : values) {
    auto b = static_cast<long>(std::floor((x - lo) / (hi - lo) * bins));
    b = std::clamp<long>(b, 0, bins - 1);
    ++h.counts[static_cast<std::size_t>(b)];
  }
  return h;
}

CorruptionReport weight_corruption_probe(const ValueNetwork& net,
                                         std::span<const StateFeatures> states, double sigma,
                                         std::uint64_t seed, int bins) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("sigma must be >= 0");
  ValueNetwork noisy = net;
  if (sigma > 0.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, sigma);
    for (Eigen::Index r = 0; r < noisy.embedding.rows(); ++r)
      for (Eigen::Index c = 0; c < noisy.embedding.cols(); ++c) noisy.embedding(r, c) += noise(rng);
  }
  std::vector<double> before, after;
  before.reserve(states.size());
  after.reserve(states.size());
  for (const auto& s : states) {
    before.push_back(forward_value(s, net));
    after.push_back(forward_value(s, noisy));
  }
  CorruptionReport rep;
  rep.sigma = sigma;
  if (states.empty()) return rep;
  const double n = static_cast<double>(states.size());
  auto moments = [n](const std::vector<double>& x, double& mean, double& sd) {
    mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double sq = 0.0;
    for (double v : x) sq += (v - mean) * (v - mean);
    sd = std::sqrt(sq / n);
  };
  moments(before, rep.mean_before, rep.std_before);
  moments(after, rep.mean_after, rep.std_after);
  double shift = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i) shift += std::abs(after[i] - before[i]);
  rep.mean_abs_shift = shift / n;
  double lo = std::min(*std::min_element(before.begin(), before.end()),
                       *std::min_element(after.begin(), after.end()));
  double hi = std::max(*std::max_element(before.begin(), before.end()),
                       *std::max_element(after.begin(), after.end()));
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
  rep.before = histogram(before, lo, hi, bins);
  rep.after = histogram(after, lo, hi, bins);
  return rep;
}

}  // namespace cvnet
