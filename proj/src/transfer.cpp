#include "cvnet/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <numeric>

#include "cvnet/config_json.hpp"

namespace cvnet {

// ---------------------------------------------------------------- split

void FeatureSplit::validate() const {
  if (width < 0) throw ConfigError("feature split width must be >= 0");
  std::vector<int> seen(static_cast<std::size_t>(width), 0);
  for (const auto* group : {&adaptive, &nonadaptive}) {
    for (int i : *group) {
      if (i < 0 || i >= width) throw ConfigError("feature split index out of range");
      if (seen[static_cast<std::size_t>(i)]++) {
        throw ConfigError("feature split index " + std::to_string(i) + " assigned twice");
      }
    }
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) {
    throw ConfigError("feature split does not cover every input feature");
  }
}

FeatureSplit FeatureSplit::contiguous(int nonadaptive_width, int adaptive_width) {
  FeatureSplit s;
  s.width = nonadaptive_width + adaptive_width;
  for (int i = 0; i < nonadaptive_width; ++i) s.nonadaptive.push_back(i);
  for (int i = 0; i < adaptive_width; ++i) s.adaptive.push_back(nonadaptive_width + i);
  return s;
}

void to_json(nlohmann::json& j, const FeatureSplit& s) {
  j = {{"adaptive", s.adaptive}, {"nonadaptive", s.nonadaptive}, {"width", s.width}};
}

void from_json(const nlohmann::json& j, FeatureSplit& s) {
  reject_unknown_keys(j, {"adaptive", "nonadaptive", "width"}, "feature_split");
  try {
    s.adaptive = j.at("adaptive").get<std::vector<int>>();
    s.nonadaptive = j.at("nonadaptive").get<std::vector<int>>();
    s.width = j.at("width").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("feature_split: ") + e.what());
  }
  s.validate();
}

// ---------------------------------------------------------------- finetune

ValueNetwork init_finetune(const Checkpoint* source, const IndexConfig& target_index,
                           std::uint64_t seed, const NetworkShape* shape) {
  target_index.validate();
  NetworkShape s = shape ? *shape : NetworkShape{};
  if (source) {
    const NetworkShape src = source->net.shape();
    if (shape && (shape->embedding_dim != src.embedding_dim || shape->hidden != src.hidden ||
                  shape->static_dim != src.static_dim || shape->dynamic_dim != src.dynamic_dim)) {
      throw ConfigError("target shape does not match the source network");
    }
    s = src;
  }
  s.memory_size = target_index.memory_size;
  std::mt19937_64 rng(substream_seed(seed, "init"));
  ValueNetwork net = ValueNetwork::initialized(s, rng);
  if (source) {
    net.main = source->net.main;
    if (source->net.distilled.widths()[0] != net.distilled.input_width()) {
      throw ConfigError("source distilled head does not fit the target shape");
    }
    net.distilled = source->net.distilled;
  }
  return net;
}

FreezeMask freeze_all_copied(const ValueNetwork& net) {
  FreezeMask m;
  m.main_layers.assign(static_cast<std::size_t>(net.main.depth()), true);
  return m;
}

// ---------------------------------------------------------------- features

Eigen::VectorXd time_features(ClockTime mu) {
  const double s = static_cast<double>(mu.seconds()) / kSecondsPerDay;
  const double w = 2.0 * std::numbers::pi * s;
  Eigen::VectorXd f(kTimeFeatureDim);
  f << std::sin(w), std::cos(w), std::sin(2 * w), std::cos(2 * w), std::sin(3 * w),
      std::cos(3 * w), s;
  return f;
}

namespace {

Eigen::VectorXd embed_rows(const ActivationVector& c, const RowMajorMatrixX<double>& theta) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(theta.cols());
  for (const auto& [idx, count] : c.entries) out += count * theta.row(idx).transpose();
  return out / c.n_tilings;
}

Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& x, const std::vector<int>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
  return out;
}

std::vector<int> widths_with(int in, const std::vector<int>& hidden) {
  std::vector<int> w{in};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(1);
  return w;
}

TransferNetwork make_network(const IndexConfig& index, const FeatureSplit& split,
                             const TransferModelConfig& cfg, std::vector<int> target_inputs,
                             const char* purpose) {
  index.validate();
  split.validate();
  if (cfg.embedding_dim <= 0 || cfg.context_dim < 0) throw ConfigError("invalid transfer shape");
  TransferNetwork net;
  net.index = index;
  net.context_dim = cfg.context_dim;
  net.split = split;
  net.additive_raw = cfg.additive_raw;
  if (split.width != cfg.embedding_dim + kTimeFeatureDim + cfg.context_dim) {
    throw ConfigError("feature split width does not match embedding + time + context");
  }
  std::mt19937_64 rng(substream_seed(cfg.seed, purpose));
  net.embedding = RowMajorMatrixX<double>(index.memory_size, cfg.embedding_dim);
  std::uniform_real_distribution<double> emb(-0.01, 0.01);
  for (Eigen::Index r = 0; r < net.embedding.rows(); ++r)
    for (Eigen::Index c = 0; c < net.embedding.cols(); ++c) net.embedding(r, c) = emb(rng);
  Mlp<double> target(widths_with(static_cast<int>(target_inputs.size()), cfg.hidden));
  target.he_uniform_init(rng);
  net.target_inputs = std::move(target_inputs);
  net.columns = ProgressiveParams<double>::make(Mlp<double>{}, std::move(target));
  return net;
}

}  // namespace

Eigen::VectorXd TransferNetwork::features(const GeoPoint& l, ClockTime mu,
                                          const Eigen::VectorXd& ctx) const {
  if (ctx.size() != context_dim) throw ConfigError("context width does not match transfer model");
  Eigen::VectorXd x(feature_width());
  x << embed_rows(activation_vector(l, mu, index), embedding), time_features(mu), ctx;
  return x;
}

double TransferNetwork::value(const GeoPoint& l, ClockTime mu, const Eigen::VectorXd& ctx) const {
  const Eigen::MatrixXd x = features(l, mu, ctx);
  return progressive_forward<double>(columns, gather_rows(x, source_inputs),
                                     gather_rows(x, target_inputs))(0);
}

FeatureSplit default_transfer_split(int embedding_dim, int context_dim) {
  return FeatureSplit::contiguous(embedding_dim, kTimeFeatureDim + context_dim);
}

TransferNetwork make_transfer_network(const IndexConfig& target_index, const FeatureSplit& split,
                                      const TransferModelConfig& cfg, const Mlp<double>* source) {
  std::vector<int> inputs = split.nonadaptive;
  if (cfg.additive_raw) inputs.insert(inputs.end(), split.adaptive.begin(), split.adaptive.end());
  TransferNetwork net = make_network(target_index, split, cfg, std::move(inputs), "transfer-init");
  if (source && !split.adaptive.empty()) {
    if (source->input_width() != static_cast<int>(split.adaptive.size())) {
      throw ConfigError("source column width does not match the adaptive feature count");
    }
    net.source_inputs = split.adaptive;
    net.columns = ProgressiveParams<double>::make(*source, std::move(net.columns.target));
  }
  return net;
}

TransferNetwork make_source_network(const IndexConfig& source_index, const FeatureSplit& split,
                                    const TransferModelConfig& cfg) {
  if (split.adaptive.empty()) throw ConfigError("source column needs adaptive features");
  return make_network(source_index, split, cfg, split.adaptive, "source-init");
}

// ---------------------------------------------------------------- training

namespace {

template <typename P, typename G, typename M>
void adam_apply(P&& param, const G& grad, M& m, M& v, const TransferTrainConfig& c, double step,
                double eps) {
  m = c.beta1 * m + (1.0 - c.beta1) * grad;
  v = c.beta2 * v + (1.0 - c.beta2) * grad.cwiseProduct(grad);
  param.array() -= step * m.array() / (v.array().sqrt() + eps);
}

}  // namespace

TransferTrainer::TransferTrainer(TransferNetwork& net, std::span<const TransferSample> train,
                                 TransferTrainConfig cfg)
    : net_(net), cfg_(cfg), rng_(substream_seed(cfg.seed, "transfer-shuffle")) {
  if (train.empty()) throw DataError("no transfer training samples");
  if (cfg_.batch_size <= 0 || !(cfg_.learning_rate > 0)) {
    throw ConfigError("transfer training needs batch_size > 0 and learning_rate > 0");
  }
  for (const TransferSample& s : train) {
    if (s.context.size() != net_.context_dim) throw ConfigError("sample context width mismatch");
    if (!std::isfinite(s.target)) throw DataError("non-finite transfer target");
    Eigen::VectorXd rest(kTimeFeatureDim + net_.context_dim);
    rest << time_features(s.time), s.context;
    data_.push_back({activation_vector(s.location, s.time, net_.index), rest, s.target});
  }
  order_.resize(data_.size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  std::shuffle(order_.begin(), order_.end(), rng_);
  m_t_ = net_.columns.target.zeros_like();
  v_t_ = m_t_;
  for (const auto& u : net_.columns.laterals) {
    m_u_.push_back(MatrixX<double>::Zero(u.rows(), u.cols()));
    v_u_.push_back(m_u_.back());
  }
  m_e_ = RowMajorMatrixX<double>::Zero(net_.embedding.rows(), net_.embedding.cols());
  v_e_ = m_e_;
}

double TransferTrainer::step() {
  const int m = net_.embedding_dim();
  const auto b = static_cast<Eigen::Index>(std::min<std::size_t>(
      static_cast<std::size_t>(cfg_.batch_size), data_.size()));
  std::vector<const Prepared*> batch;
  for (Eigen::Index i = 0; i < b; ++i) {
    if (cursor_ == order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
    }
    batch.push_back(&data_[order_[cursor_++]]);
  }
  Eigen::MatrixXd x(net_.feature_width(), b);
  Eigen::RowVectorXd y(b);
  for (Eigen::Index i = 0; i < b; ++i) {
    const Prepared& p = *batch[static_cast<std::size_t>(i)];
    x.col(i) << embed_rows(p.activation, net_.embedding), p.rest;
    y(i) = p.target;
  }
  ProgressiveTrace<double> tr;
  const Eigen::RowVectorXd v = progressive_forward<double>(
      net_.columns, gather_rows(x, net_.source_inputs), gather_rows(x, net_.target_inputs), &tr);
  const Eigen::RowVectorXd err = v - y;
  const double loss = 0.5 * err.squaredNorm() / static_cast<double>(b);
  auto g = zero_gradients(net_.columns);
  const Eigen::MatrixXd dx =
      progressive_backward<double>(net_.columns, tr, err / static_cast<double>(b), g);

  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const double stepsize = cfg_.learning_rate * std::sqrt(c2) / c1;
  const double eps = cfg_.epsilon * std::sqrt(c2);
  auto& target = net_.columns.target;
  for (std::size_t i = 0; i < target.layers.size(); ++i) {
    adam_apply(target.layers[i].weight, g.target.layers[i].weight, m_t_.layers[i].weight,
               v_t_.layers[i].weight, cfg_, stepsize, eps);
    adam_apply(target.layers[i].bias, g.target.layers[i].bias, m_t_.layers[i].bias,
               v_t_.layers[i].bias, cfg_, stepsize, eps);
  }
  for (std::size_t i = 0; i < net_.columns.laterals.size(); ++i) {
    if (net_.columns.laterals[i].size() == 0) continue;
    adam_apply(net_.columns.laterals[i], g.laterals[i], m_u_[i], v_u_[i], cfg_, stepsize, eps);
  }
  if (cfg_.train_embedding) {
    // Embedding gradient through the target-column inputs that read it.
    std::map<std::int64_t, Eigen::VectorXd> rows;
    for (std::size_t r = 0; r < net_.target_inputs.size(); ++r) {
      const int f = net_.target_inputs[r];
      if (f >= m) continue;
      for (Eigen::Index i = 0; i < b; ++i) {
        const ActivationVector& a = batch[static_cast<std::size_t>(i)]->activation;
        const double d = dx(static_cast<Eigen::Index>(r), i) / a.n_tilings;
        for (const auto& [idx, count] : a.entries) {
          auto it = rows.try_emplace(idx, Eigen::VectorXd::Zero(m)).first;
          it->second(f) += count * d;
        }
      }
    }
    for (const auto& [r, gr] : rows) {
      auto mr = m_e_.row(r);
      auto vr = v_e_.row(r);
      mr = cfg_.beta1 * mr + (1.0 - cfg_.beta1) * gr.transpose();
      vr = cfg_.beta2 * vr + (1.0 - cfg_.beta2) * gr.transpose().cwiseProduct(gr.transpose());
      net_.embedding.row(r).array() -= stepsize * mr.array() / (vr.array().sqrt() + eps);
    }
  }
  return loss;
}

double transfer_eval_loss(const TransferNetwork& net, std::span<const TransferSample> eval) {
  if (eval.empty()) return 0.0;
  Eigen::MatrixXd x(net.feature_width(), static_cast<Eigen::Index>(eval.size()));
  Eigen::RowVectorXd y(x.cols());
  for (Eigen::Index i = 0; i < x.cols(); ++i) {
    const TransferSample& s = eval[static_cast<std::size_t>(i)];
    x.col(i) = net.features(s.location, s.time, s.context);
    y(i) = s.target;
  }
  const Eigen::RowVectorXd v = progressive_forward<double>(
      net.columns, gather_rows(x, net.source_inputs), gather_rows(x, net.target_inputs));
  return (v - y).squaredNorm() / static_cast<double>(x.cols());
}

std::vector<TransferCurvePoint> train_transfer(TransferNetwork& net,
                                               std::span<const TransferSample> train,
                                               std::span<const TransferSample> eval,
                                               const TransferTrainConfig& cfg) {
  TransferTrainer trainer(net, train, cfg);
  std::vector<TransferCurvePoint> curve{{0, transfer_eval_loss(net, eval)}};
  const int every = std::max(1, cfg.eval_interval);
  for (std::int64_t s = 1; s <= cfg.steps; ++s) {
    const double loss = trainer.step();
    if (!std::isfinite(loss)) throw DivergenceError("transfer training diverged");
    if (s % every == 0 || s == cfg.steps) curve.push_back({s, transfer_eval_loss(net, eval)});
  }
  return curve;
}

std::optional<std::int64_t> steps_to_reach(const std::vector<TransferCurvePoint>& curve,
                                           double loss) {
  for (const auto& p : curve) {
    if (p.eval_loss <= loss) return p.step;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------- synthetic

SyntheticCity SyntheticCity::generate(std::uint64_t seed, int bumps, double size) {
  SyntheticCity c;
  c.size = size;
  std::mt19937_64 rng(substream_seed(seed, "synthetic-city"));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < bumps; ++i) {
    c.bump_centers.push_back({size * (0.1 + 0.8 * u(rng)), size * (0.1 + 0.8 * u(rng))});
    c.bump_heights.push_back(-6.0 + 12.0 * u(rng));
    c.bump_widths.push_back(size * (0.08 + 0.12 * u(rng)));
  }
  return c;
}

double SyntheticCity::shared_part(ClockTime mu, const Eigen::VectorXd& ctx) {
  const double h = mu.seconds() / 3600.0;
  auto bump = [h](double c, double w) { return std::exp(-0.5 * (h - c) * (h - c) / (w * w)); };
  const double profile = 0.3 + bump(8.5, 1.8) + bump(18.5, 2.0);
  const double c0 = ctx.size() > 0 ? std::tanh(ctx(0)) : 0.0;
  const double c1 = ctx.size() > 1 ? std::tanh(ctx(1)) : 0.0;
  return 10.0 * profile * (1.0 + 0.5 * c0) + 2.0 * c1;
}

double SyntheticCity::spatial_part(const GeoPoint& l) const {
  double g = 0.0;
  for (std::size_t i = 0; i < bump_centers.size(); ++i) {
    const double d = distance(l, bump_centers[i]) / bump_widths[i];
    g += bump_heights[i] * std::exp(-0.5 * d * d);
  }
  return g;
}

std::vector<TransferSample> SyntheticCity::samples(std::size_t n, std::uint64_t seed,
                                                   double noise, int context_dim) const {
  std::mt19937_64 rng(substream_seed(seed, "synthetic-samples"));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> z(0.0, 1.0);
  std::vector<TransferSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    TransferSample s;
    s.location = {size * u(rng), size * u(rng)};
    s.time = ClockTime(static_cast<int>(u(rng) * (kSecondsPerDay - 1)));
    s.context = Eigen::VectorXd(context_dim);
    for (int k = 0; k < context_dim; ++k) s.context(k) = z(rng);
    s.target = true_value(s.location, s.time, s.context);
    if (noise > 0) s.target += noise * z(rng);
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kTransferMagic[4] = {'C', 'V', 'T', '1'};
constexpr int kTransferVersion = 1;

std::string transfer_payload(const TransferNetwork& n) {
  std::string p;
  append_doubles(p, n.embedding.data(), static_cast<std::size_t>(n.embedding.size()));
  append_mlp(p, n.columns.source);
  append_mlp(p, n.columns.target);
  for (std::size_t i = 1; i < n.columns.laterals.size(); ++i) {
    const RowMajorMatrixX<double> u = n.columns.laterals[i];
    append_doubles(p, u.data(), static_cast<std::size_t>(u.size()));
  }
  return p;
}

}  // namespace

std::string save_transfer_checkpoint(const TransferCheckpoint& ckpt) {
  const TransferNetwork& n = ckpt.net;
  const std::string payload = transfer_payload(n);
  const nlohmann::json header = {{"format_version", kTransferVersion},
                                 {"index_config", n.index},
                                 {"embedding_dim", n.embedding_dim()},
                                 {"context_dim", n.context_dim},
                                 {"time_feature_dim", kTimeFeatureDim},
                                 {"split", n.split},
                                 {"additive_raw", n.additive_raw},
                                 {"source_inputs", n.source_inputs},
                                 {"target_inputs", n.target_inputs},
                                 {"source_widths", n.columns.source.widths()},
                                 {"target_widths", n.columns.target.widths()},
                                 {"source_hash", ckpt.source_hash},
                                 {"metadata", ckpt.metadata},
                                 {"payload_doubles", payload.size() / 8},
                                 {"payload_fnv1a64", hex64(fnv1a64(payload))}};
  const std::string h = header.dump();
  std::string out(kTransferMagic, 4);
  const auto len = static_cast<std::uint32_t>(h.size());
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((len >> (8 * k)) & 0xff));
  return out + h + payload;
}

TransferCheckpoint load_transfer_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kTransferMagic, 4) != 0) {
    throw CorruptCheckpoint("not a CVT1 transfer checkpoint");
  }
  std::uint32_t len = 0;
  for (int k = 0; k < 4; ++k) {
    len |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 + k])) << (8 * k);
  }
  if (bytes.size() < 8ull + len) throw CorruptCheckpoint("transfer header truncated");
  TransferCheckpoint ckpt;
  TransferNetwork& n = ckpt.net;
  std::vector<int> source_widths, target_widths;
  std::size_t payload_doubles = 0;
  std::string checksum;
  try {
    const nlohmann::json h = nlohmann::json::parse(bytes.substr(8, len));
    if (h.at("format_version").get<int>() != kTransferVersion) {
      throw VersionMismatch("unsupported transfer checkpoint version");
    }
    n.index = h.at("index_config").get<IndexConfig>();
    n.embedding = RowMajorMatrixX<double>(n.index.memory_size, h.at("embedding_dim").get<int>());
    n.context_dim = h.at("context_dim").get<int>();
    n.split = h.at("split").get<FeatureSplit>();
    n.additive_raw = h.at("additive_raw").get<bool>();
    n.source_inputs = h.at("source_inputs").get<std::vector<int>>();
    n.target_inputs = h.at("target_inputs").get<std::vector<int>>();
    source_widths = h.at("source_widths").get<std::vector<int>>();
    target_widths = h.at("target_widths").get<std::vector<int>>();
    ckpt.source_hash = h.at("source_hash").get<std::string>();
    ckpt.metadata = h.value("metadata", nlohmann::json::object());
    payload_doubles = h.at("payload_doubles").get<std::size_t>();
    checksum = h.at("payload_fnv1a64").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(std::string("transfer header unreadable: ") + e.what());
  }
  const std::string payload = bytes.substr(8 + len);
  if (payload.size() != payload_doubles * 8 || hex64(fnv1a64(payload)) != checksum) {
    throw CorruptCheckpoint("transfer payload checksum mismatch");
  }
  n.columns = ProgressiveParams<double>::make(
      source_widths.empty() ? Mlp<double>{} : Mlp<double>(source_widths),
      Mlp<double>(target_widths));
  PayloadReader reader(payload, 0);
  reader.read(n.embedding.data(), static_cast<std::size_t>(n.embedding.size()));
  reader.read_mlp(n.columns.source);
  reader.read_mlp(n.columns.target);
  for (std::size_t i = 1; i < n.columns.laterals.size(); ++i) {
    auto& u = n.columns.laterals[i];
    RowMajorMatrixX<double> tmp(u.rows(), u.cols());
    reader.read(tmp.data(), static_cast<std::size_t>(tmp.size()));
    u = tmp;
  }
  if (reader.remaining() != 0) throw CorruptCheckpoint("transfer payload has trailing bytes");
  return ckpt;
}

std::string transfer_content_hash(const TransferCheckpoint& ckpt) {
  return hex64(fnv1a64(save_transfer_checkpoint(ckpt)));
}

}  // namespace cvnet
