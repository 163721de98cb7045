#include "cvnet/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace cvnet {

void to_json(nlohmann::json& j, const NetworkShape& s) {
  j = {{"memory_size", s.memory_size},
       {"embedding_dim", s.embedding_dim},
       {"hidden", s.hidden},
       {"static_dim", s.static_dim},
       {"dynamic_dim", s.dynamic_dim}};
}

void from_json(const nlohmann::json& j, NetworkShape& s) {
  try {
    s.memory_size = j.at("memory_size").get<std::int64_t>();
    s.embedding_dim = j.at("embedding_dim").get<int>();
    s.hidden = j.at("hidden").get<std::vector<int>>();
    s.static_dim = j.at("static_dim").get<int>();
    s.dynamic_dim = j.at("dynamic_dim").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("network shape: ") + e.what());
  }
}

ContextScaling ContextScaling::identity(int dynamic_dim) {
  return {Eigen::VectorXd::Zero(dynamic_dim), Eigen::VectorXd::Ones(dynamic_dim)};
}

ContextScaling ContextScaling::fit(const std::vector<Eigen::VectorXd>& raw, int dynamic_dim) {
  ContextScaling s = identity(dynamic_dim);
  if (raw.empty() || dynamic_dim == 0) return s;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(dynamic_dim);
  Eigen::VectorXd sq = Eigen::VectorXd::Zero(dynamic_dim);
  for (const auto& r : raw) {
    const Eigen::VectorXd t = r.array().max(0.0).log1p().matrix();
    sum += t;
    sq += t.cwiseProduct(t);
  }
  const double n = static_cast<double>(raw.size());
  s.mean = sum / n;
  const Eigen::VectorXd var = (sq / n - s.mean.cwiseProduct(s.mean)).cwiseMax(0.0);
  s.stddev = var.cwiseSqrt();
  for (Eigen::Index i = 0; i < s.stddev.size(); ++i) {
    if (s.stddev(i) < 1e-9) s.stddev(i) = 1.0;
  }
  return s;
}

Eigen::VectorXd ContextScaling::apply(const Eigen::VectorXd& raw) const {
  if (raw.size() != mean.size()) throw ConfigError("context width does not match scaling");
  return ((raw.array().max(0.0).log1p() - mean.array()) / stddev.array()).matrix();
}

void to_json(nlohmann::json& j, const ContextScaling& s) {
  j = {{"mean", std::vector<double>(s.mean.data(), s.mean.data() + s.mean.size())},
       {"stddev", std::vector<double>(s.stddev.data(), s.stddev.data() + s.stddev.size())}};
}

void from_json(const nlohmann::json& j, ContextScaling& s) {
  const auto mean = j.at("mean").get<std::vector<double>>();
  const auto sd = j.at("stddev").get<std::vector<double>>();
  if (mean.size() != sd.size()) throw ConfigError("scaling: mean/stddev width differ");
  s.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
  s.stddev = Eigen::Map<const Eigen::VectorXd>(sd.data(), static_cast<Eigen::Index>(sd.size()));
}

void append_doubles(std::string& out, const double* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t bits = std::bit_cast<std::uint64_t>(data[i]);
    char b[8];
    for (int k = 0; k < 8; ++k) b[k] = static_cast<char>((bits >> (8 * k)) & 0xff);
    out.append(b, 8);
  }
}

void append_mlp(std::string& out, const Mlp<double>& mlp) {
  for (const auto& l : mlp.layers) {
    const RowMajorMatrixX<double> w = l.weight;
    append_doubles(out, w.data(), static_cast<std::size_t>(w.size()));
    append_doubles(out, l.bias.data(), static_cast<std::size_t>(l.bias.size()));
  }
}

void PayloadReader::read(double* data, std::size_t n) {
  if (remaining() < n * 8) throw CorruptCheckpoint("checkpoint payload truncated");
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits = 0;
    for (int k = 0; k < 8; ++k) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + k])) << (8 * k);
    }
    data[i] = std::bit_cast<double>(bits);
    pos_ += 8;
  }
}

void PayloadReader::read_mlp(Mlp<double>& mlp) {
  for (auto& l : mlp.layers) {
    RowMajorMatrixX<double> w(l.weight.rows(), l.weight.cols());
    read(w.data(), static_cast<std::size_t>(w.size()));
    l.weight = w;
    read(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
  }
}

namespace {

constexpr char kMagic[4] = {'C', 'V', 'N', '1'};

std::string payload_of(const ValueNetwork& net) {
  std::string payload;
  payload.reserve(static_cast<std::size_t>(net.embedding.size() + net.main.parameter_count() +
                                           net.distilled.parameter_count()) * 8);
  append_doubles(payload, net.embedding.data(), static_cast<std::size_t>(net.embedding.size()));
  append_mlp(payload, net.main);
  append_mlp(payload, net.distilled);
  return payload;
}

}  // namespace

std::string save_checkpoint(const Checkpoint& ckpt) {
  const std::string payload = payload_of(ckpt.net);
  nlohmann::json header = {{"format_version", kCheckpointVersion},
                           {"shape", ckpt.net.shape()},
                           {"distilled_hidden", [&] {
                              auto w = ckpt.net.distilled.widths();
                              return std::vector<int>(w.begin() + 1, w.end() - 1);
                            }()},
                           {"index_config", ckpt.index},
                           {"scaling", ckpt.scaling},
                           {"hash_algorithm", kHashAlgorithm},
                           {"gamma", ckpt.gamma},
                           {"lambda", ckpt.lambda},
                           {"norm", to_string(ckpt.norm)},
                           {"metadata", ckpt.metadata},
                           {"payload_doubles", payload.size() / 8},
                           {"payload_fnv1a64", hex64(fnv1a64(payload))}};
  const std::string h = header.dump();
  std::string out(kMagic, 4);
  const auto len = static_cast<std::uint32_t>(h.size());
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((len >> (8 * k)) & 0xff));
  out += h;
  out += payload;
  return out;
}

void save_checkpoint(const Checkpoint& ckpt, std::ostream& out) {
  const std::string bytes = save_checkpoint(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::string& bytes, const IndexConfig* expected_index) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CorruptCheckpoint("not a CVN1 checkpoint");
  }
  std::uint32_t len = 0;
  for (int k = 0; k < 4; ++k) {
    len |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 + k])) << (8 * k);
  }
  if (bytes.size() < 8ull + len) throw CorruptCheckpoint("checkpoint header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(8, len));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(std::string("checkpoint header unreadable: ") + e.what());
  }
  const int version = header.value("format_version", -1);
  if (version != kCheckpointVersion) {
    throw VersionMismatch("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  NetworkShape shape;
  try {
    shape = header.at("shape").get<NetworkShape>();
    ckpt.index = header.at("index_config").get<IndexConfig>();
    ckpt.scaling = header.at("scaling").get<ContextScaling>();
    ckpt.gamma = header.at("gamma").get<double>();
    ckpt.lambda = header.at("lambda").get<double>();
    ckpt.norm = parse_norm_order(header.at("norm").get<std::string>());
    ckpt.metadata = header.value("metadata", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(std::string("checkpoint header incomplete: ") + e.what());
  }
  if (header.value("hash_algorithm", std::string()) != kHashAlgorithm) {
    throw ConfigError("checkpoint uses an unknown tile hash");
  }
  if (shape.memory_size != ckpt.index.memory_size) {
    throw ConfigError("checkpoint memory size disagrees with its IndexConfig");
  }
  if (expected_index && !(*expected_index == ckpt.index)) {
    throw ConfigError("checkpoint IndexConfig does not match the expected configuration");
  }
  const std::size_t payload_len = bytes.size() - 8 - len;
  if (payload_len != header.value("payload_doubles", std::size_t{0}) * 8) {
    throw CorruptCheckpoint("checkpoint payload length mismatch");
  }
  const std::string payload = bytes.substr(8 + len);
  if (hex64(fnv1a64(payload)) != header.value("payload_fnv1a64", std::string())) {
    throw CorruptCheckpoint("checkpoint payload checksum mismatch");
  }
  ckpt.net = ValueNetwork::zeros(shape);
  if (header.contains("distilled_hidden")) {
    std::vector<int> w{shape.distilled_input_width()};
    for (int h : header.at("distilled_hidden").get<std::vector<int>>()) w.push_back(h);
    w.push_back(1);
    ckpt.net.distilled = Mlp<double>(w);
  }
  if (static_cast<std::size_t>(ckpt.net.embedding.size() + ckpt.net.main.parameter_count() +
                               ckpt.net.distilled.parameter_count()) * 8 != payload.size()) {
    throw CorruptCheckpoint("checkpoint payload does not match network shape");
  }
  PayloadReader reader(payload, 0);
  reader.read(ckpt.net.embedding.data(), static_cast<std::size_t>(ckpt.net.embedding.size()));
  reader.read_mlp(ckpt.net.main);
  reader.read_mlp(ckpt.net.distilled);
  return ckpt;
}

Checkpoint load_checkpoint(std::istream& in, const IndexConfig* expected_index) {
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return load_checkpoint(bytes, expected_index);
}

std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path);
}

void save_checkpoint_file(const Checkpoint& ckpt, const std::string& path) {
  write_file_bytes(path, save_checkpoint(ckpt));
}

Checkpoint load_checkpoint_file(const std::string& path, const IndexConfig* expected_index) {
  return load_checkpoint(read_file_bytes(path), expected_index);
}

std::string checkpoint_content_hash(const Checkpoint& ckpt) {
  return hex64(fnv1a64(save_checkpoint(ckpt)));
}

}  // namespace cvnet
