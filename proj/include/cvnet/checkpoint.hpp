#pragma once

// Checkpoint container.
//
//   bytes 0..3   "CVN1"
//   bytes 4..7   header length H, uint32 little-endian
//   next H bytes JSON header (UTF-8)
//   remainder    float64 little-endian payload, in this order:
//                  embedding theta, row-major (A x m)
//                  main head: per layer, weight row-major (out x in), bias
//                  distilled head: same layout
//
// The header carries format_version, network shape, IndexConfig, context
// scaling statistics, hash algorithm id, gamma, lambda, norm order, free-form
// metadata, the payload length and its FNV-1a-64 checksum.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "cvnet/spatial_index.hpp"
#include "cvnet/value_network.hpp"

namespace cvnet {

inline constexpr int kCheckpointVersion = 1;

class VersionMismatch : public DataError {
 public:
  using DataError::DataError;
};

/// Dynamic context counts are log1p-transformed then standardized with
/// training-set statistics. Static context is passed through.
struct ContextScaling {
  Eigen::VectorXd mean;
  Eigen::VectorXd stddev;

  static ContextScaling identity(int dynamic_dim);
  /// Fits mean/std of log1p(raw) over the given raw samples.
  static ContextScaling fit(const std::vector<Eigen::VectorXd>& raw_samples, int dynamic_dim);

  Eigen::VectorXd apply(const Eigen::VectorXd& raw) const;

  friend bool operator==(const ContextScaling& a, const ContextScaling& b) {
    return a.mean.size() == b.mean.size() && a.mean == b.mean && a.stddev == b.stddev;
  }
};

void to_json(nlohmann::json& j, const ContextScaling& s);
void from_json(const nlohmann::json& j, ContextScaling& s);

struct Checkpoint {
  ValueNetwork net;
  IndexConfig index;
  ContextScaling scaling;
  double gamma = 0.92;
  double lambda = 1e-4;
  NormOrder norm = NormOrder::L1;
  nlohmann::json metadata = nlohmann::json::object();
};

std::string save_checkpoint(const Checkpoint& ckpt);
void save_checkpoint(const Checkpoint& ckpt, std::ostream& out);
void save_checkpoint_file(const Checkpoint& ckpt, const std::string& path);

/// Parses a checkpoint. If `expected_index` is given, a differing IndexConfig
/// is a ConfigError. Truncation or checksum failure is CorruptCheckpoint; an
/// unknown format version is VersionMismatch.
Checkpoint load_checkpoint(const std::string& bytes, const IndexConfig* expected_index = nullptr);
Checkpoint load_checkpoint(std::istream& in, const IndexConfig* expected_index = nullptr);
Checkpoint load_checkpoint_file(const std::string& path,
                                const IndexConfig* expected_index = nullptr);

/// FNV-1a-64 of the serialized checkpoint, hex encoded.
std::string checkpoint_content_hash(const Checkpoint& ckpt);

// Flat float64 payload helpers shared with transfer checkpoints.
void append_doubles(std::string& out, const double* data, std::size_t n);
void append_mlp(std::string& out, const Mlp<double>& mlp);
class PayloadReader {
 public:
  PayloadReader(const std::string& bytes, std::size_t offset) : bytes_(bytes), pos_(offset) {}
  void read(double* data, std::size_t n);
  void read_mlp(Mlp<double>& mlp);
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  std::size_t pos_;
};

std::string read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::string& bytes);

}  // namespace cvnet
