#pragma once

// Hierarchical hexagon + time tile coding for the cerebellar embedding.
//
// Each tiling layer pairs a pointy-top hexagon lattice (edge length e_i,
// fixed lattice displacement) with a time bucketing (width w_i, phase o_i).
// Successive layers shrink the hexagon area by a factor of 7. A state
// (location, clock time) activates exactly one tile per layer; tiles are
// named by strings whose prefix encodes the layer, so different layers never
// produce the same name. Names are hashed into a memory of A rows.
//
// Hash (portable, recorded as "fnv1a64-seeded-v1" in checkpoints):
//   h = FNV-1a-64 starting from offset basis 0xcbf29ce484222325,
//       first over the 8 little-endian bytes of hash_seed,
//       then over the UTF-8 bytes of the tile's cell code;
//   index = h mod A.

#include <compare>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cvnet/common.hpp"

namespace cvnet {

struct GeoPoint {
  double x = 0.0;  // east, meters
  double y = 0.0;  // north, meters

  friend bool operator==(const GeoPoint&, const GeoPoint&) = default;
};

double distance(const GeoPoint& a, const GeoPoint& b) noexcept;

/// Seconds since midnight. The end of the day (86400) is representable and
/// denotes the terminal time T of an episode.
class ClockTime {
 public:
  constexpr ClockTime() = default;
  explicit ClockTime(int seconds_of_day);

  static constexpr ClockTime terminal() noexcept {
    ClockTime t;
    t.seconds_ = kSecondsPerDay;
    return t;
  }

  /// Adds seconds, saturating at the terminal time.
  ClockTime advanced(int seconds) const;

  constexpr int seconds() const noexcept { return seconds_; }
  constexpr bool is_terminal() const noexcept {
    return seconds_ >= kSecondsPerDay;
  }

  friend constexpr auto operator<=>(const ClockTime&,
                                    const ClockTime&) = default;

 private:
  int seconds_ = 0;
};

struct HexCoord {
  int q = 0;
  int r = 0;

  friend constexpr auto operator<=>(const HexCoord&,
                                    const HexCoord&) = default;
};

/// Pointy-top hexagon cell containing `p` for a lattice centered at the
/// origin. Exact ties go to the lexicographically smaller (q, r).
HexCoord hex_cell_at(const GeoPoint& p, double edge_length);
GeoPoint hex_center(const HexCoord& cell, double edge_length) noexcept;

struct TilingLayer {
  double edge_length = 0.0;  // meters
  int time_bucket_seconds = 1800;
  int time_offset_seconds = 0;
  GeoPoint lattice_offset;

  friend bool operator==(const TilingLayer&, const TilingLayer&) = default;
};

inline constexpr const char* kHashAlgorithm = "fnv1a64-seeded-v1";

struct IndexConfig {
  std::vector<TilingLayer> layers;
  std::int64_t memory_size = 20000;
  std::uint64_t hash_seed = 0;

  int n_tilings() const noexcept { return static_cast<int>(layers.size()); }

  /// Three layers with edges (3430, 1297, 490) m, time buckets
  /// (1800, 900, 600) s with phases (0, 300, 450) s, A = 20000.
  static IndexConfig defaults();

  /// Single layer, used for tabular-equivalent problems.
  static IndexConfig single_layer(double edge_length, int bucket_seconds,
                                  std::int64_t memory_size,
                                  std::uint64_t hash_seed = 0);

  /// Throws ConfigError on empty layers, non-positive sizes, or an area
  /// ratio between successive layers that is not 7 (1% tolerance).
  void validate() const;

  friend bool operator==(const IndexConfig&, const IndexConfig&) = default;
};

void to_json(nlohmann::json& j, const IndexConfig& cfg);
void from_json(const nlohmann::json& j, IndexConfig& cfg);

struct TileId {
  int layer_tag = 0;
  std::string cell_code;

  friend bool operator==(const TileId&, const TileId&) = default;
};

/// Time bucket index of `t` in layer `layer` (floor((t - phase) / width)).
std::int64_t time_bucket(const TilingLayer& layer, ClockTime t) noexcept;

/// Hex cell of `p` in layer `layer`'s displaced lattice.
HexCoord layer_cell(const TilingLayer& layer, const GeoPoint& p);

/// Spatial-only cell name, "h<layer>:<q>:<r>". Used as the key of feature
/// records and tabular values.
std::string spatial_cell_code(int layer, const HexCoord& cell);

/// Parses a spatial cell code; returns false on malformed input.
bool parse_spatial_cell_code(const std::string& code, int& layer,
                             HexCoord& cell);

std::vector<TileId> quantize(const GeoPoint& l, ClockTime mu,
                             const IndexConfig& cfg);

std::int64_t map_to_memory(const TileId& tile, const IndexConfig& cfg);
std::int64_t map_to_memory(const std::string& cell_code,
                           const IndexConfig& cfg);

/// Sparse count vector c(s): memory index -> number of tiles hashed there.
struct ActivationVector {
  std::vector<std::pair<std::int64_t, int>> entries;  // sorted by index
  int n_tilings = 0;

  int total_count() const noexcept;
  friend bool operator==(const ActivationVector&,
                         const ActivationVector&) = default;
};

ActivationVector activation_vector(const GeoPoint& l, ClockTime mu,
                                   const IndexConfig& cfg);
ActivationVector activation_from_tiles(const std::vector<TileId>& tiles,
                                       const IndexConfig& cfg);

/// L1 mass of c(s1) - c(s2).
int activation_difference_mass(const ActivationVector& a,
                               const ActivationVector& b);

/// Smallest hash seed >= `start` for which `codes` map to pairwise distinct
/// memory rows under `cfg.memory_size`. Throws ConfigError if none is found
/// within `max_tries`.
std::uint64_t find_collision_free_seed(const std::vector<std::string>& codes,
                                       const IndexConfig& cfg,
                                       std::uint64_t start = 0,
                                       int max_tries = 100000);

}  // namespace cvnet
