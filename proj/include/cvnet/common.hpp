#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cvnet {

inline constexpr int kSecondsPerDay = 86400;

/// One SMDP time step in seconds. A 10-minute trip has duration 10.
inline constexpr int kStepSeconds = 60;

// Error taxonomy. The CLI maps these onto exit codes (2 config, 3 data,
// 4 divergence).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CorruptCheckpoint : public DataError {
 public:
  using DataError::DataError;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 64-bit FNV-1a over raw bytes, continuing from `state`.
inline constexpr std::uint64_t kFnvOffset = 14695981039346656037ULL;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t state = kFnvOffset) noexcept {
  for (unsigned char c : bytes) {
    state ^= c;
    state *= kFnvPrime;
  }
  return state;
}

inline std::uint64_t fnv1a64_u64(std::uint64_t value,
                                 std::uint64_t state = kFnvOffset) noexcept {
  for (int i = 0; i < 8; ++i) {
    state ^= (value >> (8 * i)) & 0xffU;
    state *= kFnvPrime;
  }
  return state;
}

/// splitmix64 finalizer; used to turn structured keys into well-mixed bits.
inline constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Seed of the named random substream `purpose` under a manifest seed.
inline std::uint64_t substream_seed(std::uint64_t seed,
                                    std::string_view purpose) noexcept {
  return mix64(fnv1a64(purpose, fnv1a64_u64(seed)));
}

/// Counter-based uniform draw in [0, 1) keyed by (stream, a, b). Used where
/// several policies must see the same random numbers for the same event.
inline double keyed_uniform(std::uint64_t stream, std::uint64_t a,
                            std::uint64_t b = 0) noexcept {
  const std::uint64_t bits = mix64(mix64(stream ^ mix64(a)) ^ b);
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kDigits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace cvnet
