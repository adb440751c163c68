#pragma once

// Named, replayable randomness. Every consumer draws from its own stream,
// derived from (master seed, stream name[, index]), so any single stream can
// be reproduced in isolation. Distribution mappers are implemented here
// rather than with std::*_distribution, whose output is implementation
// defined; mt19937_64 itself is pinned by the standard.

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace vistill {

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t master, std::string_view name) {
  return splitmix64(splitmix64(master) ^ fnv1a64(name));
}

inline uint64_t derive_seed(uint64_t master, std::string_view name, uint64_t index) {
  return splitmix64(derive_seed(master, name) ^ splitmix64(index + 0x5bf03635ull));
}

class RngStream {
 public:
  explicit RngStream(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  /// uniform in [0,1), 53-bit resolution
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// standard normal via Box-Muller (two uniforms per draw)
  double normal() {
    const double u1 = 1.0 - uniform();  // (0,1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// integer in [lo, hi)
  int64_t randint(int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(uniform() * static_cast<double>(hi - lo));
  }

  template <class V>
  void shuffle(std::vector<V>& v) {
    for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[static_cast<size_t>(randint(0, static_cast<int64_t>(i)))]);
  }

 private:
  std::mt19937_64 eng_;
};

/// Hands out named streams under one master seed.
struct RngHub {
  uint64_t master = 0;
  RngStream stream(std::string_view name) const { return RngStream(derive_seed(master, name)); }
  RngStream stream(std::string_view name, uint64_t index) const { return RngStream(derive_seed(master, name, index)); }
};

}  // namespace vistill
