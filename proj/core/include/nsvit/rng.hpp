#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace nsvit {

// Deterministic random stream. All experiment randomness flows from one master
// seed through named substreams (Rng::stream), so individual pipeline stages can
// rerun independently without disturbing each other's draws.
//
// Value mapping (uniform, normal, shuffle) is implemented here rather than with
// std::*_distribution so that sequences are identical across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  // Substream derived from a master seed and a label, e.g. stream(7, "attack").
  static Rng stream(uint64_t master_seed, std::string_view name);
  // Indexed substream for per-item fan-out, e.g. one stream per image.
  static Rng stream(uint64_t master_seed, std::string_view name, uint64_t index);

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform01();
  // Uniform in [lo, hi).
  double uniform(double lo, double hi);
  // Uniform integer in [0, n). n must be positive.
  uint64_t uniform_int(uint64_t n);
  // Standard normal via Box-Muller.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  // Normal resampled until |x| <= 2*stddev (ViT-style truncated init).
  double truncated_normal(double stddev);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (size_t i = v.size() - 1; i > 0; --i) {
      size_t j = static_cast<size_t>(uniform_int(i + 1));
      std::swap(v[i], v[j]);
    }
  }

  // First k elements of a seeded permutation of [0, n).
  std::vector<size_t> sample_indices(size_t n, size_t k);

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// FNV-1a, used to fold substream names into seeds.
uint64_t fnv1a64(std::string_view s);
// SplitMix64 finalizer; decorrelates seed ^ name-hash combinations.
uint64_t splitmix64(uint64_t x);

}  // namespace nsvit
