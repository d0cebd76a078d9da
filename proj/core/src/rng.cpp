#include "nsvit/rng.hpp"

#include <cmath>

#include "nsvit/errors.hpp"

namespace nsvit {

uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

Rng Rng::stream(uint64_t master_seed, std::string_view name) {
  return Rng(splitmix64(master_seed ^ fnv1a64(name)));
}

Rng Rng::stream(uint64_t master_seed, std::string_view name, uint64_t index) {
  return Rng(splitmix64(splitmix64(master_seed ^ fnv1a64(name)) + index));
}

double Rng::uniform01() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

uint64_t Rng::uniform_int(uint64_t n) {
  NSVIT_REQUIRE(n > 0, "uniform_int: n must be positive");
  // Rejection sampling to avoid modulo bias.
  uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u, v;
  do {
    u = uniform01();
  } while (u <= 0.0);
  v = uniform01();
  double r = std::sqrt(-2.0 * std::log(u));
  double theta = 2.0 * M_PI * v;
  spare_ = r * std::sin(theta);
  have_spare_ = true;
  return r * std::cos(theta);
}

double Rng::truncated_normal(double stddev) {
  for (;;) {
    double x = normal();
    if (std::fabs(x) <= 2.0) return x * stddev;
  }
}

std::vector<size_t> Rng::sample_indices(size_t n, size_t k) {
  NSVIT_REQUIRE(k <= n, "sample_indices: k > n");
  std::vector<size_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = i;
  shuffle(idx);
  idx.resize(k);
  return idx;
}

}  // namespace nsvit
