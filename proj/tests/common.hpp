#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "nsvit/rng.hpp"
#include "nsvit/tensor.hpp"

namespace testutil {

inline nsvit::Tensor random_tensor(std::vector<int> shape, nsvit::Rng& rng,
                                   double lo = -1.0, double hi = 1.0,
                                   bool requires_grad = false) {
  nsvit::Tensor t = nsvit::Tensor::zeros(std::move(shape), requires_grad);
  for (float& v : t.data_mut()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

inline double max_abs_diff(std::span<const float> a, std::span<const double> b) {
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

// Relative error with a magnitude floor so near-cancelled components are held
// to a proportional absolute standard instead of blowing up the ratio.
inline double rel_err(double analytic, double reference, double floor_scale) {
  const double denom =
      std::max({std::abs(analytic), std::abs(reference), floor_scale, 1e-12});
  return std::abs(analytic - reference) / denom;
}

inline double rms(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return v.empty() ? 0.0 : std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace testutil
