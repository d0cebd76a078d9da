#pragma once

// Double-precision forward-only implementations of the op set, used as
// independent oracles for the float32 library under test.

#include <algorithm>
#include <cmath>
#include <vector>

namespace f64 {

struct Mat {
  int rows = 0, cols = 0;
  std::vector<double> v;  // row-major

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {}
  double& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
  size_t size() const { return v.size(); }
};

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat out(a.rows, b.cols);
  for (int i = 0; i < a.rows; ++i)
    for (int k = 0; k < a.cols; ++k) {
      const double av = a.at(i, k);
      for (int j = 0; j < b.cols; ++j) out.at(i, j) += av * b.at(k, j);
    }
  return out;
}

inline Mat add(const Mat& a, const Mat& b) {
  Mat out = a;
  for (size_t i = 0; i < out.size(); ++i) out.v[i] += b.v[i];
  return out;
}

inline Mat mul(const Mat& a, const Mat& b) {
  Mat out = a;
  for (size_t i = 0; i < out.size(); ++i) out.v[i] *= b.v[i];
  return out;
}

inline Mat add_rowvec(const Mat& a, const Mat& v) {
  Mat out = a;
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) out.at(i, j) += v.v[static_cast<size_t>(j)];
  return out;
}

inline Mat mul_rowvec(const Mat& a, const Mat& v) {
  Mat out = a;
  for (int i = 0; i < a.rows; ++i)
    for (int j = 0; j < a.cols; ++j) out.at(i, j) *= v.v[static_cast<size_t>(j)];
  return out;
}

inline Mat scale(const Mat& a, double s) {
  Mat out = a;
  for (double& x : out.v) x *= s;
  return out;
}

inline Mat softmax(const Mat& a) {
  Mat out = a;
  for (int i = 0; i < a.rows; ++i) {
    double mx = out.at(i, 0);
    for (int j = 1; j < a.cols; ++j) mx = std::max(mx, out.at(i, j));
    double s = 0.0;
    for (int j = 0; j < a.cols; ++j) {
      out.at(i, j) = std::exp(out.at(i, j) - mx);
      s += out.at(i, j);
    }
    for (int j = 0; j < a.cols; ++j) out.at(i, j) /= s;
  }
  return out;
}

inline Mat layer_norm(const Mat& x, const Mat& gamma, const Mat& beta, double eps) {
  Mat out = x;
  for (int i = 0; i < x.rows; ++i) {
    double mu = 0.0;
    for (int j = 0; j < x.cols; ++j) mu += x.at(i, j);
    mu /= x.cols;
    double var = 0.0;
    for (int j = 0; j < x.cols; ++j) {
      const double d = x.at(i, j) - mu;
      var += d * d;
    }
    var /= x.cols;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < x.cols; ++j) {
      out.at(i, j) = (x.at(i, j) - mu) * inv * gamma.v[static_cast<size_t>(j)] +
                     beta.v[static_cast<size_t>(j)];
    }
  }
  return out;
}

inline double gelu1(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double a = 0.044715;
  return 0.5 * x * (1.0 + std::tanh(k * (x + a * x * x * x)));
}

inline Mat gelu(const Mat& x) {
  Mat out = x;
  for (double& v : out.v) v = gelu1(v);
  return out;
}

inline Mat transpose(const Mat& x) {
  Mat out(x.cols, x.rows);
  for (int i = 0; i < x.rows; ++i)
    for (int j = 0; j < x.cols; ++j) out.at(j, i) = x.at(i, j);
  return out;
}

inline Mat slice_rows(const Mat& x, int r0, int count) {
  Mat out(count, x.cols);
  for (int i = 0; i < count; ++i)
    for (int j = 0; j < x.cols; ++j) out.at(i, j) = x.at(r0 + i, j);
  return out;
}

inline Mat slice_cols(const Mat& x, int c0, int count) {
  Mat out(x.rows, count);
  for (int i = 0; i < x.rows; ++i)
    for (int j = 0; j < count; ++j) out.at(i, j) = x.at(i, c0 + j);
  return out;
}

inline Mat concat_rows(const std::vector<Mat>& parts) {
  int rows = 0;
  for (const Mat& p : parts) rows += p.rows;
  Mat out(rows, parts.front().cols);
  int r = 0;
  for (const Mat& p : parts) {
    for (int i = 0; i < p.rows; ++i)
      for (int j = 0; j < p.cols; ++j) out.at(r + i, j) = p.at(i, j);
    r += p.rows;
  }
  return out;
}

inline Mat concat_cols(const std::vector<Mat>& parts) {
  int cols = 0;
  for (const Mat& p : parts) cols += p.cols;
  Mat out(parts.front().rows, cols);
  int c = 0;
  for (const Mat& p : parts) {
    for (int i = 0; i < p.rows; ++i)
      for (int j = 0; j < p.cols; ++j) out.at(i, c + j) = p.at(i, j);
    c += p.cols;
  }
  return out;
}

inline double sum(const Mat& x) {
  double s = 0.0;
  for (double v : x.v) s += v;
  return s;
}

inline double mean(const Mat& x) { return sum(x) / static_cast<double>(x.size()); }

inline double cosine(const Mat& a, const Mat& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a.v[i] * b.v[i];
    na += a.v[i] * a.v[i];
    nb += b.v[i] * b.v[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline double cross_entropy(const Mat& logits, int label) {
  double mx = logits.v[0];
  for (double v : logits.v) mx = std::max(mx, v);
  double se = 0.0;
  for (double v : logits.v) se += std::exp(v - mx);
  return mx + std::log(se) - logits.v[static_cast<size_t>(label)];
}

}  // namespace f64
