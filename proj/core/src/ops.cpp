#include "nsvit/ops.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <iostream>

namespace nsvit::ops {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;
using ConstArr = Eigen::Map<const Eigen::ArrayXf>;
using MutArr = Eigen::Map<Eigen::ArrayXf>;

ConstMap as_mat(const Tensor& t, int r, int c) { return ConstMap(t.data().data(), r, c); }
MutMap as_mat_mut(std::span<float> s, int r, int c) { return MutMap(s.data(), r, c); }

bool tracked(Graph* g, std::initializer_list<const Tensor*> inputs) {
  if (!g) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Rows of a tensor treated as a stack of vectors over its last axis.
int64_t leading_rows(const Tensor& t) {
  NSVIT_REQUIRE(t.rank() >= 1, "op requires rank >= 1");
  return t.numel() / t.shape().back();
}

constexpr float kGeluCoeff = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluCubic = 0.044715f;

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, Graph* g) {
  NSVIT_REQUIRE(a.rank() == 2 && b.rank() == 2 && a.cols() == b.rows(),
                "matmul: incompatible shapes ", a.shape_str(), " x ", b.shape_str());
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = Tensor::zeros({m, n});
  as_mat_mut(out.data_mut(), m, n).noalias() = as_mat(a, m, k) * as_mat(b, k, n);
  if (tracked(g, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    g->record(out, [ac, bc, oc, m, k, n]() mutable {
      ConstMap dc(oc.grad().data(), m, n);
      if (ac.requires_grad()) {
        as_mat_mut(ac.grad_mut(), m, k).noalias() += dc * as_mat(bc, k, n).transpose();
      }
      if (bc.requires_grad()) {
        as_mat_mut(bc.grad_mut(), k, n).noalias() += as_mat(ac, m, k).transpose() * dc;
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b, Graph* g) {
  NSVIT_REQUIRE(a.shape() == b.shape(), "add: shape mismatch ", a.shape_str(), " vs ",
                b.shape_str());
  const auto n = static_cast<size_t>(a.numel());
  Tensor out = Tensor::zeros(a.shape());
  MutArr(out.data_mut().data(), n) =
      ConstArr(a.data().data(), n) + ConstArr(b.data().data(), n);
  if (tracked(g, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    g->record(out, [ac, bc, oc]() mutable {
      if (ac.requires_grad()) ac.accumulate_grad(oc.grad());
      if (bc.requires_grad()) bc.accumulate_grad(oc.grad());
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b, Graph* g) {
  NSVIT_REQUIRE(a.shape() == b.shape(), "mul: shape mismatch ", a.shape_str(), " vs ",
                b.shape_str());
  const auto n = static_cast<size_t>(a.numel());
  Tensor out = Tensor::zeros(a.shape());
  MutArr(out.data_mut().data(), n) =
      ConstArr(a.data().data(), n) * ConstArr(b.data().data(), n);
  if (tracked(g, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    g->record(out, [ac, bc, oc, n]() mutable {
      ConstArr dg(oc.grad().data(), n);
      if (ac.requires_grad()) {
        MutArr(ac.grad_mut().data(), n) += dg * ConstArr(bc.data().data(), n);
      }
      if (bc.requires_grad()) {
        MutArr(bc.grad_mut().data(), n) += dg * ConstArr(ac.data().data(), n);
      }
    });
  }
  return out;
}

Tensor add_rowvec(const Tensor& a, const Tensor& v, Graph* g) {
  NSVIT_REQUIRE(a.rank() == 2 && v.numel() == a.cols(), "add_rowvec: shapes ",
                a.shape_str(), " vs ", v.shape_str());
  const int m = a.rows(), n = a.cols();
  Tensor out = Tensor::zeros(a.shape());
  as_mat_mut(out.data_mut(), m, n) =
      as_mat(a, m, n).rowwise() + Eigen::Map<const Eigen::RowVectorXf>(v.data().data(), n);
  if (tracked(g, {&a, &v})) {
    out.set_requires_grad(true);
    Tensor ac = a, vc = v, oc = out;
    g->record(out, [ac, vc, oc, m, n]() mutable {
      if (ac.requires_grad()) ac.accumulate_grad(oc.grad());
      if (vc.requires_grad()) {
        auto dg = oc.grad();
        auto gv = vc.grad_mut();
        for (int j = 0; j < n; ++j) {
          double s = 0.0;
          for (int i = 0; i < m; ++i) s += dg[static_cast<size_t>(i) * n + j];
          gv[static_cast<size_t>(j)] += static_cast<float>(s);
        }
      }
    });
  }
  return out;
}

Tensor mul_rowvec(const Tensor& a, const Tensor& v, Graph* g) {
  NSVIT_REQUIRE(a.rank() == 2 && v.numel() == a.cols(), "mul_rowvec: shapes ",
                a.shape_str(), " vs ", v.shape_str());
  const int m = a.rows(), n = a.cols();
  Tensor out = Tensor::zeros(a.shape());
  {
    const float* src = a.data().data();
    const float* vec = v.data().data();
    float* dst = out.data_mut().data();
    for (int i = 0; i < m; ++i) {
      MutArr(dst + static_cast<size_t>(i) * n, n) =
          ConstArr(src + static_cast<size_t>(i) * n, n) * ConstArr(vec, n);
    }
  }
  if (tracked(g, {&a, &v})) {
    out.set_requires_grad(true);
    Tensor ac = a, vc = v, oc = out;
    g->record(out, [ac, vc, oc, m, n]() mutable {
      auto dg = oc.grad();
      if (ac.requires_grad()) {
        auto ga = ac.grad_mut();
        const float* vec = vc.data().data();
        for (int i = 0; i < m; ++i) {
          MutArr(ga.data() + static_cast<size_t>(i) * n, n) +=
              ConstArr(dg.data() + static_cast<size_t>(i) * n, n) * ConstArr(vec, n);
        }
      }
      if (vc.requires_grad()) {
        auto gv = vc.grad_mut();
        const float* src = ac.data().data();
        for (int j = 0; j < n; ++j) {
          double s = 0.0;
          for (int i = 0; i < m; ++i) {
            const size_t off = static_cast<size_t>(i) * n + j;
            s += static_cast<double>(dg[off]) * src[off];
          }
          gv[static_cast<size_t>(j)] += static_cast<float>(s);
        }
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, float s, Graph* g) {
  const auto n = static_cast<size_t>(a.numel());
  Tensor out = Tensor::zeros(a.shape());
  MutArr(out.data_mut().data(), n) = ConstArr(a.data().data(), n) * s;
  if (tracked(g, {&a})) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    g->record(out, [ac, oc, s, n]() mutable {
      MutArr(ac.grad_mut().data(), n) += ConstArr(oc.grad().data(), n) * s;
    });
  }
  return out;
}

Tensor softmax(const Tensor& a, Graph* g) {
  const int n = a.shape().back();
  const int64_t rows = leading_rows(a);
  Tensor out = Tensor::zeros(a.shape());
  const float* src = a.data().data();
  float* dst = out.data_mut().data();
  for (int64_t r = 0; r < rows; ++r) {
    ConstArr x(src + r * n, n);
    MutArr y(dst + r * n, n);
    y = (x - x.maxCoeff()).exp();
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += y[i];
    const double inv = 1.0 / s;
    for (int i = 0; i < n; ++i) y[i] = static_cast<float>(y[i] * inv);
  }
  if (tracked(g, {&a})) {
    out.set_requires_grad(true);
    Tensor ac = a, oc = out;
    g->record(out, [ac, oc, rows, n]() mutable {
      auto dg = oc.grad();
      auto ga = ac.grad_mut();
      const float* y = oc.data().data();
      for (int64_t r = 0; r < rows; ++r) {
        const float* yr = y + r * n;
        const float* dr = dg.data() + r * n;
        double dot = 0.0;
        for (int i = 0; i < n; ++i) dot += static_cast<double>(dr[i]) * yr[i];
        float* gr = ga.data() + r * n;
        for (int i = 0; i < n; ++i) {
          gr[i] += yr[i] * static_cast<float>(dr[i] - dot);
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps,
                  Graph* g) {
  const int n = x.shape().back();
  NSVIT_REQUIRE(gamma.numel() == n && beta.numel() == n,
                "layer_norm: gamma/beta length must match last axis ", n, ", got ",
                gamma.shape_str(), " and ", beta.shape_str());
  NSVIT_REQUIRE(eps > 0.0f, "layer_norm: eps must be positive");
  const int64_t rows = leading_rows(x);
  Tensor out = Tensor::zeros(x.shape());
  auto stats = std::make_shared<std::vector<double>>(static_cast<size_t>(rows) * 2);
  const float* src = x.data().data();
  const float* gm = gamma.data().data();
  const float* bt = beta.data().data();
  float* dst = out.data_mut().data();
  for (int64_t r = 0; r < rows; ++r) {
    const float* xr = src + r * n;
    double mu = 0.0;
    for (int i = 0; i < n; ++i) mu += xr[i];
    mu /= n;
    double var = 0.0;
    for (int i = 0; i < n; ++i) {
      const double d = xr[i] - mu;
      var += d * d;
    }
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    (*stats)[static_cast<size_t>(r) * 2] = mu;
    (*stats)[static_cast<size_t>(r) * 2 + 1] = inv;
    float* yr = dst + r * n;
    for (int i = 0; i < n; ++i) {
      yr[i] = static_cast<float>((xr[i] - mu) * inv) * gm[i] + bt[i];
    }
  }
  if (tracked(g, {&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    Tensor xc = x, gc = gamma, bc = beta, oc = out;
    g->record(out, [xc, gc, bc, oc, stats, rows, n]() mutable {
      auto dg = oc.grad();
      const float* src = xc.data().data();
      const float* gm = gc.data().data();
      const bool need_x = xc.requires_grad();
      const bool need_g = gc.requires_grad();
      const bool need_b = bc.requires_grad();
      std::span<float> gx, gg, gb;
      if (need_x) gx = xc.grad_mut();
      if (need_g) gg = gc.grad_mut();
      if (need_b) gb = bc.grad_mut();
      std::vector<double> xhat(static_cast<size_t>(n));
      for (int64_t r = 0; r < rows; ++r) {
        const double mu = (*stats)[static_cast<size_t>(r) * 2];
        const double inv = (*stats)[static_cast<size_t>(r) * 2 + 1];
        const float* xr = src + r * n;
        const float* dr = dg.data() + r * n;
        for (int i = 0; i < n; ++i) xhat[static_cast<size_t>(i)] = (xr[i] - mu) * inv;
        if (need_b) {
          for (int i = 0; i < n; ++i) gb[static_cast<size_t>(i)] += dr[i];
        }
        if (need_g) {
          for (int i = 0; i < n; ++i) {
            gg[static_cast<size_t>(i)] +=
                static_cast<float>(dr[i] * xhat[static_cast<size_t>(i)]);
          }
        }
        if (need_x) {
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (int i = 0; i < n; ++i) {
            const double dxh = static_cast<double>(dr[i]) * gm[i];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[static_cast<size_t>(i)];
          }
          mean_dxhat /= n;
          mean_dxhat_xhat /= n;
          float* gr = gx.data() + r * n;
          for (int i = 0; i < n; ++i) {
            const double dxh = static_cast<double>(dr[i]) * gm[i];
            gr[i] += static_cast<float>(
                inv * (dxh - mean_dxhat - xhat[static_cast<size_t>(i)] * mean_dxhat_xhat));
          }
        }
      }
    });
  }
  return out;
}

Tensor gelu(const Tensor& x, Graph* g) {
  const auto n = static_cast<size_t>(x.numel());
  Tensor out = Tensor::zeros(x.shape());
  {
    ConstArr xv(x.data().data(), n);
    MutArr y(out.data_mut().data(), n);
    y = 0.5f * xv * (1.0f + (kGeluCoeff * (xv + kGeluCubic * xv.cube())).tanh());
  }
  if (tracked(g, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    g->record(out, [xc, oc, n]() mutable {
      ConstArr xv(xc.data().data(), n);
      ConstArr dg(oc.grad().data(), n);
      MutArr gx(xc.grad_mut().data(), n);
      Eigen::ArrayXf t = (kGeluCoeff * (xv + kGeluCubic * xv.cube())).tanh();
      gx += dg * (0.5f * (1.0f + t) +
                  0.5f * xv * (1.0f - t.square()) * kGeluCoeff *
                      (1.0f + 3.0f * kGeluCubic * xv.square()));
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, std::vector<int> shape, Graph* g) {
  Tensor out = Tensor::from_data(std::move(shape), {x.data().begin(), x.data().end()});
  NSVIT_REQUIRE(out.numel() == x.numel(), "reshape: element count mismatch ",
                x.shape_str(), " -> ", out.shape_str());
  if (tracked(g, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    g->record(out, [xc, oc]() mutable { xc.accumulate_grad(oc.grad()); });
  }
  return out;
}

Tensor transpose(const Tensor& x, Graph* g) {
  NSVIT_REQUIRE(x.rank() == 2, "transpose: rank-2 only, got ", x.shape_str());
  const int m = x.rows(), n = x.cols();
  Tensor out = Tensor::zeros({n, m});
  as_mat_mut(out.data_mut(), n, m) = as_mat(x, m, n).transpose();
  if (tracked(g, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    g->record(out, [xc, oc, m, n]() mutable {
      as_mat_mut(xc.grad_mut(), m, n) += ConstMap(oc.grad().data(), n, m).transpose();
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, int r0, int count, Graph* g) {
  NSVIT_REQUIRE(x.rank() == 2 && r0 >= 0 && count > 0 && r0 + count <= x.rows(),
                "slice_rows: range [", r0, ", ", r0 + count, ") out of ", x.shape_str());
  const int n = x.cols();
  Tensor out = Tensor::zeros({count, n});
  std::memcpy(out.data_mut().data(), x.data().data() + static_cast<size_t>(r0) * n,
              static_cast<size_t>(count) * n * sizeof(float));
  if (tracked(g, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    g->record(out, [xc, oc, r0, count, n]() mutable {
      auto gx = xc.grad_mut();
      auto dg = oc.grad();
      MutArr(gx.data() + static_cast<size_t>(r0) * n, static_cast<size_t>(count) * n) +=
          ConstArr(dg.data(), static_cast<size_t>(count) * n);
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, int c0, int count, Graph* g) {
  NSVIT_REQUIRE(x.rank() == 2 && c0 >= 0 && count > 0 && c0 + count <= x.cols(),
                "slice_cols: range [", c0, ", ", c0 + count, ") out of ", x.shape_str());
  const int m = x.rows(), n = x.cols();
  Tensor out = Tensor::zeros({m, count});
  as_mat_mut(out.data_mut(), m, count) = as_mat(x, m, n).middleCols(c0, count);
  if (tracked(g, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    g->record(out, [xc, oc, c0, count, m, n]() mutable {
      MutMap gx(xc.grad_mut().data(), m, n);
      gx.middleCols(c0, count) += ConstMap(oc.grad().data(), m, count);
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts, Graph* g) {
  NSVIT_REQUIRE(!parts.empty(), "concat_rows: empty part list");
  const int n = parts.front().cols();
  int m = 0;
  bool track = false;
  for (const Tensor& p : parts) {
    NSVIT_REQUIRE(p.rank() == 2 && p.cols() == n, "concat_rows: column mismatch ",
                  p.shape_str());
    m += p.rows();
    track = track || p.requires_grad();
  }
  Tensor out = Tensor::zeros({m, n});
  {
    float* dst = out.data_mut().data();
    for (const Tensor& p : parts) {
      std::memcpy(dst, p.data().data(), p.data().size() * sizeof(float));
      dst += p.data().size();
    }
  }
  if (g && track) {
    out.set_requires_grad(true);
    std::vector<Tensor> pc = parts;
    Tensor oc = out;
    g->record(out, [pc, oc]() mutable {
      auto dg = oc.grad();
      size_t off = 0;
      for (Tensor& p : pc) {
        if (p.requires_grad()) {
          p.accumulate_grad(dg.subspan(off, p.data().size()));
        }
        off += p.data().size();
      }
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts, Graph* g) {
  NSVIT_REQUIRE(!parts.empty(), "concat_cols: empty part list");
  const int m = parts.front().rows();
  int n = 0;
  bool track = false;
  for (const Tensor& p : parts) {
    NSVIT_REQUIRE(p.rank() == 2 && p.rows() == m, "concat_cols: row mismatch ",
                  p.shape_str());
    n += p.cols();
    track = track || p.requires_grad();
  }
  Tensor out = Tensor::zeros({m, n});
  {
    MutMap dst = as_mat_mut(out.data_mut(), m, n);
    int c = 0;
    for (const Tensor& p : parts) {
      dst.middleCols(c, p.cols()) = as_mat(p, m, p.cols());
      c += p.cols();
    }
  }
  if (g && track) {
    out.set_requires_grad(true);
    std::vector<Tensor> pc = parts;
    Tensor oc = out;
    g->record(out, [pc, oc, m, n]() mutable {
      ConstMap dg(oc.grad().data(), m, n);
      int c = 0;
      for (Tensor& p : pc) {
        if (p.requires_grad()) {
          MutMap(p.grad_mut().data(), m, p.cols()) += dg.middleCols(c, p.cols());
        }
        c += p.cols();
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& x, Graph* g) {
  double s = 0.0;
  for (float v : x.data()) s += v;
  Tensor out = Tensor::scalar(static_cast<float>(s));
  if (tracked(g, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    g->record(out, [xc, oc]() mutable {
      const float d = oc.grad()[0];
      auto gx = xc.grad_mut();
      MutArr(gx.data(), gx.size()) += d;
    });
  }
  return out;
}

Tensor mean(const Tensor& x, Graph* g) {
  double s = 0.0;
  for (float v : x.data()) s += v;
  const auto n = static_cast<double>(x.numel());
  Tensor out = Tensor::scalar(static_cast<float>(s / n));
  if (tracked(g, {&x})) {
    out.set_requires_grad(true);
    Tensor xc = x, oc = out;
    g->record(out, [xc, oc, n]() mutable {
      const float d = static_cast<float>(oc.grad()[0] / n);
      auto gx = xc.grad_mut();
      MutArr(gx.data(), gx.size()) += d;
    });
  }
  return out;
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b, Graph* g) {
  NSVIT_REQUIRE(a.numel() == b.numel(), "cosine_similarity: size mismatch ",
                a.shape_str(), " vs ", b.shape_str());
  const auto n = static_cast<size_t>(a.numel());
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  double dot = 0.0, na2 = 0.0, nb2 = 0.0;
  for (size_t i = 0; i < n; ++i) {
    dot += static_cast<double>(pa[i]) * pb[i];
    na2 += static_cast<double>(pa[i]) * pa[i];
    nb2 += static_cast<double>(pb[i]) * pb[i];
  }
  const double na = std::sqrt(na2), nb = std::sqrt(nb2);
  const bool degenerate = na == 0.0 || nb == 0.0;
  if (degenerate) {
    std::cerr << "[nsvit] warning: cosine_similarity of zero-norm vector, "
                 "defining similarity as 0\n";
  }
  const double cosv = degenerate ? 0.0 : dot / (na * nb);
  Tensor out = Tensor::scalar(static_cast<float>(cosv));
  if (tracked(g, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor ac = a, bc = b, oc = out;
    g->record(out, [ac, bc, oc, n, na, nb, cosv, degenerate]() mutable {
      if (degenerate) return;
      const double d = oc.grad()[0];
      const float* pa = ac.data().data();
      const float* pb = bc.data().data();
      if (ac.requires_grad()) {
        auto ga = ac.grad_mut();
        const double inv_ab = 1.0 / (na * nb);
        const double inv_aa = cosv / (na * na);
        for (size_t i = 0; i < n; ++i) {
          ga[i] += static_cast<float>(d * (pb[i] * inv_ab - pa[i] * inv_aa));
        }
      }
      if (bc.requires_grad()) {
        auto gb = bc.grad_mut();
        const double inv_ab = 1.0 / (na * nb);
        const double inv_bb = cosv / (nb * nb);
        for (size_t i = 0; i < n; ++i) {
          gb[i] += static_cast<float>(d * (pa[i] * inv_ab - pb[i] * inv_bb));
        }
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, int label, Graph* g) {
  NSVIT_REQUIRE(logits.rank() == 1 || (logits.rank() == 2 && logits.rows() == 1),
                "cross_entropy: expected a single logit vector, got ", logits.shape_str());
  const int k = static_cast<int>(logits.numel());
  NSVIT_REQUIRE(label >= 0 && label < k, "cross_entropy: label ", label,
                " out of range [0, ", k, ")");
  const float* z = logits.data().data();
  float zmax = z[0];
  for (int i = 1; i < k; ++i) zmax = std::max(zmax, z[i]);
  double se = 0.0;
  for (int i = 0; i < k; ++i) se += std::exp(static_cast<double>(z[i]) - zmax);
  const double lse = zmax + std::log(se);
  Tensor out = Tensor::scalar(static_cast<float>(lse - z[label]));
  if (tracked(g, {&logits})) {
    out.set_requires_grad(true);
    Tensor lc = logits, oc = out;
    g->record(out, [lc, oc, label, k, zmax, se]() mutable {
      const float d = oc.grad()[0];
      const float* z = lc.data().data();
      auto gl = lc.grad_mut();
      for (int i = 0; i < k; ++i) {
        const double p = std::exp(static_cast<double>(z[i]) - zmax) / se;
        gl[static_cast<size_t>(i)] +=
            d * static_cast<float>(p - (i == label ? 1.0 : 0.0));
      }
    });
  }
  return out;
}

}  // namespace nsvit::ops
