#pragma once

// Double-precision reference ViT used as the oracle for the float32 model:
// plain loops, no autodiff, no Eigen. Supports activation patching and
// single-coordinate injection at a tap (for finite-difference tap gradients).

#include <map>
#include <string>
#include <vector>

#include "f64_kit.hpp"
#include "nsvit/vit.hpp"

namespace refvit {

class RefVit {
 public:
  RefVit(const nsvit::VitConfig& cfg, const nsvit::VitParams& p) : cfg_(cfg) {
    for (const auto& [name, t] : p.named()) {
      f64::Mat m;
      if (t.rank() == 2) {
        m = f64::Mat(t.rows(), t.cols());
      } else {
        m = f64::Mat(1, static_cast<int>(t.numel()));
      }
      m.v.assign(t.data().begin(), t.data().end());
      index_[name] = mats_.size();
      mats_.push_back(std::move(m));
    }
  }

  f64::Mat& mat(const std::string& name) { return mats_[index_.at(name)]; }
  const f64::Mat& mat(const std::string& name) const { return mats_[index_.at(name)]; }
  size_t num_params() const { return mats_.size(); }
  f64::Mat& mat_by_index(size_t i) { return mats_[i]; }

  struct Injection {
    nsvit::HookSite hs;
    int row = 0, col = 0;
    double delta = 0.0;
  };

  struct Out {
    f64::Mat logits;                          // 1 x K
    std::vector<f64::Mat> cls;                // depth entries, 1 x D
    std::map<nsvit::HookSite, f64::Mat> taps;  // (N+1) x width
  };

  f64::Mat patchify(const std::vector<double>& image) const {
    const int C = cfg_.channels, H = cfg_.image_size, P = cfg_.patch_size;
    const int G = cfg_.grid(), pd = cfg_.patch_dim();
    f64::Mat out(cfg_.num_patches(), pd);
    for (int pr = 0; pr < G; ++pr)
      for (int pc = 0; pc < G; ++pc)
        for (int r = 0; r < P; ++r)
          for (int c = 0; c < P; ++c)
            for (int ch = 0; ch < C; ++ch)
              out.at(pr * G + pc, (r * P + c) * C + ch) =
                  image[(static_cast<size_t>(ch) * H + pr * P + r) * H + pc * P + c];
    return out;
  }

  Out forward(const std::vector<double>& image, const nsvit::PatchPlan* patch = nullptr,
              const Injection* inject = nullptr) const {
    using namespace f64;
    Out out;
    const int D = cfg_.embed_dim, dh = cfg_.head_dim();
    const double eps = cfg_.layernorm_eps;

    Mat patches = patchify(image);
    Mat proj = add_rowvec(matmul(patches, mat("patch.w")), mat("patch.b"));
    Mat z = add(concat_rows({mat("cls_token"), proj}), mat("pos_embed"));

    auto tap = [&](Mat t, int layer, nsvit::Site site) {
      const nsvit::HookSite hs{layer, site};
      if (patch) {
        auto it = patch->sites.find(hs);
        if (it != patch->sites.end()) {
          for (int c : it->second.channels)
            for (int r = 0; r < t.rows; ++r) t.at(r, c) *= it->second.alpha;
        }
      }
      if (inject && inject->hs == hs) t.at(inject->row, inject->col) += inject->delta;
      out.taps[hs] = t;
      return t;
    };

    for (int l = 0; l < cfg_.depth; ++l) {
      const std::string base = "layer" + std::to_string(l) + ".";
      Mat ln1 = layer_norm(z, mat(base + "ln1.gamma"), mat(base + "ln1.beta"), eps);
      Mat qkv_pre = tap(matmul(ln1, mat(base + "qkv.w")), l, nsvit::Site::kAttnQkv);
      Mat qkv = add_rowvec(qkv_pre, mat(base + "qkv.b"));
      Mat q = slice_cols(qkv, 0, D), k = slice_cols(qkv, D, D), v = slice_cols(qkv, 2 * D, D);
      std::vector<Mat> heads;
      const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
      for (int i = 0; i < cfg_.heads; ++i) {
        Mat qi = slice_cols(q, i * dh, dh);
        Mat ki = slice_cols(k, i * dh, dh);
        Mat vi = slice_cols(v, i * dh, dh);
        Mat att = softmax(scale(matmul(qi, transpose(ki)), inv_sqrt));
        heads.push_back(matmul(att, vi));
      }
      Mat proj_pre =
          tap(matmul(concat_cols(heads), mat(base + "proj.w")), l, nsvit::Site::kAttnProj);
      Mat z1 = add(z, add_rowvec(proj_pre, mat(base + "proj.b")));
      Mat ln2 = layer_norm(z1, mat(base + "ln2.gamma"), mat(base + "ln2.beta"), eps);
      Mat h1 = tap(gelu(add_rowvec(matmul(ln2, mat(base + "fc1.w")), mat(base + "fc1.b"))),
                   l, nsvit::Site::kMlpFc1);
      Mat fc2_pre = tap(matmul(h1, mat(base + "fc2.w")), l, nsvit::Site::kMlpFc2);
      Mat mlp_out = add_rowvec(fc2_pre, mat(base + "fc2.b"));
      z = tap(add(z1, mlp_out), l, nsvit::Site::kAdd1);
      out.cls.push_back(slice_rows(z, 0, 1));
    }
    Mat lnf = layer_norm(z, mat("lnf.gamma"), mat("lnf.beta"), eps);
    out.logits = add_rowvec(matmul(slice_rows(lnf, 0, 1), mat("head.w")), mat("head.b"));
    return out;
  }

  double ce_loss(const std::vector<double>& image, int label,
                 const nsvit::PatchPlan* patch = nullptr,
                 const Injection* inject = nullptr) const {
    return f64::cross_entropy(forward(image, patch, inject).logits, label);
  }

 private:
  nsvit::VitConfig cfg_;
  std::vector<f64::Mat> mats_;
  std::map<std::string, size_t> index_;
};

}  // namespace refvit
