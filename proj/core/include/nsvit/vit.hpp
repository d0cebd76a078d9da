#pragma once

#include <array>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "nsvit/rng.hpp"
#include "nsvit/tensor.hpp"

namespace nsvit {

// The five tappable sites inside every encoder block.
enum class Site : int { kAttnQkv = 0, kAttnProj = 1, kMlpFc1 = 2, kMlpFc2 = 3, kAdd1 = 4 };

inline constexpr std::array<Site, 5> kAllSites = {Site::kAttnQkv, Site::kAttnProj,
                                                  Site::kMlpFc1, Site::kMlpFc2,
                                                  Site::kAdd1};

std::string_view site_name(Site site);          // "attn.qkv", ..., "add_1"
Site site_from_name(std::string_view name);     // contract error on unknown name

struct VitConfig {
  int image_size = 32;  // H = W
  int channels = 3;
  int patch_size = 4;
  int depth = 6;
  int embed_dim = 64;
  int heads = 4;
  int mlp_ratio = 4;
  int num_classes = 10;
  float layernorm_eps = 1e-6f;

  void validate() const;
  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  int seq_len() const { return num_patches() + 1; }
  int patch_dim() const { return patch_size * patch_size * channels; }
  int head_dim() const { return embed_dim / heads; }
  int mlp_hidden() const { return mlp_ratio * embed_dim; }
  int site_width(Site site) const;

  bool operator==(const VitConfig&) const = default;
};

struct HookSite {
  int layer = 0;
  Site site = Site::kAttnQkv;

  auto operator<=>(const HookSite&) const = default;
};

std::string hook_site_str(const HookSite& hs);  // e.g. "layer2.mlp.fc1"

// Per-forward capture of tapped activations, per-layer CLS vectors and logits.
struct ActivationTrace {
  std::map<HookSite, Tensor> activations;  // (N+1) x site_width each
  std::map<HookSite, Tensor> gradients;    // filled by materialize_gradients()
  std::vector<Tensor> cls;                 // cls[l-1] = z_cls^l, 1 x D, l = 1..depth
  Tensor logits;                           // K

  // Copies accumulated tap gradients out of the autodiff graph; requires that
  // the forward ran in capture mode with a graph and backward() has been run.
  void materialize_gradients();
};

// Directive to multiply the listed channels of tapped activations by alpha.
struct PatchPlan {
  struct SitePatch {
    std::vector<int> channels;
    float alpha = 1.0f;
  };
  std::map<HookSite, SitePatch> sites;

  void validate(const VitConfig& cfg) const;
  bool empty() const { return sites.empty(); }
};

struct LayerParams {
  Tensor ln1_gamma, ln1_beta;
  Tensor qkv_w, qkv_b;    // D x 3D, 3D
  Tensor proj_w, proj_b;  // D x D, D
  Tensor ln2_gamma, ln2_beta;
  Tensor fc1_w, fc1_b;    // D x ratio*D, ratio*D
  Tensor fc2_w, fc2_b;    // ratio*D x D, D
};

struct VitParams {
  Tensor patch_w, patch_b;  // P^2*C x D, D
  Tensor pos_embed;         // (N+1) x D
  Tensor cls_token;         // 1 x D
  std::vector<LayerParams> layers;
  Tensor lnf_gamma, lnf_beta;
  Tensor head_w, head_b;  // D x K, K

  static VitParams init(const VitConfig& cfg, Rng& rng);

  // Stable (name, tensor) enumeration used by checkpoints and optimizers.
  std::vector<std::pair<std::string, Tensor>> named() const;
  void set_requires_grad(bool value);
  void zero_grads();
  bool all_finite() const;
  int64_t count() const;
  VitParams clone() const;
  void validate(const VitConfig& cfg) const;
};

class VitModel {
 public:
  VitModel(VitConfig cfg, VitParams params);
  static VitModel random_init(const VitConfig& cfg, Rng& rng);

  const VitConfig& config() const { return cfg_; }
  const VitParams& params() const { return params_; }
  VitParams& params_mut() { return params_; }

  Tensor patchify(const Tensor& image, Graph* g = nullptr) const;
  Tensor embed(const Tensor& patches, Graph* g = nullptr) const;
  Tensor encoder_block(const Tensor& z, int layer, ActivationTrace* trace = nullptr,
                       const PatchPlan* patch = nullptr, Graph* g = nullptr) const;

  // Full pass: patchify -> embed -> depth blocks -> final LN -> head on CLS.
  // Returns logits (rank-1, K). Capture mode iff trace != nullptr; when both
  // trace and g are given, tapped tensors join the graph so backward() leaves
  // per-site gradients retrievable via trace->materialize_gradients().
  Tensor forward(const Tensor& image, ActivationTrace* trace = nullptr,
                 const PatchPlan* patch = nullptr, Graph* g = nullptr) const;

  // z_cls^l for 1 <= layer <= depth, from a capture-mode forward. With a graph
  // the returned 1 x D tensor is differentiable back to the image (used by the
  // representation-matching attack); a patch plan applies during the pass.
  Tensor cls_embedding(const Tensor& image, int layer, Graph* g = nullptr,
                       const PatchPlan* patch = nullptr) const;

  int predict(const Tensor& image, const PatchPlan* patch = nullptr) const;

 private:
  VitConfig cfg_;
  VitParams params_;
};

}  // namespace nsvit
