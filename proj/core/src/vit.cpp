#include "nsvit/vit.hpp"

#include <cmath>
#include <cstring>
#include <utility>

#include "nsvit/errors.hpp"
#include "nsvit/ops.hpp"

namespace nsvit {

std::string_view site_name(Site site) {
  switch (site) {
    case Site::kAttnQkv: return "attn.qkv";
    case Site::kAttnProj: return "attn.proj";
    case Site::kMlpFc1: return "mlp.fc1";
    case Site::kMlpFc2: return "mlp.fc2";
    case Site::kAdd1: return "add_1";
  }
  throw ContractError("site_name: invalid site enum value");
}

Site site_from_name(std::string_view name) {
  for (Site s : kAllSites) {
    if (site_name(s) == name) return s;
  }
  throw ContractError(detail::concat("unknown site name \"", name,
                                     "\"; expected one of attn.qkv, attn.proj, "
                                     "mlp.fc1, mlp.fc2, add_1"));
}

std::string hook_site_str(const HookSite& hs) {
  return detail::concat("layer", hs.layer, ".", site_name(hs.site));
}

void VitConfig::validate() const {
  NSVIT_REQUIRE(image_size > 0 && channels > 0 && patch_size > 0,
                "config: image_size, channels, patch_size must be positive");
  NSVIT_REQUIRE(image_size % patch_size == 0, "config: patch_size ", patch_size,
                " must divide image_size ", image_size);
  NSVIT_REQUIRE(depth > 0, "config: depth must be positive");
  NSVIT_REQUIRE(embed_dim > 0 && heads > 0, "config: embed_dim and heads must be positive");
  NSVIT_REQUIRE(embed_dim % heads == 0, "config: heads ", heads, " must divide embed_dim ",
                embed_dim);
  NSVIT_REQUIRE(mlp_ratio > 0, "config: mlp_ratio must be positive");
  NSVIT_REQUIRE(num_classes > 0, "config: num_classes must be positive");
  NSVIT_REQUIRE(layernorm_eps > 0.0f, "config: layernorm_eps must be positive");
}

int VitConfig::site_width(Site site) const {
  switch (site) {
    case Site::kAttnQkv: return 3 * embed_dim;
    case Site::kAttnProj: return embed_dim;
    case Site::kMlpFc1: return mlp_hidden();
    case Site::kMlpFc2: return embed_dim;
    case Site::kAdd1: return embed_dim;
  }
  throw ContractError("site_width: invalid site enum value");
}

void ActivationTrace::materialize_gradients() {
  gradients.clear();
  for (const auto& [hs, act] : activations) {
    NSVIT_REQUIRE(act.has_grad(), "trace gradient missing at ", hook_site_str(hs),
                  "; run a captured forward with a graph and call backward first");
    gradients.emplace(
        hs, Tensor::from_data(act.shape(), {act.grad().begin(), act.grad().end()}));
  }
}

void PatchPlan::validate(const VitConfig& cfg) const {
  for (const auto& [hs, sp] : sites) {
    NSVIT_REQUIRE(hs.layer >= 0 && hs.layer < cfg.depth, "patch plan: layer ", hs.layer,
                  " out of [0, ", cfg.depth, ")");
    NSVIT_REQUIRE(sp.alpha >= 0.0f, "patch plan: alpha must be >= 0 at ",
                  hook_site_str(hs));
    const int width = cfg.site_width(hs.site);
    for (int c : sp.channels) {
      NSVIT_REQUIRE(c >= 0 && c < width, "patch plan: channel ", c, " out of [0, ",
                    width, ") at ", hook_site_str(hs));
    }
  }
}

namespace {

Tensor trunc_normal(std::vector<int> shape, float stddev, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (float& v : t.data_mut()) v = static_cast<float>(rng.truncated_normal(stddev));
  return t;
}

constexpr float kInitStd = 0.02f;

// Records the tap into the trace (post-patch values) and applies the alpha
// multiplier on the listed channels so it affects all downstream computation.
Tensor tap_site(Tensor t, int layer, Site site, ActivationTrace* trace,
                const PatchPlan* patch, Graph* g) {
  if (patch) {
    auto it = patch->sites.find(HookSite{layer, site});
    if (it != patch->sites.end()) {
      Tensor mask = Tensor::full({t.cols()}, 1.0f);
      auto m = mask.data_mut();
      for (int c : it->second.channels) m[static_cast<size_t>(c)] = it->second.alpha;
      t = ops::mul_rowvec(t, mask, g);
    }
  }
  if (trace) {
    if (g) t.set_requires_grad(true);
    trace->activations.insert_or_assign(HookSite{layer, site}, t);
  }
  return t;
}

}  // namespace

VitParams VitParams::init(const VitConfig& cfg, Rng& rng) {
  cfg.validate();
  const int D = cfg.embed_dim, Hm = cfg.mlp_hidden();
  VitParams p;
  p.patch_w = trunc_normal({cfg.patch_dim(), D}, kInitStd, rng);
  p.patch_b = Tensor::zeros({D});
  p.pos_embed = Tensor::zeros({cfg.seq_len(), D});
  p.cls_token = trunc_normal({1, D}, kInitStd, rng);
  p.layers.resize(static_cast<size_t>(cfg.depth));
  for (auto& lp : p.layers) {
    lp.ln1_gamma = Tensor::full({D}, 1.0f);
    lp.ln1_beta = Tensor::zeros({D});
    lp.qkv_w = trunc_normal({D, 3 * D}, kInitStd, rng);
    lp.qkv_b = Tensor::zeros({3 * D});
    lp.proj_w = trunc_normal({D, D}, kInitStd, rng);
    lp.proj_b = Tensor::zeros({D});
    lp.ln2_gamma = Tensor::full({D}, 1.0f);
    lp.ln2_beta = Tensor::zeros({D});
    lp.fc1_w = trunc_normal({D, Hm}, kInitStd, rng);
    lp.fc1_b = Tensor::zeros({Hm});
    lp.fc2_w = trunc_normal({Hm, D}, kInitStd, rng);
    lp.fc2_b = Tensor::zeros({D});
  }
  p.lnf_gamma = Tensor::full({D}, 1.0f);
  p.lnf_beta = Tensor::zeros({D});
  p.head_w = trunc_normal({D, cfg.num_classes}, kInitStd, rng);
  p.head_b = Tensor::zeros({cfg.num_classes});
  return p;
}

std::vector<std::pair<std::string, Tensor>> VitParams::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(8 + layers.size() * 12);
  out.emplace_back("patch.w", patch_w);
  out.emplace_back("patch.b", patch_b);
  out.emplace_back("pos_embed", pos_embed);
  out.emplace_back("cls_token", cls_token);
  for (size_t l = 0; l < layers.size(); ++l) {
    const auto& lp = layers[l];
    const std::string base = detail::concat("layer", l, ".");
    out.emplace_back(base + "ln1.gamma", lp.ln1_gamma);
    out.emplace_back(base + "ln1.beta", lp.ln1_beta);
    out.emplace_back(base + "qkv.w", lp.qkv_w);
    out.emplace_back(base + "qkv.b", lp.qkv_b);
    out.emplace_back(base + "proj.w", lp.proj_w);
    out.emplace_back(base + "proj.b", lp.proj_b);
    out.emplace_back(base + "ln2.gamma", lp.ln2_gamma);
    out.emplace_back(base + "ln2.beta", lp.ln2_beta);
    out.emplace_back(base + "fc1.w", lp.fc1_w);
    out.emplace_back(base + "fc1.b", lp.fc1_b);
    out.emplace_back(base + "fc2.w", lp.fc2_w);
    out.emplace_back(base + "fc2.b", lp.fc2_b);
  }
  out.emplace_back("lnf.gamma", lnf_gamma);
  out.emplace_back("lnf.beta", lnf_beta);
  out.emplace_back("head.w", head_w);
  out.emplace_back("head.b", head_b);
  return out;
}

void VitParams::set_requires_grad(bool value) {
  for (auto& [name, t] : named()) {
    Tensor handle = t;
    handle.set_requires_grad(value);
  }
}

void VitParams::zero_grads() {
  for (auto& [name, t] : named()) {
    Tensor handle = t;
    if (handle.has_grad()) handle.zero_grad();
  }
}

bool VitParams::all_finite() const {
  for (const auto& [name, t] : named()) {
    if (!t.all_finite()) return false;
  }
  return true;
}

int64_t VitParams::count() const {
  int64_t n = 0;
  for (const auto& [name, t] : named()) n += t.numel();
  return n;
}

VitParams VitParams::clone() const {
  VitParams p;
  p.patch_w = patch_w.clone();
  p.patch_b = patch_b.clone();
  p.pos_embed = pos_embed.clone();
  p.cls_token = cls_token.clone();
  p.layers.reserve(layers.size());
  for (const auto& lp : layers) {
    LayerParams c;
    c.ln1_gamma = lp.ln1_gamma.clone();
    c.ln1_beta = lp.ln1_beta.clone();
    c.qkv_w = lp.qkv_w.clone();
    c.qkv_b = lp.qkv_b.clone();
    c.proj_w = lp.proj_w.clone();
    c.proj_b = lp.proj_b.clone();
    c.ln2_gamma = lp.ln2_gamma.clone();
    c.ln2_beta = lp.ln2_beta.clone();
    c.fc1_w = lp.fc1_w.clone();
    c.fc1_b = lp.fc1_b.clone();
    c.fc2_w = lp.fc2_w.clone();
    c.fc2_b = lp.fc2_b.clone();
    p.layers.push_back(std::move(c));
  }
  p.lnf_gamma = lnf_gamma.clone();
  p.lnf_beta = lnf_beta.clone();
  p.head_w = head_w.clone();
  p.head_b = head_b.clone();
  return p;
}

void VitParams::validate(const VitConfig& cfg) const {
  cfg.validate();
  const int D = cfg.embed_dim, Hm = cfg.mlp_hidden();
  auto expect = [](const Tensor& t, std::vector<int> shape, const char* name) {
    NSVIT_REQUIRE(t.defined() && t.shape() == shape, "params: ", name,
                  " has wrong shape ", t.defined() ? t.shape_str() : "(undefined)");
  };
  expect(patch_w, {cfg.patch_dim(), D}, "patch.w");
  expect(patch_b, {D}, "patch.b");
  expect(pos_embed, {cfg.seq_len(), D}, "pos_embed");
  expect(cls_token, {1, D}, "cls_token");
  NSVIT_REQUIRE(static_cast<int>(layers.size()) == cfg.depth,
                "params: expected ", cfg.depth, " layers, got ", layers.size());
  for (size_t l = 0; l < layers.size(); ++l) {
    const auto& lp = layers[l];
    expect(lp.ln1_gamma, {D}, "ln1.gamma");
    expect(lp.ln1_beta, {D}, "ln1.beta");
    expect(lp.qkv_w, {D, 3 * D}, "qkv.w");
    expect(lp.qkv_b, {3 * D}, "qkv.b");
    expect(lp.proj_w, {D, D}, "proj.w");
    expect(lp.proj_b, {D}, "proj.b");
    expect(lp.ln2_gamma, {D}, "ln2.gamma");
    expect(lp.ln2_beta, {D}, "ln2.beta");
    expect(lp.fc1_w, {D, Hm}, "fc1.w");
    expect(lp.fc1_b, {Hm}, "fc1.b");
    expect(lp.fc2_w, {Hm, D}, "fc2.w");
    expect(lp.fc2_b, {D}, "fc2.b");
  }
  expect(lnf_gamma, {D}, "lnf.gamma");
  expect(lnf_beta, {D}, "lnf.beta");
  expect(head_w, {D, cfg.num_classes}, "head.w");
  expect(head_b, {cfg.num_classes}, "head.b");
  NSVIT_REQUIRE(all_finite(), "params: non-finite values present");
}

VitModel::VitModel(VitConfig cfg, VitParams params)
    : cfg_(cfg), params_(std::move(params)) {
  params_.validate(cfg_);
}

VitModel VitModel::random_init(const VitConfig& cfg, Rng& rng) {
  return VitModel(cfg, VitParams::init(cfg, rng));
}

Tensor VitModel::patchify(const Tensor& image, Graph* g) const {
  NSVIT_REQUIRE(image.rank() == 3 && image.dim(0) == cfg_.channels &&
                    image.dim(1) == cfg_.image_size && image.dim(2) == cfg_.image_size,
                "patchify: image shape ", image.shape_str(), " does not match config [",
                cfg_.channels, ", ", cfg_.image_size, ", ", cfg_.image_size, "]");
  const int C = cfg_.channels, H = cfg_.image_size, P = cfg_.patch_size, G = cfg_.grid();
  const int pd = cfg_.patch_dim();
  Tensor out = Tensor::zeros({cfg_.num_patches(), pd});
  const float* src = image.data().data();
  float* dst = out.data_mut().data();
  for (int pr = 0; pr < G; ++pr) {
    for (int pc = 0; pc < G; ++pc) {
      float* row = dst + static_cast<size_t>(pr * G + pc) * pd;
      for (int r = 0; r < P; ++r) {
        for (int c = 0; c < P; ++c) {
          for (int ch = 0; ch < C; ++ch) {
            row[(r * P + c) * C + ch] =
                src[(static_cast<size_t>(ch) * H + pr * P + r) * H + pc * P + c];
          }
        }
      }
    }
  }
  if (g && image.requires_grad()) {
    out.set_requires_grad(true);
    Tensor ic = image, oc = out;
    g->record(out, [ic, oc, C, H, P, G, pd]() mutable {
      auto gx = ic.grad_mut();
      auto dg = oc.grad();
      for (int pr = 0; pr < G; ++pr) {
        for (int pc = 0; pc < G; ++pc) {
          const float* row = dg.data() + static_cast<size_t>(pr * G + pc) * pd;
          for (int r = 0; r < P; ++r) {
            for (int c = 0; c < P; ++c) {
              for (int ch = 0; ch < C; ++ch) {
                gx[(static_cast<size_t>(ch) * H + pr * P + r) * H + pc * P + c] +=
                    row[(r * P + c) * C + ch];
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor VitModel::embed(const Tensor& patches, Graph* g) const {
  NSVIT_REQUIRE(patches.rank() == 2 && patches.rows() == cfg_.num_patches() &&
                    patches.cols() == cfg_.patch_dim(),
                "embed: patches shape ", patches.shape_str(), " does not match config");
  Tensor proj = ops::add_rowvec(ops::matmul(patches, params_.patch_w, g), params_.patch_b, g);
  Tensor seq = ops::concat_rows({params_.cls_token, proj}, g);
  return ops::add(seq, params_.pos_embed, g);
}

Tensor VitModel::encoder_block(const Tensor& z, int layer, ActivationTrace* trace,
                               const PatchPlan* patch, Graph* g) const {
  NSVIT_REQUIRE(layer >= 0 && layer < cfg_.depth, "encoder_block: layer ", layer,
                " out of [0, ", cfg_.depth, ")");
  NSVIT_REQUIRE(z.rank() == 2 && z.rows() == cfg_.seq_len() && z.cols() == cfg_.embed_dim,
                "encoder_block: input shape ", z.shape_str(), " does not match config");
  const auto& lp = params_.layers[static_cast<size_t>(layer)];
  const int D = cfg_.embed_dim, dh = cfg_.head_dim();
  const float eps = cfg_.layernorm_eps;

  Tensor ln1 = ops::layer_norm(z, lp.ln1_gamma, lp.ln1_beta, eps, g);
  Tensor qkv_pre = tap_site(ops::matmul(ln1, lp.qkv_w, g), layer, Site::kAttnQkv, trace,
                            patch, g);
  Tensor qkv = ops::add_rowvec(qkv_pre, lp.qkv_b, g);
  Tensor q = ops::slice_cols(qkv, 0, D, g);
  Tensor k = ops::slice_cols(qkv, D, D, g);
  Tensor v = ops::slice_cols(qkv, 2 * D, D, g);

  const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));
  std::vector<Tensor> heads_out;
  heads_out.reserve(static_cast<size_t>(cfg_.heads));
  for (int i = 0; i < cfg_.heads; ++i) {
    Tensor qi = ops::slice_cols(q, i * dh, dh, g);
    Tensor ki = ops::slice_cols(k, i * dh, dh, g);
    Tensor vi = ops::slice_cols(v, i * dh, dh, g);
    Tensor att = ops::softmax(
        ops::scale(ops::matmul(qi, ops::transpose(ki, g), g), inv_sqrt_dh, g), g);
    heads_out.push_back(ops::matmul(att, vi, g));
  }
  Tensor attn_cat = ops::concat_cols(heads_out, g);
  Tensor proj_pre = tap_site(ops::matmul(attn_cat, lp.proj_w, g), layer, Site::kAttnProj,
                             trace, patch, g);
  Tensor attn_out = ops::add_rowvec(proj_pre, lp.proj_b, g);
  Tensor z1 = ops::add(z, attn_out, g);

  Tensor ln2 = ops::layer_norm(z1, lp.ln2_gamma, lp.ln2_beta, eps, g);
  Tensor h1 = tap_site(
      ops::gelu(ops::add_rowvec(ops::matmul(ln2, lp.fc1_w, g), lp.fc1_b, g), g), layer,
      Site::kMlpFc1, trace, patch, g);
  Tensor fc2_pre = tap_site(ops::matmul(h1, lp.fc2_w, g), layer, Site::kMlpFc2, trace,
                            patch, g);
  Tensor mlp_out = ops::add_rowvec(fc2_pre, lp.fc2_b, g);
  Tensor out = tap_site(ops::add(z1, mlp_out, g), layer, Site::kAdd1, trace, patch, g);
  return out;
}

Tensor VitModel::forward(const Tensor& image, ActivationTrace* trace,
                         const PatchPlan* patch, Graph* g) const {
  if (patch) patch->validate(cfg_);
  Tensor z = embed(patchify(image, g), g);
  for (int l = 0; l < cfg_.depth; ++l) {
    z = encoder_block(z, l, trace, patch, g);
    if (trace) {
      auto row0 = z.data().subspan(0, static_cast<size_t>(cfg_.embed_dim));
      trace->cls.push_back(
          Tensor::from_data({1, cfg_.embed_dim}, {row0.begin(), row0.end()}));
    }
  }
  Tensor lnf = ops::layer_norm(z, params_.lnf_gamma, params_.lnf_beta, cfg_.layernorm_eps, g);
  Tensor cls = ops::slice_rows(lnf, 0, 1, g);
  Tensor logits = ops::reshape(
      ops::add_rowvec(ops::matmul(cls, params_.head_w, g), params_.head_b, g),
      {cfg_.num_classes}, g);
  if (trace) trace->logits = logits;
  return logits;
}

Tensor VitModel::cls_embedding(const Tensor& image, int layer, Graph* g,
                               const PatchPlan* patch) const {
  NSVIT_REQUIRE(layer >= 1 && layer <= cfg_.depth, "cls_embedding: layer ", layer,
                " out of [1, ", cfg_.depth, "]");
  if (patch) patch->validate(cfg_);
  Tensor z = embed(patchify(image, g), g);
  for (int l = 0; l < layer; ++l) z = encoder_block(z, l, nullptr, patch, g);
  return ops::slice_rows(z, 0, 1, g);
}

int VitModel::predict(const Tensor& image, const PatchPlan* patch) const {
  Tensor logits = forward(image, nullptr, patch);
  auto d = logits.data();
  int best = 0;
  for (int i = 1; i < static_cast<int>(d.size()); ++i) {
    if (d[static_cast<size_t>(i)] > d[static_cast<size_t>(best)]) best = i;
  }
  return best;
}

}  // namespace nsvit
