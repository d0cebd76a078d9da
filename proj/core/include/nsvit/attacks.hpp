#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "nsvit/rng.hpp"
#include "nsvit/vit.hpp"

namespace nsvit {

enum class AttackKind { kFgsm, kPgd, kIgo };

std::string_view attack_kind_name(AttackKind kind);      // "fgsm", "pgd", "igo"
AttackKind attack_kind_from_name(std::string_view name);  // contract error on unknown

struct AttackConfig {
  AttackKind kind = AttackKind::kPgd;
  // L-inf budget in pixel units on the [0,1] scale.
  double epsilon = 8.0 / 255.0;
  int steps = 20;
  double step_size = 2.0 / 255.0;
  bool random_start = true;
  struct Igo {
    double lr = 0.1;
    int max_iters = 2000;
    double cos_target = 0.97;
    double l2_max = 36.0;

    bool operator==(const Igo&) const = default;
  } igo;

  void validate() const;

  bool operator==(const AttackConfig&) const = default;
};

// JSON encoding used by adversarial-set manifests, plan provenance, and the
// pipeline config; round-trips every field including the igo block.
nlohmann::json attack_config_to_json(const AttackConfig& cfg);
AttackConfig attack_config_from_json(const nlohmann::json& j);

// The 36-pixel L2 stop threshold assumes 224x224x3 inputs; rescale by
// sqrt(volume ratio) to keep per-pixel perturbation density comparable.
double scaled_l2_max(const VitConfig& cfg);

// Gradient of the cross-entropy loss w.r.t. the image (parameters fixed).
Tensor input_gradient(const VitModel& model, const Tensor& image, int label);

// Single-step sign attack: clamp01(x + epsilon * sign(grad)).
Tensor fgsm(const VitModel& model, const Tensor& image, int label, double epsilon);

// k steps of sign ascent, each projected onto the L-inf ball around the input
// and clamped to [0,1]. An optional uniform random start draws from `rng`
// (required when cfg.random_start is set).
Tensor pgd(const VitModel& model, const Tensor& image, int label,
           const AttackConfig& cfg, Rng* rng = nullptr);

struct IgoResult {
  Tensor image;
  int iterations = 0;    // gradient steps actually taken
  float final_cos = 0.0f;
  float initial_cos = 0.0f;
};

// Iterative gradient optimization: descend pixels on 1 - cos(z_cls^L(x_adv),
// z_cls^L(x_target)), clamping to [0,1] each step; stops when the cosine
// target is reached AND the L2 distance to the original stays within budget,
// or at max_iters.
IgoResult igo(const VitModel& model, const Tensor& image, const Tensor& target_image,
              const AttackConfig& cfg);

// In-place pixel-range clamp and L-inf ball projection (exposed for testing).
void clamp01(Tensor& x);
void project_linf(Tensor& x, const Tensor& center, double epsilon);

double linf_dist(const Tensor& a, const Tensor& b);
double l2_dist(const Tensor& a, const Tensor& b);
bool in_unit_range(const Tensor& x);

// A batch of attacked samples plus the provenance needed to regenerate it.
struct AdversarialSet {
  AttackConfig config;
  uint64_t seed = 0;
  std::vector<Tensor> clean;        // each C x H x W
  std::vector<Tensor> adversarial;  // same shapes as clean
  std::vector<int> labels;          // true labels
  std::vector<int> target_labels;   // igo only; empty otherwise

  size_t count() const { return clean.size(); }
  void validate() const;
};

// Attacks every image; parallel across samples with per-index substreams, so
// results do not depend on the worker count. For igo, `igo_targets` supplies
// one target image per sample (targets are chosen by the caller).
AdversarialSet generate_adversarial_set(const VitModel& model,
                                        const std::vector<Tensor>& images,
                                        const std::vector<int>& labels,
                                        const AttackConfig& cfg, uint64_t seed,
                                        const std::vector<Tensor>* igo_targets = nullptr,
                                        const std::vector<int>* igo_target_labels = nullptr);

// Manifest JSON at `manifest_path` plus a tensor blob alongside it (same file
// name with a .bin extension) holding clean/adversarial pixels and labels.
void save_adversarial_set(const AdversarialSet& set, const std::string& manifest_path);
AdversarialSet load_adversarial_set(const std::string& manifest_path);

}  // namespace nsvit
