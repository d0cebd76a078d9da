#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "nsvit/analysis.hpp"
#include "nsvit/attacks.hpp"
#include "nsvit/vit.hpp"

namespace nsvit {

// Clean/perturbed image pairs used to calibrate a neutralization plan.
struct CalibrationSet {
  std::vector<std::pair<Tensor, Tensor>> pairs;  // (clean, perturbed)
  AttackConfig provenance;                       // attack behind the perturbed halves
  uint64_t seed = 0;

  static CalibrationSet from_adversarial_set(const AdversarialSet& set);
  void validate(const VitConfig& cfg) const;
};

struct CalibrateOptions {
  double p = 0.5;                       // top-p percentage
  float alpha = 0.1f;                   // neutralization coefficient
  std::vector<int> layers;              // empty = all layers
  std::vector<Site> blocks;             // empty = all five sites
  double subset_fraction = 0.25;        // share of the calibration set used
  double occurrence_threshold = 0.0;    // <= 0: plain union (threshold 1/|subset|)
  ScalarTarget target = ScalarTarget::kPredictedLogit;
  uint64_t seed = 0;
};

// Channels to scale by alpha at their taps, plus the calibration metadata
// needed to reproduce the selection.
struct NeutralizationPlan {
  std::map<HookSite, std::vector<int>> channels;  // sorted ascending, unique
  float alpha = 0.1f;
  double p = 0.5;
  std::vector<int> layers;
  std::vector<Site> blocks;
  double subset_fraction = 0.25;
  std::string aggregation = "occurrence-count";
  double occurrence_threshold = 0.0;
  std::string checkpoint_sha256;

  // alpha must lie in [0, 0.5); alpha == 1 is additionally accepted as the
  // identity probe used by tests.
  void validate(const VitConfig& cfg) const;
  PatchPlan to_patch_plan() const;
  size_t total_neurons() const;
  bool empty() const { return channels.empty(); }
};

// Algorithm: per selected pair, importance maps for clean and perturbed
// images, top-p sets, per-pair set differences; neurons are merged across
// pairs by occurrence count and kept when their occurrence fraction meets the
// threshold, restricted to (layers x blocks).
NeutralizationPlan calibrate(const VitModel& model, const CalibrationSet& ncs,
                             const CalibrateOptions& opts);

// Forward with the plan's channels scaled by alpha at their taps.
Tensor defended_forward(const VitModel& model, const NeutralizationPlan& plan,
                        const Tensor& image);
int defended_predict(const VitModel& model, const NeutralizationPlan& plan,
                     const Tensor& image);

// Share of samples whose (plan-defended) prediction matches the label, in
// percent.
double plan_accuracy(const VitModel& model, const NeutralizationPlan& plan,
                     const std::vector<Tensor>& images, const std::vector<int>& labels);

// Plan restricted to layers satisfying keep(layer).
NeutralizationPlan restrict_plan_layers(const NeutralizationPlan& plan,
                                        const std::vector<int>& keep_layers);

// Accuracy per cumulative layer configuration: front[m] neutralizes layers
// [0, m), back[m] neutralizes layers [depth-m, depth); m = 0..depth.
struct LayerSweepResult {
  std::vector<double> front;
  std::vector<double> back;
};
LayerSweepResult layer_ablation_sweep(const VitModel& model,
                                      const NeutralizationPlan& plan,
                                      const std::vector<Tensor>& images,
                                      const std::vector<int>& labels);

// One cell of the subset-size / top-p / alpha grid.
struct SubsetSweepCell {
  double fraction = 0.0;
  double p = 0.0;
  float alpha = 0.0f;
  double robust_accuracy = 0.0;
  double natural_accuracy = 0.0;
};

// Calibrates at every (fraction, p) with the base options' seed, applies each
// alpha, and scores against the given evaluation sets.
std::vector<SubsetSweepCell> subset_size_sweep(
    const VitModel& model, const CalibrationSet& ncs,
    const std::vector<double>& fractions, const std::vector<double>& p_values,
    const std::vector<float>& alphas, const std::vector<Tensor>& clean_images,
    const std::vector<Tensor>& adv_images, const std::vector<int>& labels,
    const CalibrateOptions& base);

// JSON plan file: {version, checkpoint hash, p, alpha, occurrence_threshold,
// layers, blocks, neurons sorted lexicographically by (layer, site, channel)}.
void save_plan(const std::string& path, const NeutralizationPlan& plan);
// A checkpoint-hash mismatch against `expect_checkpoint_sha256` (when
// non-empty) logs a warning but still loads.
NeutralizationPlan load_plan(const std::string& path,
                             const std::string& expect_checkpoint_sha256 = "");

}  // namespace nsvit
