#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nsvit/attacks.hpp"
#include "nsvit/dataset.hpp"
#include "nsvit/neuroshield.hpp"
#include "nsvit/vit.hpp"

namespace nsvit {

// Inference-time defense applied on top of a (possibly adversarially
// trained) checkpoint. An AT baseline is the none-defense evaluated on the
// AT checkpoint, labeled via `id`.
struct Defense {
  enum class Kind { kNone, kNeuroShield, kSmoothing };
  Kind kind = Kind::kNone;
  std::string id = "none";
  NeutralizationPlan plan;     // kNeuroShield
  double sigma = 0.25;         // kSmoothing
  int smoothing_samples = 64;  // kSmoothing

  static Defense none(std::string id = "none");
  static Defense neuroshield(NeutralizationPlan plan, std::string id = "neuroshield");
  static Defense smoothing(double sigma = 0.25, int n = 64,
                           std::string id = "smoothing");
  void validate(const VitConfig& cfg) const;
};

// Prediction with the defense applied; sample_seed feeds the smoothing noise
// streams so paired comparisons reuse identical noise per sample.
int defense_predict(const VitModel& model, const Defense& defense,
                    const Tensor& image, uint64_t sample_seed);

struct AttackEval {
  std::string label;  // attack kind, suffixed -2, -3... for repeated kinds
  AttackConfig config;
  double natural_accuracy = 0.0;  // percent, clean subset
  double robust_accuracy = 0.0;   // percent, attacked subset
  int sample_count = 0;

  bool operator==(const AttackEval&) const = default;
};

struct EvalReport {
  std::string model_id;
  std::string defense_id;
  double natural_accuracy = 0.0;  // percent over the evaluation subset
  int sample_count = 0;
  std::vector<AttackEval> attacks;
  int64_t timestamp = 0;  // unix seconds; informational only
  uint64_t seed = 0;

  void validate() const;

  bool operator==(const EvalReport&) const = default;
};

struct EvalOptions {
  int sample_count = 200;  // evaluation subset size (clamped to the dataset)
  uint64_t seed = 0;
  bool natural_only = false;  // when set, the attack list is ignored
  std::string model_id = "vit";
};

// Percentage of samples where classify(image, position) returns the label.
double classification_accuracy(
    const std::vector<Tensor>& images, const std::vector<int>& labels,
    const std::function<int(const Tensor&, size_t)>& classify);

// Seeded evaluation subset: the same (dataset size, count, seed) triple gives
// the same indices, so defenses are compared on paired samples.
std::vector<size_t> evaluation_subset(size_t dataset_size, int sample_count,
                                      uint64_t seed);

// Representation-matching targets: each sample's target is the cyclically
// next sample with a different label (at least two classes required).
std::vector<Tensor> igo_targets(const std::vector<Tensor>& images,
                                const std::vector<int>& labels,
                                std::vector<int>* target_labels);

// One label per attack: the kind name, suffixed -2, -3... when a kind
// repeats ("pgd", "pgd-2"). Matches the labels evaluate() reports.
std::vector<std::string> attack_labels(const std::vector<AttackConfig>& attacks);

// Natural accuracy on the clean subset plus, per attack, robust accuracy on
// perturbations crafted against the undefended model. IGO targets are the
// cyclically-next subset sample with a different label.
EvalReport evaluate(const VitModel& model, const Defense& defense,
                    const Dataset& dataset, const std::vector<AttackConfig>& attacks,
                    const EvalOptions& opts = {});

}  // namespace nsvit
