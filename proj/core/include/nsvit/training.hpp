#pragma once

#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "nsvit/attacks.hpp"
#include "nsvit/dataset.hpp"
#include "nsvit/vit.hpp"

namespace nsvit {

enum class Optimizer { kSgdMomentum, kAdam };
std::string_view optimizer_name(Optimizer o);
Optimizer optimizer_from_name(std::string_view name);

inline AttackConfig default_at_attack() {
  AttackConfig a;  // PGD-7 inner loop
  a.kind = AttackKind::kPgd;
  a.steps = 7;
  return a;
}

struct AdversarialTrainConfig {
  AttackConfig attack = default_at_attack();
  // Fraction of each batch left clean; the rest is replaced by attacked
  // copies of the same samples, in order.
  double replay_ratio = 0.0;
};

struct TrainConfig {
  int epochs = 20;
  double lr = 1e-3;
  int batch_size = 64;
  Optimizer optimizer = Optimizer::kAdam;
  double weight_decay = 0.0;
  double momentum = 0.9;  // sgd-momentum only
  uint64_t seed = 0;
  std::optional<AdversarialTrainConfig> adversarial;

  // lr = 0 is accepted (a zero step leaves parameters untouched).
  void validate() const;
};

struct EpochStats {
  int epoch = 0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;  // percent
  double val_loss = 0.0;
  double val_accuracy = 0.0;  // percent
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  bool diverged = false;
};

// One parameter update from the gradients currently stored on the params
// (assumed already averaged over the batch). Adam keeps double-precision
// moments; sgd-momentum keeps a velocity per element.
class ParamOptimizer {
 public:
  ParamOptimizer(const TrainConfig& cfg, VitParams& params);
  void step();

 private:
  TrainConfig cfg_;
  std::vector<std::pair<std::string, Tensor>> named_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Minimizes cross entropy over the dataset's train split (samples tagged
// val are scored at each epoch end; with no val split, validation metrics
// are computed on the train split). A non-finite batch loss aborts training,
// restores the last epoch-end parameters, and marks the history diverged.
TrainHistory train(VitModel& model, const Dataset& dataset, const TrainConfig& cfg);

// As train, but each batch's trailing samples are replaced by attacked
// copies (cfg.adversarial required; FGSM or PGD only). With epsilon = 0 the
// trajectory is identical to plain training under the same seed.
TrainHistory adversarial_train(VitModel& model, const Dataset& dataset,
                               const TrainConfig& cfg);

// Vote tally over n forward passes on image + N(0, sigma^2) noise, clamped
// to [0,1]; noise for pass i comes from the seeded substream ("smoothing", i).
std::vector<int64_t> smoothing_votes(const VitModel& model, const Tensor& image,
                                     double sigma, int n_samples, uint64_t seed);

// Majority vote; ties break to the lower class index.
int majority_class(const std::vector<int64_t>& votes);

int randomized_smoothing_predict(const VitModel& model, const Tensor& image,
                                 double sigma = 0.25, int n_samples = 64,
                                 uint64_t seed = 0);

}  // namespace nsvit
