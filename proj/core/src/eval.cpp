#include "nsvit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <ctime>
#include <map>

#include "nsvit/errors.hpp"
#include "nsvit/parallel.hpp"
#include "nsvit/rng.hpp"
#include "nsvit/training.hpp"

namespace nsvit {

Defense Defense::none(std::string id) {
  Defense d;
  d.kind = Kind::kNone;
  d.id = std::move(id);
  return d;
}

Defense Defense::neuroshield(NeutralizationPlan plan, std::string id) {
  Defense d;
  d.kind = Kind::kNeuroShield;
  d.plan = std::move(plan);
  d.id = std::move(id);
  return d;
}

Defense Defense::smoothing(double sigma, int n, std::string id) {
  Defense d;
  d.kind = Kind::kSmoothing;
  d.sigma = sigma;
  d.smoothing_samples = n;
  d.id = std::move(id);
  return d;
}

void Defense::validate(const VitConfig& cfg) const {
  NSVIT_REQUIRE(!id.empty(), "defense id must be nonempty");
  switch (kind) {
    case Kind::kNone:
      return;
    case Kind::kNeuroShield:
      plan.validate(cfg);
      return;
    case Kind::kSmoothing:
      NSVIT_REQUIRE(sigma >= 0.0, "sigma must be >= 0, got ", sigma);
      NSVIT_REQUIRE(smoothing_samples >= 1, "smoothing_samples must be >= 1, got ",
                    smoothing_samples);
      return;
  }
  throw ContractError("unknown defense kind");
}

int defense_predict(const VitModel& model, const Defense& defense,
                    const Tensor& image, uint64_t sample_seed) {
  switch (defense.kind) {
    case Defense::Kind::kNone:
      return model.predict(image);
    case Defense::Kind::kNeuroShield:
      return defended_predict(model, defense.plan, image);
    case Defense::Kind::kSmoothing:
      return randomized_smoothing_predict(model, image, defense.sigma,
                                          defense.smoothing_samples, sample_seed);
  }
  throw ContractError("unknown defense kind");
}

void EvalReport::validate() const {
  NSVIT_REQUIRE(sample_count > 0, "sample_count must be positive");
  NSVIT_REQUIRE(natural_accuracy >= 0.0 && natural_accuracy <= 100.0,
                "natural accuracy out of [0,100]");
  for (const AttackEval& a : attacks) {
    NSVIT_REQUIRE(a.sample_count > 0, "attack sample_count must be positive");
    NSVIT_REQUIRE(a.natural_accuracy >= 0.0 && a.natural_accuracy <= 100.0,
                  "attack natural accuracy out of [0,100]");
    NSVIT_REQUIRE(a.robust_accuracy >= 0.0 && a.robust_accuracy <= 100.0,
                  "attack robust accuracy out of [0,100]");
  }
}

double classification_accuracy(
    const std::vector<Tensor>& images, const std::vector<int>& labels,
    const std::function<int(const Tensor&, size_t)>& classify) {
  NSVIT_REQUIRE(!images.empty(), "empty evaluation set");
  NSVIT_REQUIRE(images.size() == labels.size(), "images/labels size mismatch");
  std::vector<int> hits(images.size(), 0);
  parallel_for(images.size(), [&](size_t i) {
    hits[i] = classify(images[i], i) == labels[i];
  });
  int64_t correct = 0;
  for (int h : hits) correct += h;
  return 100.0 * static_cast<double>(correct) / static_cast<double>(images.size());
}

std::vector<size_t> evaluation_subset(size_t dataset_size, int sample_count,
                                      uint64_t seed) {
  NSVIT_REQUIRE(dataset_size > 0, "empty dataset");
  NSVIT_REQUIRE(sample_count >= 1, "sample_count must be >= 1, got ", sample_count);
  const size_t k = std::min(dataset_size, static_cast<size_t>(sample_count));
  return Rng::stream(seed, "eval.subset").sample_indices(dataset_size, k);
}

namespace {

uint64_t sample_smoothing_seed(uint64_t seed, size_t position) {
  return Rng::stream(seed, "eval.smoothing", static_cast<uint64_t>(position))
      .next_u64();
}

}  // namespace

std::vector<Tensor> igo_targets(const std::vector<Tensor>& images,
                                const std::vector<int>& labels,
                                std::vector<int>* target_labels) {
  std::vector<Tensor> targets(images.size());
  target_labels->assign(images.size(), 0);
  for (size_t i = 0; i < images.size(); ++i) {
    bool found = false;
    for (size_t step = 1; step < images.size(); ++step) {
      const size_t j = (i + step) % images.size();
      if (labels[j] != labels[i]) {
        targets[i] = images[j];
        (*target_labels)[i] = labels[j];
        found = true;
        break;
      }
    }
    NSVIT_REQUIRE(found,
                  "igo evaluation needs at least two classes in the subset");
  }
  return targets;
}

std::vector<std::string> attack_labels(const std::vector<AttackConfig>& attacks) {
  std::vector<std::string> labels;
  labels.reserve(attacks.size());
  std::map<AttackKind, int> kind_uses;
  for (const AttackConfig& cfg : attacks) {
    const int use = ++kind_uses[cfg.kind];
    std::string label(attack_kind_name(cfg.kind));
    if (use > 1) label += detail::concat("-", use);
    labels.push_back(std::move(label));
  }
  return labels;
}

EvalReport evaluate(const VitModel& model, const Defense& defense,
                    const Dataset& dataset, const std::vector<AttackConfig>& attacks,
                    const EvalOptions& opts) {
  NSVIT_REQUIRE(opts.natural_only || !attacks.empty(),
                "attack list is empty and natural_only is not set");
  defense.validate(model.config());
  NSVIT_REQUIRE(!dataset.images.empty(), "empty dataset");

  const std::vector<size_t> subset =
      evaluation_subset(dataset.size(), opts.sample_count, opts.seed);
  std::vector<Tensor> images;
  std::vector<int> labels;
  images.reserve(subset.size());
  for (size_t idx : subset) {
    NSVIT_REQUIRE(dataset.labels[idx] >= 0 &&
                      dataset.labels[idx] < model.config().num_classes,
                  "dataset label out of range for the model head");
    images.push_back(dataset.images[idx]);
    labels.push_back(dataset.labels[idx]);
  }

  EvalReport report;
  report.model_id = opts.model_id;
  report.defense_id = defense.id;
  report.seed = opts.seed;
  report.sample_count = static_cast<int>(subset.size());
  report.timestamp = static_cast<int64_t>(std::time(nullptr));

  const auto defended = [&](const Tensor& image, size_t position) {
    return defense_predict(model, defense, image,
                           sample_smoothing_seed(opts.seed, position));
  };
  report.natural_accuracy = classification_accuracy(images, labels, defended);

  if (!opts.natural_only) {
    const std::vector<std::string> labels_per_attack = attack_labels(attacks);
    for (size_t a = 0; a < attacks.size(); ++a) {
      const AttackConfig& cfg = attacks[a];
      cfg.validate();
      std::vector<Tensor> targets;
      std::vector<int> target_labels;
      const std::vector<Tensor>* targets_ptr = nullptr;
      const std::vector<int>* target_labels_ptr = nullptr;
      if (cfg.kind == AttackKind::kIgo) {
        targets = igo_targets(images, labels, &target_labels);
        targets_ptr = &targets;
        target_labels_ptr = &target_labels;
      }
      AdversarialSet set = generate_adversarial_set(
          model, images, labels, cfg, opts.seed, targets_ptr, target_labels_ptr);

      AttackEval entry;
      entry.label = labels_per_attack[a];
      entry.config = cfg;
      entry.sample_count = static_cast<int>(subset.size());
      entry.natural_accuracy = report.natural_accuracy;
      entry.robust_accuracy =
          classification_accuracy(set.adversarial, labels, defended);
      report.attacks.push_back(std::move(entry));
    }
  }

  report.validate();
  return report;
}

}  // namespace nsvit
