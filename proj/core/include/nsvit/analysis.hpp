#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string_view>
#include <utility>
#include <vector>

#include "nsvit/vit.hpp"

namespace nsvit {

// One channel of one hook site in one layer.
struct NeuronId {
  int layer = 0;
  Site site = Site::kAttnQkv;
  int channel = 0;

  auto operator<=>(const NeuronId&) const = default;
};

// The scalar the gradients in the importance product differentiate.
enum class ScalarTarget { kPredictedLogit, kTrueLogit, kCrossEntropy };
std::string_view scalar_target_name(ScalarTarget target);
ScalarTarget scalar_target_from_name(std::string_view name);

enum class ImportanceMode { kAggregated, kPerToken };

// Per (layer, site) importance values: aggregated mode holds one value per
// channel ([width]); per-token mode holds the full token x channel matrix.
struct ImportanceMap {
  ImportanceMode mode = ImportanceMode::kAggregated;
  std::map<HookSite, Tensor> values;
};

// Channels selected per (layer, site), remembering the construction
// parameters so set algebra can insist on like-for-like operands.
struct NeuronSet {
  double p = 0.0;
  std::vector<Site> sites;
  std::map<HookSite, std::vector<int>> channels;  // each sorted ascending, unique

  size_t total() const;
  bool contains(const NeuronId& id) const;
};

enum class PairKind { kInputPerturbed, kTargetPerturbed, kInputTarget };
std::string_view pair_kind_name(PairKind kind);

// Per-layer cosine similarity of CLS representations, s_l for l = 1..depth.
struct SimilarityCurve {
  PairKind kind = PairKind::kInputPerturbed;
  std::vector<float> values;
};

// Histogram of per-patch-token cosine similarities over twenty 0.1-wide bins
// spanning [-1, 1], per requested (layer, site).
struct TokenSimilarityProfile {
  static constexpr int kBins = 20;
  std::map<HookSite, std::array<int64_t, kBins>> histograms;
  int token_count = 0;  // patch tokens counted per histogram (CLS excluded)

  static int bin_of(double cosine);
  static std::pair<double, double> bin_range(int bin);
};

// Cosine between the layer-wise CLS vectors of the two images. A zero-norm
// operand at any layer yields similarity 0 with a warning.
SimilarityCurve cls_similarity_curve(const VitModel& model, const Tensor& image_a,
                                     const Tensor& image_b,
                                     PairKind kind = PairKind::kInputPerturbed);

inline std::vector<Site> default_profile_sites() {
  return {Site::kAttnProj, Site::kMlpFc2, Site::kAdd1};
}

// Per-token cosine between the two images' tapped activations, binned per
// (layer, site). CLS rows are excluded (they are analyzed by the CLS curve).
TokenSimilarityProfile token_similarity_profile(const VitModel& model,
                                                const Tensor& image_a,
                                                const Tensor& image_b,
                                                const std::vector<Site>& sites);

// Activation x gradient importance from a capture-mode forward/backward.
// Aggregated mode sums the per-token products over all tokens in 64-bit;
// per-token mode returns the raw product matrix. The true-logit and
// cross-entropy targets require a label.
ImportanceMap neuron_importance(const VitModel& model, const Tensor& image,
                                ScalarTarget target = ScalarTarget::kPredictedLogit,
                                ImportanceMode mode = ImportanceMode::kAggregated,
                                int label = -1);

// The pure formula layer: importance from already-captured activations and
// gradients (trace.materialize_gradients() must have run).
ImportanceMap importance_from_traces(const ActivationTrace& trace, ImportanceMode mode);

// Per (layer, site): the ceil(p/100 * width) channels of largest |importance|,
// ties resolved toward the lower channel index. Per-token maps select per
// token and return the union across tokens.
NeuronSet top_p_neurons(const ImportanceMap& importance, double p);

// Exact per-(layer, site) set difference adv \ clean. Operands must have been
// built with the same p and site list.
NeuronSet adversarial_neuron_set(const NeuronSet& clean, const NeuronSet& adv);

// Mean over pairs of |A_p| / |N_p_adv| per (layer, site, p).
struct FractionCurve {
  std::vector<double> p_values;
  std::map<HookSite, std::vector<double>> fractions;  // fractions[hs][p_index]
};

FractionCurve adversarial_fraction_curve(
    const VitModel& model, const std::vector<std::pair<Tensor, Tensor>>& pairs,
    const std::vector<double>& p_values,
    ScalarTarget target = ScalarTarget::kPredictedLogit,
    const std::vector<int>* labels = nullptr);

}  // namespace nsvit
