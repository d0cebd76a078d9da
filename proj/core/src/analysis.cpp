#include "nsvit/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <numeric>
#include <set>

#include "nsvit/errors.hpp"
#include "nsvit/ops.hpp"

namespace nsvit {

namespace {

// 64-bit cosine over two float rows; zero-norm operands degenerate to 0.
double cosine64(std::span<const float> a, std::span<const float> b, bool* degenerate) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

int argmax_row(std::span<const float> v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i) {
    if (v[static_cast<size_t>(i)] > v[static_cast<size_t>(best)]) best = i;
  }
  return best;
}

std::vector<Site> sites_of(const std::map<HookSite, Tensor>& values) {
  std::set<Site> s;
  for (const auto& [hs, t] : values) s.insert(hs.site);
  return {s.begin(), s.end()};
}

// ceil(p% of width) with a guard against binary round-up of exact products
// (e.g. decimal p = 0.1 landing epsilon above an integer).
int top_count(double p, int width) {
  const int m = static_cast<int>(std::ceil(p * width / 100.0 - 1e-9));
  return std::max(1, std::min(width, m));
}

// Channel indices ordered by (|value| descending, index ascending).
std::vector<int> rank_by_magnitude(std::span<const float> values) {
  std::vector<int> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    const float ma = std::fabs(values[static_cast<size_t>(a)]);
    const float mb = std::fabs(values[static_cast<size_t>(b)]);
    if (ma != mb) return ma > mb;
    return a < b;
  });
  return idx;
}

}  // namespace

std::string_view scalar_target_name(ScalarTarget target) {
  switch (target) {
    case ScalarTarget::kPredictedLogit: return "predicted-logit";
    case ScalarTarget::kTrueLogit: return "true-logit";
    case ScalarTarget::kCrossEntropy: return "cross-entropy";
  }
  throw ContractError("scalar_target_name: invalid enum value");
}

ScalarTarget scalar_target_from_name(std::string_view name) {
  if (name == "predicted-logit") return ScalarTarget::kPredictedLogit;
  if (name == "true-logit") return ScalarTarget::kTrueLogit;
  if (name == "cross-entropy") return ScalarTarget::kCrossEntropy;
  throw ContractError(detail::concat("unknown scalar target \"", name, "\""));
}

std::string_view pair_kind_name(PairKind kind) {
  switch (kind) {
    case PairKind::kInputPerturbed: return "input-perturbed";
    case PairKind::kTargetPerturbed: return "target-perturbed";
    case PairKind::kInputTarget: return "input-target";
  }
  throw ContractError("pair_kind_name: invalid enum value");
}

size_t NeuronSet::total() const {
  size_t n = 0;
  for (const auto& [hs, ch] : channels) n += ch.size();
  return n;
}

bool NeuronSet::contains(const NeuronId& id) const {
  auto it = channels.find(HookSite{id.layer, id.site});
  if (it == channels.end()) return false;
  return std::binary_search(it->second.begin(), it->second.end(), id.channel);
}

int TokenSimilarityProfile::bin_of(double cosine) {
  const int bin = static_cast<int>(std::floor((cosine + 1.0) / 0.1));
  return std::clamp(bin, 0, kBins - 1);
}

std::pair<double, double> TokenSimilarityProfile::bin_range(int bin) {
  return {-1.0 + 0.1 * bin, -1.0 + 0.1 * (bin + 1)};
}

SimilarityCurve cls_similarity_curve(const VitModel& model, const Tensor& image_a,
                                     const Tensor& image_b, PairKind kind) {
  ActivationTrace ta, tb;
  model.forward(image_a, &ta);
  model.forward(image_b, &tb);
  SimilarityCurve curve;
  curve.kind = kind;
  curve.values.reserve(ta.cls.size());
  for (size_t l = 0; l < ta.cls.size(); ++l) {
    bool degenerate = false;
    const double s = cosine64(ta.cls[l].data(), tb.cls[l].data(), &degenerate);
    if (degenerate) {
      std::cerr << "[nsvit] warning: zero-norm CLS vector at layer " << (l + 1)
                << "; similarity defined as 0\n";
    }
    curve.values.push_back(static_cast<float>(s));
  }
  return curve;
}

TokenSimilarityProfile token_similarity_profile(const VitModel& model,
                                                const Tensor& image_a,
                                                const Tensor& image_b,
                                                const std::vector<Site>& sites) {
  NSVIT_REQUIRE(!sites.empty(), "token_similarity_profile: empty site list");
  ActivationTrace ta, tb;
  model.forward(image_a, &ta);
  model.forward(image_b, &tb);

  TokenSimilarityProfile profile;
  profile.token_count = model.config().num_patches();
  const int seq = model.config().seq_len();
  for (int layer = 0; layer < model.config().depth; ++layer) {
    for (Site site : sites) {
      const HookSite hs{layer, site};
      const Tensor& a = ta.activations.at(hs);
      const Tensor& b = tb.activations.at(hs);
      auto& hist = profile.histograms[hs];
      hist.fill(0);
      const int width = a.dim(1);
      for (int i = 1; i < seq; ++i) {  // row 0 is CLS
        bool degenerate = false;
        const double c = cosine64(
            a.data().subspan(static_cast<size_t>(i) * width, static_cast<size_t>(width)),
            b.data().subspan(static_cast<size_t>(i) * width, static_cast<size_t>(width)),
            &degenerate);
        if (degenerate) {
          std::cerr << "[nsvit] warning: zero-norm token embedding at "
                    << hook_site_str(hs) << " token " << i
                    << "; similarity defined as 0\n";
        }
        ++hist[static_cast<size_t>(TokenSimilarityProfile::bin_of(c))];
      }
    }
  }
  return profile;
}

ImportanceMap importance_from_traces(const ActivationTrace& trace, ImportanceMode mode) {
  ImportanceMap map;
  map.mode = mode;
  for (const auto& [hs, act] : trace.activations) {
    auto git = trace.gradients.find(hs);
    NSVIT_REQUIRE(git != trace.gradients.end(),
                  "importance_from_traces: no gradient captured at ", hook_site_str(hs));
    const Tensor& grad = git->second;
    NSVIT_REQUIRE(act.shape() == grad.shape(),
                  "importance_from_traces: activation/gradient shape mismatch at ",
                  hook_site_str(hs));
    const int rows = act.dim(0), cols = act.dim(1);
    auto as = act.data();
    auto gs = grad.data();
    if (mode == ImportanceMode::kPerToken) {
      Tensor out = Tensor::zeros({rows, cols});
      auto os = out.data_mut();
      for (size_t i = 0; i < os.size(); ++i) os[i] = as[i] * gs[i];
      map.values.emplace(hs, std::move(out));
    } else {
      Tensor out = Tensor::zeros({cols});
      auto os = out.data_mut();
      for (int j = 0; j < cols; ++j) {
        double sum = 0.0;
        for (int i = 0; i < rows; ++i) {
          const size_t k = static_cast<size_t>(i) * cols + j;
          sum += static_cast<double>(as[k] * gs[k]);
        }
        os[static_cast<size_t>(j)] = static_cast<float>(sum);
      }
      map.values.emplace(hs, std::move(out));
    }
  }
  return map;
}

ImportanceMap neuron_importance(const VitModel& model, const Tensor& image,
                                ScalarTarget target, ImportanceMode mode, int label) {
  if (target != ScalarTarget::kPredictedLogit) {
    NSVIT_REQUIRE(label >= 0 && label < model.config().num_classes,
                  scalar_target_name(target), " importance requires a label in [0, ",
                  model.config().num_classes, "), got ", label);
  }
  Graph g;
  ActivationTrace trace;
  Tensor logits = model.forward(image, &trace, nullptr, &g);
  Tensor scalar;
  switch (target) {
    case ScalarTarget::kPredictedLogit: {
      const int pred = argmax_row(logits.data());
      scalar = ops::slice_cols(
          ops::reshape(logits, {1, model.config().num_classes}, &g), pred, 1, &g);
      break;
    }
    case ScalarTarget::kTrueLogit:
      scalar = ops::slice_cols(
          ops::reshape(logits, {1, model.config().num_classes}, &g), label, 1, &g);
      break;
    case ScalarTarget::kCrossEntropy:
      scalar = ops::cross_entropy(logits, label, &g);
      break;
  }
  g.backward(scalar);
  trace.materialize_gradients();
  return importance_from_traces(trace, mode);
}

NeuronSet top_p_neurons(const ImportanceMap& importance, double p) {
  NSVIT_REQUIRE(p > 0.0 && p <= 100.0, "top_p_neurons: p must lie in (0, 100], got ", p);
  NeuronSet out;
  out.p = p;
  out.sites = sites_of(importance.values);
  for (const auto& [hs, values] : importance.values) {
    if (importance.mode == ImportanceMode::kAggregated) {
      NSVIT_REQUIRE(values.rank() == 1, "top_p_neurons: aggregated map expects rank-1 ",
                    "values, got ", values.shape_str(), " at ", hook_site_str(hs));
      const int width = values.dim(0);
      const int m = top_count(p, width);
      std::vector<int> ranked = rank_by_magnitude(values.data());
      std::vector<int> picked(ranked.begin(), ranked.begin() + m);
      std::sort(picked.begin(), picked.end());
      out.channels.emplace(hs, std::move(picked));
    } else {
      NSVIT_REQUIRE(values.rank() == 2, "top_p_neurons: per-token map expects rank-2 ",
                    "values, got ", values.shape_str(), " at ", hook_site_str(hs));
      const int rows = values.dim(0), width = values.dim(1);
      const int m = top_count(p, width);
      std::set<int> picked;
      for (int i = 0; i < rows; ++i) {
        std::vector<int> ranked = rank_by_magnitude(
            values.data().subspan(static_cast<size_t>(i) * width,
                                  static_cast<size_t>(width)));
        picked.insert(ranked.begin(), ranked.begin() + m);
      }
      out.channels.emplace(hs, std::vector<int>(picked.begin(), picked.end()));
    }
  }
  return out;
}

NeuronSet adversarial_neuron_set(const NeuronSet& clean, const NeuronSet& adv) {
  NSVIT_REQUIRE(clean.p == adv.p, "adversarial_neuron_set: operands built with ",
                "different p (", clean.p, " vs ", adv.p, ")");
  NSVIT_REQUIRE(clean.sites == adv.sites,
                "adversarial_neuron_set: operands built over different site lists");
  NeuronSet out;
  out.p = adv.p;
  out.sites = adv.sites;
  for (const auto& [hs, adv_channels] : adv.channels) {
    std::vector<int> diff;
    auto it = clean.channels.find(hs);
    if (it == clean.channels.end()) {
      diff = adv_channels;
    } else {
      std::set_difference(adv_channels.begin(), adv_channels.end(), it->second.begin(),
                          it->second.end(), std::back_inserter(diff));
    }
    if (!diff.empty()) out.channels.emplace(hs, std::move(diff));
  }
  return out;
}

FractionCurve adversarial_fraction_curve(const VitModel& model,
                                         const std::vector<std::pair<Tensor, Tensor>>& pairs,
                                         const std::vector<double>& p_values,
                                         ScalarTarget target,
                                         const std::vector<int>* labels) {
  NSVIT_REQUIRE(!pairs.empty(), "adversarial_fraction_curve: no pairs");
  NSVIT_REQUIRE(!p_values.empty(), "adversarial_fraction_curve: no p values");
  if (target != ScalarTarget::kPredictedLogit) {
    NSVIT_REQUIRE(labels && labels->size() == pairs.size(),
                  "adversarial_fraction_curve: ", scalar_target_name(target),
                  " needs one label per pair");
  }

  FractionCurve curve;
  curve.p_values = p_values;
  std::map<HookSite, std::vector<double>> sums;
  for (size_t pi = 0; pi < pairs.size(); ++pi) {
    const int label = labels ? (*labels)[pi] : -1;
    const ImportanceMap imp_clean =
        neuron_importance(model, pairs[pi].first, target, ImportanceMode::kAggregated, label);
    const ImportanceMap imp_adv =
        neuron_importance(model, pairs[pi].second, target, ImportanceMode::kAggregated, label);
    for (size_t k = 0; k < p_values.size(); ++k) {
      const NeuronSet clean_set = top_p_neurons(imp_clean, p_values[k]);
      const NeuronSet adv_set = top_p_neurons(imp_adv, p_values[k]);
      const NeuronSet diff = adversarial_neuron_set(clean_set, adv_set);
      for (const auto& [hs, adv_channels] : adv_set.channels) {
        auto& acc = sums[hs];
        if (acc.empty()) acc.assign(p_values.size(), 0.0);
        auto dit = diff.channels.find(hs);
        const size_t a = dit == diff.channels.end() ? 0 : dit->second.size();
        acc[k] += static_cast<double>(a) / static_cast<double>(adv_channels.size());
      }
    }
  }
  for (auto& [hs, acc] : sums) {
    for (double& v : acc) v /= static_cast<double>(pairs.size());
    curve.fractions.emplace(hs, std::move(acc));
  }
  return curve;
}

}  // namespace nsvit
