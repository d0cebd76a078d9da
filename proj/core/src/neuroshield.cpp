#include "nsvit/neuroshield.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>

#include <nlohmann/json.hpp>

#include "nsvit/errors.hpp"
#include "nsvit/parallel.hpp"
#include "nsvit/rng.hpp"

namespace nsvit {

namespace {

using json = nlohmann::ordered_json;

std::vector<int> all_layers(const VitConfig& cfg) {
  std::vector<int> v(static_cast<size_t>(cfg.depth));
  for (int l = 0; l < cfg.depth; ++l) v[static_cast<size_t>(l)] = l;
  return v;
}

std::vector<Site> all_blocks() {
  return std::vector<Site>(kAllSites.begin(), kAllSites.end());
}

std::vector<int> normalize_layers(const VitConfig& cfg, std::vector<int> layers) {
  if (layers.empty()) return all_layers(cfg);
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  for (int l : layers)
    NSVIT_REQUIRE(l >= 0 && l < cfg.depth,
                  "layer ", l, " out of range for depth ", cfg.depth);
  return layers;
}

std::vector<Site> normalize_blocks(std::vector<Site> blocks) {
  if (blocks.empty()) return all_blocks();
  std::sort(blocks.begin(), blocks.end());
  blocks.erase(std::unique(blocks.begin(), blocks.end()), blocks.end());
  return blocks;
}

}  // namespace

CalibrationSet CalibrationSet::from_adversarial_set(const AdversarialSet& set) {
  CalibrationSet ncs;
  ncs.provenance = set.config;
  ncs.seed = set.seed;
  ncs.pairs.reserve(set.clean.size());
  for (size_t i = 0; i < set.clean.size(); ++i)
    ncs.pairs.emplace_back(set.clean[i].clone(), set.adversarial[i].clone());
  return ncs;
}

void CalibrationSet::validate(const VitConfig& cfg) const {
  NSVIT_REQUIRE(!pairs.empty(), "calibration set is empty");
  const std::vector<int> want{cfg.channels, cfg.image_size, cfg.image_size};
  for (size_t i = 0; i < pairs.size(); ++i) {
    NSVIT_REQUIRE(pairs[i].first.shape() == want && pairs[i].second.shape() == want,
                  "calibration pair ", i, " has wrong image shape");
  }
}

void NeutralizationPlan::validate(const VitConfig& cfg) const {
  const bool identity_probe = alpha == 1.0f;
  NSVIT_REQUIRE((alpha >= 0.0f && alpha < 0.5f) || identity_probe,
                "alpha must lie in [0, 0.5) or equal 1, got ", alpha);
  NSVIT_REQUIRE(p > 0.0 && p <= 100.0, "p must lie in (0, 100], got ", p);
  for (int l : layers)
    NSVIT_REQUIRE(l >= 0 && l < cfg.depth, "plan layer ", l, " out of range");
  for (const auto& [hs, chans] : channels) {
    NSVIT_REQUIRE(hs.layer >= 0 && hs.layer < cfg.depth,
                  "plan site layer ", hs.layer, " out of range");
    const int width = cfg.site_width(hs.site);
    int prev = -1;
    for (int c : chans) {
      NSVIT_REQUIRE(c >= 0 && c < width, "plan channel ", c, " out of range at ",
                    hook_site_str(hs));
      NSVIT_REQUIRE(c > prev, "plan channels must be sorted and unique at ",
                    hook_site_str(hs));
      prev = c;
    }
  }
}

PatchPlan NeutralizationPlan::to_patch_plan() const {
  PatchPlan pp;
  for (const auto& [hs, chans] : channels) {
    if (chans.empty()) continue;
    pp.sites[hs] = PatchPlan::SitePatch{chans, alpha};
  }
  return pp;
}

size_t NeutralizationPlan::total_neurons() const {
  size_t n = 0;
  for (const auto& [hs, chans] : channels) n += chans.size();
  return n;
}

NeutralizationPlan calibrate(const VitModel& model, const CalibrationSet& ncs,
                             const CalibrateOptions& opts) {
  const VitConfig& cfg = model.config();
  ncs.validate(cfg);
  NSVIT_REQUIRE(opts.subset_fraction > 0.0 && opts.subset_fraction <= 1.0,
                "subset_fraction must lie in (0, 1], got ", opts.subset_fraction);
  NSVIT_REQUIRE(opts.target == ScalarTarget::kPredictedLogit,
                "calibration needs labels for target ",
                scalar_target_name(opts.target),
                "; only predicted-logit is supported");

  NeutralizationPlan plan;
  plan.alpha = opts.alpha;
  plan.p = opts.p;
  plan.layers = normalize_layers(cfg, opts.layers);
  plan.blocks = normalize_blocks(opts.blocks);
  plan.subset_fraction = opts.subset_fraction;
  plan.occurrence_threshold = opts.occurrence_threshold;
  plan.validate(cfg);

  const size_t count = ncs.pairs.size();
  size_t n_subset = static_cast<size_t>(
      std::llround(opts.subset_fraction * static_cast<double>(count)));
  n_subset = std::clamp<size_t>(n_subset, 1, count);
  std::vector<size_t> subset =
      Rng::stream(opts.seed, "calibration.subset").sample_indices(count, n_subset);

  const std::set<int> layer_set(plan.layers.begin(), plan.layers.end());
  const std::set<Site> block_set(plan.blocks.begin(), plan.blocks.end());

  // Per-pair adversarial sets, computed in parallel and reduced in order.
  std::vector<NeuronSet> diffs(n_subset);
  parallel_for(static_cast<int64_t>(n_subset), [&](int64_t i) {
    const auto& [clean, perturbed] = ncs.pairs[subset[static_cast<size_t>(i)]];
    ImportanceMap imp_clean = neuron_importance(model, clean, opts.target);
    ImportanceMap imp_adv = neuron_importance(model, perturbed, opts.target);
    diffs[static_cast<size_t>(i)] = adversarial_neuron_set(
        top_p_neurons(imp_clean, opts.p), top_p_neurons(imp_adv, opts.p));
  });

  std::map<NeuronId, int64_t> counts;
  for (const NeuronSet& diff : diffs) {
    for (const auto& [hs, chans] : diff.channels) {
      if (!layer_set.count(hs.layer) || !block_set.count(hs.site)) continue;
      for (int c : chans) ++counts[NeuronId{hs.layer, hs.site, c}];
    }
  }

  const double threshold = opts.occurrence_threshold <= 0.0
                               ? 1.0 / static_cast<double>(n_subset)
                               : opts.occurrence_threshold;
  for (const auto& [id, n] : counts) {
    const double frac = static_cast<double>(n) / static_cast<double>(n_subset);
    if (frac + 1e-12 >= threshold)
      plan.channels[HookSite{id.layer, id.site}].push_back(id.channel);
  }
  // Map iteration over NeuronId is already (layer, site, channel)-ordered,
  // so the per-site lists come out sorted and unique.
  return plan;
}

Tensor defended_forward(const VitModel& model, const NeutralizationPlan& plan,
                        const Tensor& image) {
  plan.validate(model.config());
  const PatchPlan pp = plan.to_patch_plan();
  return model.forward(image, nullptr, pp.empty() ? nullptr : &pp);
}

int defended_predict(const VitModel& model, const NeutralizationPlan& plan,
                     const Tensor& image) {
  plan.validate(model.config());
  const PatchPlan pp = plan.to_patch_plan();
  return model.predict(image, pp.empty() ? nullptr : &pp);
}

namespace {

double patched_accuracy(const VitModel& model, const PatchPlan& pp,
                        const std::vector<Tensor>& images,
                        const std::vector<int>& labels) {
  NSVIT_REQUIRE(!images.empty(), "empty evaluation set");
  NSVIT_REQUIRE(images.size() == labels.size(),
                "images/labels size mismatch: ", images.size(), " vs ", labels.size());
  std::vector<int> hits(images.size(), 0);
  parallel_for(static_cast<int64_t>(images.size()), [&](int64_t i) {
    hits[static_cast<size_t>(i)] =
        model.predict(images[static_cast<size_t>(i)], pp.empty() ? nullptr : &pp) ==
        labels[static_cast<size_t>(i)];
  });
  int64_t correct = 0;
  for (int h : hits) correct += h;
  return 100.0 * static_cast<double>(correct) / static_cast<double>(images.size());
}

}  // namespace

double plan_accuracy(const VitModel& model, const NeutralizationPlan& plan,
                     const std::vector<Tensor>& images, const std::vector<int>& labels) {
  plan.validate(model.config());
  return patched_accuracy(model, plan.to_patch_plan(), images, labels);
}

NeutralizationPlan restrict_plan_layers(const NeutralizationPlan& plan,
                                        const std::vector<int>& keep_layers) {
  const std::set<int> keep(keep_layers.begin(), keep_layers.end());
  NeutralizationPlan out = plan;
  out.channels.clear();
  out.layers.clear();
  for (int l : plan.layers)
    if (keep.count(l)) out.layers.push_back(l);
  for (const auto& [hs, chans] : plan.channels)
    if (keep.count(hs.layer)) out.channels[hs] = chans;
  return out;
}

LayerSweepResult layer_ablation_sweep(const VitModel& model,
                                      const NeutralizationPlan& plan,
                                      const std::vector<Tensor>& images,
                                      const std::vector<int>& labels) {
  const int depth = model.config().depth;
  LayerSweepResult res;
  res.front.resize(static_cast<size_t>(depth) + 1);
  res.back.resize(static_cast<size_t>(depth) + 1);
  for (int m = 0; m <= depth; ++m) {
    std::vector<int> front_layers, back_layers;
    for (int l = 0; l < m; ++l) front_layers.push_back(l);
    for (int l = depth - m; l < depth; ++l) back_layers.push_back(l);
    res.front[static_cast<size_t>(m)] =
        plan_accuracy(model, restrict_plan_layers(plan, front_layers), images, labels);
    res.back[static_cast<size_t>(m)] =
        plan_accuracy(model, restrict_plan_layers(plan, back_layers), images, labels);
  }
  return res;
}

std::vector<SubsetSweepCell> subset_size_sweep(
    const VitModel& model, const CalibrationSet& ncs,
    const std::vector<double>& fractions, const std::vector<double>& p_values,
    const std::vector<float>& alphas, const std::vector<Tensor>& clean_images,
    const std::vector<Tensor>& adv_images, const std::vector<int>& labels,
    const CalibrateOptions& base) {
  NSVIT_REQUIRE(!fractions.empty() && !p_values.empty() && !alphas.empty(),
                "empty sweep grid");
  std::vector<SubsetSweepCell> cells;
  for (double f : fractions) {
    for (double p : p_values) {
      CalibrateOptions opts = base;
      opts.subset_fraction = f;
      opts.p = p;
      // Channel selection does not depend on alpha, so one calibration per
      // (fraction, p) matches a standalone run for every alpha cell.
      NeutralizationPlan plan = calibrate(model, ncs, opts);
      for (float a : alphas) {
        // Grid columns are raw multipliers: the published coefficient columns
        // include values outside the plan's operational alpha range, so cells
        // are scored through the patch mechanism without plan validation.
        plan.alpha = a;
        const PatchPlan pp = plan.to_patch_plan();
        SubsetSweepCell cell;
        cell.fraction = f;
        cell.p = p;
        cell.alpha = a;
        cell.robust_accuracy = patched_accuracy(model, pp, adv_images, labels);
        cell.natural_accuracy = patched_accuracy(model, pp, clean_images, labels);
        cells.push_back(cell);
      }
    }
  }
  return cells;
}

void save_plan(const std::string& path, const NeutralizationPlan& plan) {
  json j;
  j["version"] = 1;
  j["checkpoint_sha256"] = plan.checkpoint_sha256;
  j["p"] = plan.p;
  j["alpha"] = plan.alpha;
  j["occurrence_threshold"] = plan.occurrence_threshold;
  j["layers"] = plan.layers;
  json blocks = json::array();
  for (Site s : plan.blocks) blocks.push_back(site_name(s));
  j["blocks"] = blocks;

  // Neurons sorted lexicographically by (layer, site name, channel). Note
  // the site-name order differs from enum order.
  std::vector<std::tuple<int, std::string, int>> neurons;
  for (const auto& [hs, chans] : plan.channels)
    for (int c : chans)
      neurons.emplace_back(hs.layer, std::string(site_name(hs.site)), c);
  std::sort(neurons.begin(), neurons.end());
  json jn = json::array();
  for (const auto& [layer, site, channel] : neurons)
    jn.push_back(json::array({layer, site, channel}));
  j["neurons"] = jn;

  std::ofstream out(path, std::ios::binary);
  NSVIT_IO_REQUIRE(out.good(), "cannot open plan file for writing: ", path);
  out << j.dump(2) << '\n';
  NSVIT_IO_REQUIRE(out.good(), "failed writing plan file: ", path);
}

NeutralizationPlan load_plan(const std::string& path,
                             const std::string& expect_checkpoint_sha256) {
  std::ifstream in(path, std::ios::binary);
  NSVIT_IO_REQUIRE(in.good(), "cannot open plan file: ", path);
  NeutralizationPlan plan;
  try {
    json j = json::parse(in);
    NSVIT_IO_REQUIRE(j.at("version").get<int>() == 1, "unsupported plan version");
    plan.checkpoint_sha256 = j.at("checkpoint_sha256").get<std::string>();
    plan.p = j.at("p").get<double>();
    plan.alpha = j.at("alpha").get<float>();
    plan.occurrence_threshold = j.at("occurrence_threshold").get<double>();
    plan.layers = j.at("layers").get<std::vector<int>>();
    plan.blocks.clear();
    for (const auto& b : j.at("blocks"))
      plan.blocks.push_back(site_from_name(b.get<std::string>()));
    for (const auto& n : j.at("neurons")) {
      NSVIT_IO_REQUIRE(n.is_array() && n.size() == 3, "malformed neuron entry");
      const HookSite hs{n[0].get<int>(), site_from_name(n[1].get<std::string>())};
      plan.channels[hs].push_back(n[2].get<int>());
    }
  } catch (const json::exception& e) {
    throw IoError(detail::concat("malformed plan file ", path, ": ", e.what()));
  } catch (const ContractError& e) {
    throw IoError(detail::concat("malformed plan file ", path, ": ", e.what()));
  }
  for (auto& [hs, chans] : plan.channels) {
    std::sort(chans.begin(), chans.end());
    NSVIT_IO_REQUIRE(std::adjacent_find(chans.begin(), chans.end()) == chans.end(),
                     "duplicate neuron at ", hook_site_str(hs), " in ", path);
  }
  if (!expect_checkpoint_sha256.empty() && !plan.checkpoint_sha256.empty() &&
      expect_checkpoint_sha256 != plan.checkpoint_sha256) {
    std::cerr << "[nsvit] warning: plan " << path << " was calibrated for checkpoint "
              << plan.checkpoint_sha256 << " but the current checkpoint hashes to "
              << expect_checkpoint_sha256 << "\n";
  }
  return plan;
}

}  // namespace nsvit
