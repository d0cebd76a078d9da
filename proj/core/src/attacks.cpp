#include "nsvit/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <utility>

#include <nlohmann/json.hpp>

#include "nsvit/checkpoint.hpp"
#include "nsvit/errors.hpp"
#include "nsvit/hash.hpp"
#include "nsvit/ops.hpp"
#include "nsvit/parallel.hpp"

namespace nsvit {

using nlohmann::json;

std::string_view attack_kind_name(AttackKind kind) {
  switch (kind) {
    case AttackKind::kFgsm: return "fgsm";
    case AttackKind::kPgd: return "pgd";
    case AttackKind::kIgo: return "igo";
  }
  throw ContractError("attack_kind_name: invalid enum value");
}

AttackKind attack_kind_from_name(std::string_view name) {
  if (name == "fgsm") return AttackKind::kFgsm;
  if (name == "pgd") return AttackKind::kPgd;
  if (name == "igo") return AttackKind::kIgo;
  throw ContractError(detail::concat("unknown attack kind \"", name, "\""));
}

void AttackConfig::validate() const {
  NSVIT_REQUIRE(epsilon >= 0.0, "attack: epsilon must be >= 0, got ", epsilon);
  if (kind == AttackKind::kPgd) {
    NSVIT_REQUIRE(steps >= 1, "pgd: steps must be >= 1, got ", steps);
    NSVIT_REQUIRE(step_size > 0.0, "pgd: step_size must be > 0, got ", step_size);
  }
  if (kind == AttackKind::kIgo) {
    NSVIT_REQUIRE(igo.cos_target > 0.0 && igo.cos_target <= 1.0,
                  "igo: cos_target must lie in (0, 1], got ", igo.cos_target);
    NSVIT_REQUIRE(igo.l2_max > 0.0, "igo: l2_max must be > 0, got ", igo.l2_max);
    NSVIT_REQUIRE(igo.lr > 0.0, "igo: lr must be > 0, got ", igo.lr);
    NSVIT_REQUIRE(igo.max_iters >= 0, "igo: max_iters must be >= 0, got ", igo.max_iters);
  }
}

double scaled_l2_max(const VitConfig& cfg) {
  const double volume = static_cast<double>(cfg.image_size) * cfg.image_size * cfg.channels;
  return 36.0 * std::sqrt(volume / (224.0 * 224.0 * 3.0));
}

void clamp01(Tensor& x) {
  for (float& v : x.data_mut()) v = std::min(1.0f, std::max(0.0f, v));
}

void project_linf(Tensor& x, const Tensor& center, double epsilon) {
  NSVIT_REQUIRE(x.numel() == center.numel(),
                "project_linf: size mismatch ", x.shape_str(), " vs ", center.shape_str());
  const float eps = static_cast<float>(epsilon);
  auto xs = x.data_mut();
  auto cs = center.data();
  for (size_t i = 0; i < xs.size(); ++i) {
    const float lo = cs[i] - eps, hi = cs[i] + eps;
    xs[i] = std::min(hi, std::max(lo, xs[i]));
  }
}

double linf_dist(const Tensor& a, const Tensor& b) {
  NSVIT_REQUIRE(a.numel() == b.numel(), "linf_dist: size mismatch");
  auto as = a.data(), bs = b.data();
  double m = 0.0;
  for (size_t i = 0; i < as.size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(as[i]) - bs[i]));
  }
  return m;
}

double l2_dist(const Tensor& a, const Tensor& b) {
  NSVIT_REQUIRE(a.numel() == b.numel(), "l2_dist: size mismatch");
  auto as = a.data(), bs = b.data();
  double s = 0.0;
  for (size_t i = 0; i < as.size(); ++i) {
    const double d = static_cast<double>(as[i]) - bs[i];
    s += d * d;
  }
  return std::sqrt(s);
}

bool in_unit_range(const Tensor& x) {
  for (float v : x.data()) {
    if (!(v >= 0.0f && v <= 1.0f)) return false;
  }
  return true;
}

Tensor input_gradient(const VitModel& model, const Tensor& image, int label) {
  Graph g;
  Tensor x = image.clone();
  x.set_requires_grad(true);
  Tensor logits = model.forward(x, nullptr, nullptr, &g);
  Tensor loss = ops::cross_entropy(logits, label, &g);
  g.backward(loss);
  auto gx = x.grad();
  return Tensor::from_data(std::vector<int>(image.shape().begin(), image.shape().end()),
                           {gx.begin(), gx.end()});
}

namespace {

inline float sign_of(float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); }

Tensor pgd_impl(const VitModel& model, const Tensor& image, int label, double epsilon,
                int steps, double step_size, bool random_start, Rng* rng) {
  if (epsilon == 0.0) return image.clone();
  Tensor x = image.clone();
  if (random_start) {
    NSVIT_REQUIRE(rng != nullptr, "pgd: random_start requires an rng");
    auto xs = x.data_mut();
    for (float& v : xs) {
      v += static_cast<float>(rng->uniform(-epsilon, epsilon));
    }
    clamp01(x);
  }
  const float step = static_cast<float>(step_size);
  for (int t = 0; t < steps; ++t) {
    Tensor g = input_gradient(model, x, label);
    auto xs = x.data_mut();
    auto gs = g.data();
    for (size_t i = 0; i < xs.size(); ++i) xs[i] += step * sign_of(gs[i]);
    project_linf(x, image, epsilon);
    clamp01(x);
  }
  return x;
}

}  // namespace

Tensor fgsm(const VitModel& model, const Tensor& image, int label, double epsilon) {
  NSVIT_REQUIRE(epsilon >= 0.0, "fgsm: epsilon must be >= 0, got ", epsilon);
  // One sign step at full budget; projection is then a no-op, so this is the
  // single-step specialization of the pgd loop (and bitwise equal to it).
  return pgd_impl(model, image, label, epsilon, 1, epsilon, false, nullptr);
}

Tensor pgd(const VitModel& model, const Tensor& image, int label,
           const AttackConfig& cfg, Rng* rng) {
  NSVIT_REQUIRE(cfg.kind == AttackKind::kPgd, "pgd: config kind is ",
                attack_kind_name(cfg.kind));
  cfg.validate();
  return pgd_impl(model, image, label, cfg.epsilon, cfg.steps, cfg.step_size,
                  cfg.random_start, rng);
}

IgoResult igo(const VitModel& model, const Tensor& image, const Tensor& target_image,
              const AttackConfig& cfg) {
  NSVIT_REQUIRE(cfg.kind == AttackKind::kIgo, "igo: config kind is ",
                attack_kind_name(cfg.kind));
  cfg.validate();
  NSVIT_REQUIRE(image.shape() == target_image.shape(), "igo: image shape ",
                image.shape_str(), " differs from target shape ", target_image.shape_str());
  const int depth = model.config().depth;
  const Tensor z_target = model.cls_embedding(target_image, depth);

  IgoResult res;
  Tensor x = image.clone();
  const float lr = static_cast<float>(cfg.igo.lr);
  for (int t = 0;; ++t) {
    Graph g;
    Tensor xt = x.clone();
    xt.set_requires_grad(true);
    Tensor z = model.cls_embedding(xt, depth, &g);
    Tensor cosv = ops::cosine_similarity(z, z_target, &g);
    const float c = cosv.item();
    if (!std::isfinite(c)) {
      throw ContractError(detail::concat(
          "igo: non-finite objective at iteration ", t, " (cos=", c, ")"));
    }
    if (t == 0) res.initial_cos = c;
    res.final_cos = c;
    res.iterations = t;
    const bool converged =
        c >= static_cast<float>(cfg.igo.cos_target) && l2_dist(x, image) <= cfg.igo.l2_max;
    if (converged || t >= cfg.igo.max_iters) break;
    // Descending on 1 - cos is ascending on cos; backward from cos directly
    // produces bit-identical iterates without an extra node.
    g.backward(cosv);
    auto gs = xt.grad();
    auto xs = x.data_mut();
    for (size_t i = 0; i < xs.size(); ++i) {
      xs[i] = std::min(1.0f, std::max(0.0f, xs[i] + lr * gs[i]));
    }
  }
  res.image = x;
  return res;
}

void AdversarialSet::validate() const {
  NSVIT_REQUIRE(!clean.empty(), "adversarial set: empty");
  NSVIT_REQUIRE(adversarial.size() == clean.size() && labels.size() == clean.size(),
                "adversarial set: clean/adversarial/label counts differ (", clean.size(),
                "/", adversarial.size(), "/", labels.size(), ")");
  if (config.kind == AttackKind::kIgo) {
    NSVIT_REQUIRE(target_labels.size() == clean.size(),
                  "adversarial set: igo requires one target label per sample");
  } else {
    NSVIT_REQUIRE(target_labels.empty(),
                  "adversarial set: target labels only apply to igo");
  }
  for (size_t i = 0; i < clean.size(); ++i) {
    NSVIT_REQUIRE(clean[i].shape() == clean[0].shape() &&
                      adversarial[i].shape() == clean[0].shape(),
                  "adversarial set: inconsistent image shape at sample ", i);
  }
}

AdversarialSet generate_adversarial_set(const VitModel& model,
                                        const std::vector<Tensor>& images,
                                        const std::vector<int>& labels,
                                        const AttackConfig& cfg, uint64_t seed,
                                        const std::vector<Tensor>* igo_targets,
                                        const std::vector<int>* igo_target_labels) {
  cfg.validate();
  NSVIT_REQUIRE(!images.empty(), "generate_adversarial_set: no images");
  NSVIT_REQUIRE(images.size() == labels.size(),
                "generate_adversarial_set: ", images.size(), " images vs ",
                labels.size(), " labels");
  if (cfg.kind == AttackKind::kIgo) {
    NSVIT_REQUIRE(igo_targets && igo_targets->size() == images.size() &&
                      igo_target_labels && igo_target_labels->size() == images.size(),
                  "generate_adversarial_set: igo needs one target image+label per sample");
  }

  AdversarialSet set;
  set.config = cfg;
  set.seed = seed;
  set.clean = images;
  set.labels = labels;
  set.adversarial.resize(images.size());
  if (cfg.kind == AttackKind::kIgo) set.target_labels = *igo_target_labels;

  parallel_for(images.size(), [&](size_t i) {
    switch (cfg.kind) {
      case AttackKind::kFgsm:
        set.adversarial[i] = fgsm(model, images[i], labels[i], cfg.epsilon);
        break;
      case AttackKind::kPgd: {
        Rng rng = Rng::stream(seed, "attack.pgd", i);
        set.adversarial[i] = pgd(model, images[i], labels[i], cfg, &rng);
        break;
      }
      case AttackKind::kIgo:
        set.adversarial[i] = igo(model, images[i], (*igo_targets)[i], cfg).image;
        break;
    }
  });
  return set;
}

json attack_config_to_json(const AttackConfig& cfg) {
  return json{{"kind", attack_kind_name(cfg.kind)},
              {"epsilon", cfg.epsilon},
              {"steps", cfg.steps},
              {"step_size", cfg.step_size},
              {"random_start", cfg.random_start},
              {"igo",
               {{"lr", cfg.igo.lr},
                {"max_iters", cfg.igo.max_iters},
                {"cos_target", cfg.igo.cos_target},
                {"l2_max", cfg.igo.l2_max}}}};
}

AttackConfig attack_config_from_json(const json& j) {
  AttackConfig cfg;
  cfg.kind = attack_kind_from_name(j.at("kind").get<std::string>());
  cfg.epsilon = j.at("epsilon").get<double>();
  cfg.steps = j.at("steps").get<int>();
  cfg.step_size = j.at("step_size").get<double>();
  cfg.random_start = j.at("random_start").get<bool>();
  const json& ig = j.at("igo");
  cfg.igo.lr = ig.at("lr").get<double>();
  cfg.igo.max_iters = ig.at("max_iters").get<int>();
  cfg.igo.cos_target = ig.at("cos_target").get<double>();
  cfg.igo.l2_max = ig.at("l2_max").get<double>();
  return cfg;
}

namespace {

std::filesystem::path blob_path_for(const std::filesystem::path& manifest_path) {
  std::filesystem::path p = manifest_path;
  p.replace_extension(".bin");
  return p;
}

// Stacks per-sample rank-3 images into one [count, C*H*W] record payload.
Tensor stack_images(const std::vector<Tensor>& images) {
  const int n = static_cast<int>(images.size());
  const int w = static_cast<int>(images[0].numel());
  Tensor out = Tensor::zeros({n, w});
  auto dst = out.data_mut();
  for (int i = 0; i < n; ++i) {
    auto src = images[i].data();
    std::copy(src.begin(), src.end(), dst.begin() + static_cast<size_t>(i) * w);
  }
  return out;
}

std::vector<Tensor> unstack_images(const Tensor& stacked, const std::vector<int>& shape) {
  const int n = stacked.dim(0), w = stacked.dim(1);
  std::vector<Tensor> images;
  images.reserve(static_cast<size_t>(n));
  auto src = stacked.data();
  for (int i = 0; i < n; ++i) {
    auto row = src.subspan(static_cast<size_t>(i) * w, static_cast<size_t>(w));
    images.push_back(Tensor::from_data(shape, {row.begin(), row.end()}));
  }
  return images;
}

Tensor labels_to_tensor(const std::vector<int>& labels) {
  std::vector<float> v(labels.begin(), labels.end());
  return Tensor::from_data({static_cast<int>(labels.size())}, v);
}

std::vector<int> labels_from_tensor(const Tensor& t) {
  std::vector<int> out;
  out.reserve(t.numel());
  for (float v : t.data()) out.push_back(static_cast<int>(std::lround(v)));
  return out;
}

}  // namespace

void save_adversarial_set(const AdversarialSet& set, const std::string& manifest_path) {
  set.validate();
  const std::filesystem::path mpath(manifest_path);
  const std::filesystem::path bpath = blob_path_for(mpath);

  {
    std::ofstream os(bpath, std::ios::binary);
    NSVIT_IO_REQUIRE(os.good(), "cannot open ", bpath.string(), " for writing");
    const uint32_t records = set.config.kind == AttackKind::kIgo ? 4u : 3u;
    wire::write_u32(os, records);
    write_tensor_record(os, "clean", stack_images(set.clean));
    write_tensor_record(os, "adversarial", stack_images(set.adversarial));
    write_tensor_record(os, "labels", labels_to_tensor(set.labels));
    if (set.config.kind == AttackKind::kIgo) {
      write_tensor_record(os, "target_labels", labels_to_tensor(set.target_labels));
    }
    NSVIT_IO_REQUIRE(os.good(), "write failure on ", bpath.string());
  }

  json manifest{{"format", "nsvit-advset"},
                {"version", 1},
                {"kind", attack_kind_name(set.config.kind)},
                {"config", attack_config_to_json(set.config)},
                {"seed", set.seed},
                {"count", set.count()},
                {"image_shape", set.clean[0].shape()},
                {"blob", bpath.filename().string()},
                {"blob_sha256", sha256_file_hex(bpath.string())}};
  std::ofstream os(mpath);
  NSVIT_IO_REQUIRE(os.good(), "cannot open ", manifest_path, " for writing");
  os << manifest.dump(2) << "\n";
  NSVIT_IO_REQUIRE(os.good(), "write failure on ", manifest_path);
}

AdversarialSet load_adversarial_set(const std::string& manifest_path) {
  std::ifstream is(manifest_path);
  NSVIT_IO_REQUIRE(is.good(), "cannot open ", manifest_path);
  json manifest;
  try {
    is >> manifest;
  } catch (const json::exception& e) {
    throw IoError(detail::concat("malformed manifest ", manifest_path, ": ", e.what()));
  }

  AdversarialSet set;
  try {
    NSVIT_IO_REQUIRE(manifest.at("format").get<std::string>() == "nsvit-advset",
                     manifest_path, ": not an adversarial-set manifest");
    NSVIT_IO_REQUIRE(manifest.at("version").get<int>() == 1, manifest_path,
                     ": unsupported manifest version");
    set.config = attack_config_from_json(manifest.at("config"));
    set.seed = manifest.at("seed").get<uint64_t>();

    const std::filesystem::path bpath =
        std::filesystem::path(manifest_path).parent_path() /
        manifest.at("blob").get<std::string>();
    const std::string expect_hash = manifest.at("blob_sha256").get<std::string>();
    NSVIT_IO_REQUIRE(sha256_file_hex(bpath.string()) == expect_hash,
                     bpath.string(), ": blob hash mismatch with manifest");

    std::ifstream bs(bpath, std::ios::binary);
    NSVIT_IO_REQUIRE(bs.good(), "cannot open ", bpath.string());
    const uint32_t records = wire::read_u32(bs);
    std::map<std::string, Tensor> by_name;
    for (uint32_t i = 0; i < records; ++i) {
      NamedTensor rec = read_tensor_record(bs);
      NSVIT_IO_REQUIRE(by_name.emplace(rec.name, rec.tensor).second,
                       bpath.string(), ": duplicate record \"", rec.name, "\"");
    }
    auto take = [&](const std::string& name) {
      auto it = by_name.find(name);
      NSVIT_IO_REQUIRE(it != by_name.end(), bpath.string(), ": missing record \"", name,
                       "\"");
      return it->second;
    };

    const std::vector<int> shape = manifest.at("image_shape").get<std::vector<int>>();
    const size_t count = manifest.at("count").get<size_t>();
    set.clean = unstack_images(take("clean"), shape);
    set.adversarial = unstack_images(take("adversarial"), shape);
    set.labels = labels_from_tensor(take("labels"));
    if (set.config.kind == AttackKind::kIgo) {
      set.target_labels = labels_from_tensor(take("target_labels"));
    }
    NSVIT_IO_REQUIRE(set.count() == count, manifest_path, ": manifest count ", count,
                     " does not match blob rows ", set.count());
  } catch (const json::exception& e) {
    throw IoError(detail::concat("malformed manifest ", manifest_path, ": ", e.what()));
  }
  try {
    set.validate();
  } catch (const ContractError& e) {
    throw IoError(detail::concat("invalid adversarial set in ", manifest_path, ": ",
                                 e.what()));
  }
  return set;
}

}  // namespace nsvit
