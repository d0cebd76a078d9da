#include "nsvit/pipeline.hpp"

#include <algorithm>
#include <array>
#include <initializer_list>
#include <map>
#include <optional>
#include <set>
#include <utility>

#include "nsvit/analysis.hpp"
#include "nsvit/checkpoint.hpp"
#include "nsvit/dataset.hpp"
#include "nsvit/errors.hpp"
#include "nsvit/eval.hpp"
#include "nsvit/hash.hpp"
#include "nsvit/parallel.hpp"
#include "nsvit/report.hpp"

namespace nsvit {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::kTrain: return "train";
    case Stage::kGenNcs: return "gen-ncs";
    case Stage::kAttack: return "attack";
    case Stage::kCalibrate: return "calibrate";
    case Stage::kEvaluate: return "evaluate";
    case Stage::kAnalyze: return "analyze";
    case Stage::kSweep: return "sweep";
  }
  throw ContractError("stage_name: invalid enum value");
}

Stage stage_from_name(std::string_view name) {
  for (int i = 0; i < kStageCount; ++i) {
    const Stage s = static_cast<Stage>(i);
    if (stage_name(s) == name) return s;
  }
  throw ContractError(detail::concat(
      "unknown stage \"", name,
      "\"; expected one of train, gen-ncs, attack, calibrate, evaluate, "
      "analyze, sweep"));
}

const std::vector<Stage>& stage_dependencies(Stage s) {
  static const std::array<std::vector<Stage>, kStageCount> deps = {{
      /* train     */ {},
      /* gen-ncs   */ {Stage::kTrain},
      /* attack    */ {Stage::kTrain},
      /* calibrate */ {Stage::kTrain, Stage::kGenNcs},
      /* evaluate  */ {Stage::kTrain, Stage::kCalibrate, Stage::kAttack},
      /* analyze   */ {Stage::kTrain, Stage::kAttack},
      /* sweep     */ {Stage::kTrain, Stage::kGenNcs, Stage::kCalibrate,
                       Stage::kAttack},
  }};
  return deps[static_cast<size_t>(s)];
}

namespace {

constexpr std::initializer_list<const char*> kTopLevelKeys = {
    "model", "train", "attacks", "ncs",  "neuroshield",
    "baselines", "eval",  "sweeps",  "seed", "out_dir"};

void require_keys(const json& j, std::initializer_list<const char*> allowed,
                  const char* where) {
  NSVIT_REQUIRE(j.is_object(), "config section \"", where, "\" must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    const bool known =
        std::any_of(allowed.begin(), allowed.end(),
                    [&key](const char* k) { return key == k; });
    NSVIT_REQUIRE(known, "unknown key \"", key, "\" in config section \"", where,
                  "\"");
  }
}

AttackConfig parse_attack(const json& j, AttackConfig base, const char* where) {
  require_keys(j, {"kind", "epsilon", "steps", "step_size", "random_start", "igo"},
               where);
  if (j.contains("kind")) {
    base.kind = attack_kind_from_name(j.at("kind").get<std::string>());
  }
  base.epsilon = j.value("epsilon", base.epsilon);
  base.steps = j.value("steps", base.steps);
  base.step_size = j.value("step_size", base.step_size);
  base.random_start = j.value("random_start", base.random_start);
  if (j.contains("igo")) {
    const json& g = j.at("igo");
    require_keys(g, {"lr", "max_iters", "cos_target", "l2_max"}, where);
    base.igo.lr = g.value("lr", base.igo.lr);
    base.igo.max_iters = g.value("max_iters", base.igo.max_iters);
    base.igo.cos_target = g.value("cos_target", base.igo.cos_target);
    base.igo.l2_max = g.value("l2_max", base.igo.l2_max);
  }
  return base;
}

std::vector<AttackConfig> default_attacks() {
  AttackConfig fgsm;
  fgsm.kind = AttackKind::kFgsm;
  fgsm.steps = 1;
  fgsm.random_start = false;
  AttackConfig pgd;  // defaults are the pgd protocol
  return {fgsm, pgd};
}

ordered_json to_ordered(const json& j) { return ordered_json::parse(j.dump()); }

ordered_json plan_options_slice(const ExperimentConfig& c) {
  ordered_json j;
  j["p"] = c.plan_options.p;
  j["alpha"] = c.plan_options.alpha;
  j["layers"] = c.plan_options.layers;
  ordered_json blocks = ordered_json::array();
  for (Site s : c.plan_options.blocks) blocks.push_back(std::string(site_name(s)));
  j["blocks"] = std::move(blocks);
  j["subset_fraction"] = c.plan_options.subset_fraction;
  j["occurrence_threshold"] = c.plan_options.occurrence_threshold;
  return j;
}

ordered_json attacks_slice(const std::vector<AttackConfig>& attacks) {
  ordered_json arr = ordered_json::array();
  for (const AttackConfig& a : attacks) arr.push_back(to_ordered(attack_config_to_json(a)));
  return arr;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& config) {
  require_keys(config, kTopLevelKeys, "config");
  ExperimentConfig c;
  c.seed = config.value("seed", static_cast<uint64_t>(0));
  NSVIT_REQUIRE(config.contains("out_dir"), "config requires out_dir");
  c.out_dir = config.at("out_dir").get<std::string>();

  if (config.contains("model")) {
    const json& m = config.at("model");
    require_keys(m,
                 {"image_size", "channels", "patch_size", "depth", "embed_dim",
                  "heads", "mlp_ratio", "num_classes"},
                 "model");
    c.model.image_size = m.value("image_size", c.model.image_size);
    c.model.channels = m.value("channels", c.model.channels);
    c.model.patch_size = m.value("patch_size", c.model.patch_size);
    c.model.depth = m.value("depth", c.model.depth);
    c.model.embed_dim = m.value("embed_dim", c.model.embed_dim);
    c.model.heads = m.value("heads", c.model.heads);
    c.model.mlp_ratio = m.value("mlp_ratio", c.model.mlp_ratio);
    c.model.num_classes = m.value("num_classes", c.model.num_classes);
  }

  NSVIT_REQUIRE(config.contains("train"), "config requires a train section");
  {
    const json& t = config.at("train");
    require_keys(t,
                 {"dataset", "val_fraction", "test_fraction", "epochs", "lr",
                  "batch_size", "optimizer", "weight_decay", "momentum"},
                 "train");
    NSVIT_REQUIRE(t.contains("dataset"), "train.dataset is required");
    c.train_dataset = t.at("dataset").get<std::string>();
    c.val_fraction = t.value("val_fraction", c.val_fraction);
    c.test_fraction = t.value("test_fraction", c.test_fraction);
    c.train.epochs = t.value("epochs", c.train.epochs);
    c.train.lr = t.value("lr", c.train.lr);
    c.train.batch_size = t.value("batch_size", c.train.batch_size);
    if (t.contains("optimizer")) {
      c.train.optimizer = optimizer_from_name(t.at("optimizer").get<std::string>());
    }
    c.train.weight_decay = t.value("weight_decay", c.train.weight_decay);
    c.train.momentum = t.value("momentum", c.train.momentum);
  }

  if (config.contains("attacks")) {
    NSVIT_REQUIRE(config.at("attacks").is_array(), "attacks must be an array");
    for (const json& a : config.at("attacks")) {
      c.attacks.push_back(parse_attack(a, AttackConfig{}, "attacks"));
    }
  } else {
    c.attacks = default_attacks();
  }

  c.ncs_attack.kind = AttackKind::kIgo;
  if (config.contains("ncs")) {
    const json& n = config.at("ncs");
    require_keys(n, {"dataset", "count", "attack"}, "ncs");
    if (n.contains("dataset")) c.ncs_dataset = n.at("dataset").get<std::string>();
    c.ncs_count = n.value("count", c.ncs_count);
    if (n.contains("attack")) {
      c.ncs_attack = parse_attack(n.at("attack"), c.ncs_attack, "ncs.attack");
    }
  }
  if (c.ncs_dataset.empty()) c.ncs_dataset = c.train_dataset;

  if (config.contains("neuroshield")) {
    const json& p = config.at("neuroshield");
    require_keys(p,
                 {"p", "alpha", "layers", "blocks", "subset_fraction",
                  "occurrence_threshold"},
                 "neuroshield");
    c.plan_options.p = p.value("p", c.plan_options.p);
    c.plan_options.alpha = p.value("alpha", c.plan_options.alpha);
    if (p.contains("layers")) {
      c.plan_options.layers = p.at("layers").get<std::vector<int>>();
    }
    if (p.contains("blocks")) {
      for (const json& b : p.at("blocks")) {
        c.plan_options.blocks.push_back(site_from_name(b.get<std::string>()));
      }
    }
    c.plan_options.subset_fraction =
        p.value("subset_fraction", c.plan_options.subset_fraction);
    c.plan_options.occurrence_threshold =
        p.value("occurrence_threshold", c.plan_options.occurrence_threshold);
  }

  if (config.contains("baselines")) {
    const json& b = config.at("baselines");
    require_keys(b, {"adversarial_training", "smoothing"}, "baselines");
    if (b.contains("adversarial_training")) {
      const json& a = b.at("adversarial_training");
      require_keys(a, {"enabled", "attack", "replay_ratio"},
                   "baselines.adversarial_training");
      c.at_enabled = a.value("enabled", true);
      if (a.contains("attack")) {
        c.at.attack = parse_attack(a.at("attack"), default_at_attack(),
                                   "baselines.adversarial_training.attack");
      }
      c.at.replay_ratio = a.value("replay_ratio", 0.5);
    }
    if (b.contains("smoothing")) {
      const json& sm = b.at("smoothing");
      require_keys(sm, {"enabled", "sigma", "samples"}, "baselines.smoothing");
      c.smoothing_enabled = sm.value("enabled", true);
      c.smoothing_sigma = sm.value("sigma", c.smoothing_sigma);
      c.smoothing_samples = sm.value("samples", c.smoothing_samples);
    }
  }

  if (config.contains("eval")) {
    const json& e = config.at("eval");
    require_keys(e, {"dataset", "sample_count"}, "eval");
    if (e.contains("dataset")) c.eval_dataset = e.at("dataset").get<std::string>();
    c.eval_sample_count = e.value("sample_count", c.eval_sample_count);
  }
  if (c.eval_dataset.empty()) c.eval_dataset = c.train_dataset;

  if (config.contains("sweeps")) {
    const json& s = config.at("sweeps");
    require_keys(s, {"layer_ablation", "subset_grid"}, "sweeps");
    c.sweep_layer_ablation = s.value("layer_ablation", false);
    if (s.contains("subset_grid")) {
      const json& g = s.at("subset_grid");
      require_keys(g, {"fractions", "ps", "alphas"}, "sweeps.subset_grid");
      if (g.contains("fractions")) {
        c.sweep_fractions = g.at("fractions").get<std::vector<double>>();
      }
      if (g.contains("ps")) c.sweep_ps = g.at("ps").get<std::vector<double>>();
      if (g.contains("alphas")) {
        c.sweep_alphas = g.at("alphas").get<std::vector<float>>();
      }
    }
  }

  c.train.seed = c.seed;
  c.plan_options.seed = c.seed;
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::from_file(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw IoError(detail::concat("config ", path.string(), " is not valid JSON: ",
                                 e.what()));
  }
  return from_json(j);
}

void ExperimentConfig::validate() const {
  NSVIT_REQUIRE(!out_dir.empty(), "out_dir must not be empty");
  NSVIT_REQUIRE(!train_dataset.empty(), "train.dataset must not be empty");
  model.validate();
  NSVIT_REQUIRE(val_fraction >= 0.0 && test_fraction >= 0.0 &&
                    val_fraction + test_fraction < 1.0,
                "split fractions must be nonnegative and leave training data");
  train.validate();
  NSVIT_REQUIRE(!attacks.empty(), "the attack list must not be empty");
  for (const AttackConfig& a : attacks) a.validate();
  NSVIT_REQUIRE(ncs_count >= 1, "ncs.count must be >= 1");
  ncs_attack.validate();
  NSVIT_REQUIRE(eval_sample_count >= 1, "eval.sample_count must be >= 1");
  if (at_enabled) {
    at.attack.validate();
    NSVIT_REQUIRE(at.replay_ratio >= 0.0 && at.replay_ratio <= 1.0,
                  "replay_ratio must lie in [0,1]");
  }
  if (smoothing_enabled) {
    NSVIT_REQUIRE(smoothing_sigma >= 0.0, "smoothing sigma must be >= 0");
    NSVIT_REQUIRE(smoothing_samples >= 1, "smoothing samples must be >= 1");
  }
  const bool grid_empty =
      sweep_fractions.empty() && sweep_ps.empty() && sweep_alphas.empty();
  const bool grid_full =
      !sweep_fractions.empty() && !sweep_ps.empty() && !sweep_alphas.empty();
  NSVIT_REQUIRE(grid_empty || grid_full,
                "sweeps.subset_grid needs fractions, ps, and alphas together");
}

ordered_json ExperimentConfig::stage_inputs(Stage s) const {
  ordered_json j;
  j["seed"] = seed;
  switch (s) {
    case Stage::kTrain: {
      j["model"] = ordered_json{{"image_size", model.image_size},
                                {"channels", model.channels},
                                {"patch_size", model.patch_size},
                                {"depth", model.depth},
                                {"embed_dim", model.embed_dim},
                                {"heads", model.heads},
                                {"mlp_ratio", model.mlp_ratio},
                                {"num_classes", model.num_classes}};
      j["dataset"] = train_dataset;
      j["val_fraction"] = val_fraction;
      j["test_fraction"] = test_fraction;
      j["train"] = ordered_json{
          {"epochs", train.epochs},
          {"lr", train.lr},
          {"batch_size", train.batch_size},
          {"optimizer", std::string(optimizer_name(train.optimizer))},
          {"weight_decay", train.weight_decay},
          {"momentum", train.momentum}};
      if (at_enabled) {
        j["adversarial_training"] =
            ordered_json{{"attack", to_ordered(attack_config_to_json(at.attack))},
                         {"replay_ratio", at.replay_ratio}};
      } else {
        j["adversarial_training"] = false;
      }
      break;
    }
    case Stage::kGenNcs:
      j["dataset"] = ncs_dataset;
      j["count"] = ncs_count;
      j["attack"] = to_ordered(attack_config_to_json(ncs_attack));
      break;
    case Stage::kAttack:
      j["dataset"] = eval_dataset;
      j["sample_count"] = eval_sample_count;
      j["attacks"] = attacks_slice(attacks);
      break;
    case Stage::kCalibrate:
      j["plan"] = plan_options_slice(*this);
      break;
    case Stage::kEvaluate:
      j["dataset"] = eval_dataset;
      j["sample_count"] = eval_sample_count;
      j["attacks"] = attacks_slice(attacks);
      j["smoothing"] = smoothing_enabled
                           ? ordered_json{{"sigma", smoothing_sigma},
                                          {"samples", smoothing_samples}}
                           : ordered_json(false);
      j["adversarial_training"] = at_enabled;
      break;
    case Stage::kAnalyze:
      break;  // fully determined by the train and attack artifacts
    case Stage::kSweep:
      j["layer_ablation"] = sweep_layer_ablation;
      j["fractions"] = sweep_fractions;
      j["ps"] = sweep_ps;
      j["alphas"] = sweep_alphas;
      j["plan"] = plan_options_slice(*this);
      break;
  }
  return j;
}

const StageOutcome& PipelineResult::outcome(Stage s) const {
  for (const StageOutcome& o : outcomes) {
    if (o.stage == s) return o;
  }
  throw ContractError(detail::concat("stage ", stage_name(s),
                                     " was not part of this pipeline run"));
}

namespace {

// ---------------------------------------------------------------------------
// Stage execution

struct StageRuntime {
  const ExperimentConfig& cfg;
  fs::path out;
  std::map<std::string, Dataset> datasets;

  explicit StageRuntime(const ExperimentConfig& c) : cfg(c), out(c.out_dir) {}

  const Dataset& dataset(const std::string& spec) {
    auto it = datasets.find(spec);
    if (it != datasets.end()) return it->second;
    Dataset ds = load_dataset(spec, cfg.model.channels, cfg.model.image_size);
    assign_splits(ds, cfg.val_fraction, cfg.test_fraction, cfg.seed);
    NSVIT_REQUIRE(ds.num_classes <= cfg.model.num_classes,
                  "dataset \"", spec, "\" has ", ds.num_classes,
                  " classes but the model head has ", cfg.model.num_classes);
    return datasets.emplace(spec, std::move(ds)).first->second;
  }

  VitModel load_model(const char* file) const {
    Checkpoint ck = load_checkpoint(out / file);
    NSVIT_REQUIRE(ck.config == cfg.model, "checkpoint ", file,
                  " does not match the configured model; rerun the train stage");
    return VitModel(ck.config, std::move(ck.params));
  }

  struct EvalSubset {
    std::vector<Tensor> images;
    std::vector<int> labels;
  };

  // The seeded evaluation subset of the eval dataset's test split; identical
  // to the subset evaluate() scores, so attack artifacts pair with reports.
  EvalSubset eval_subset() {
    const Dataset test = dataset(cfg.eval_dataset).subset(Split::kTest);
    NSVIT_REQUIRE(!test.images.empty(), "evaluation dataset has no test split");
    const std::vector<size_t> idx =
        evaluation_subset(test.size(), cfg.eval_sample_count, cfg.seed);
    EvalSubset s;
    s.images.reserve(idx.size());
    s.labels.reserve(idx.size());
    for (size_t i : idx) {
      s.images.push_back(test.images[i]);
      s.labels.push_back(test.labels[i]);
    }
    return s;
  }

  AdversarialSet load_advset(const std::string& label) const {
    return load_adversarial_set((out / ("advset_" + label + ".json")).string());
  }
};

std::vector<std::string> run_train(StageRuntime& rt) {
  const ExperimentConfig& cfg = rt.cfg;
  const Dataset& ds = rt.dataset(cfg.train_dataset);

  Rng init_rng = Rng::stream(cfg.seed, "model.init");
  VitModel model = VitModel::random_init(cfg.model, init_rng);
  TrainConfig tc = cfg.train;
  tc.adversarial.reset();
  const TrainHistory history = train(model, ds, tc);
  save_checkpoint(rt.out / "checkpoint.nsvt", cfg.model, model.params());
  write_text_file(rt.out / "history.csv", training_history_csv(history));
  std::vector<std::string> outputs = {"checkpoint.nsvt", "history.csv"};

  if (cfg.at_enabled) {
    Rng at_rng = Rng::stream(cfg.seed, "model.init");  // same initialization
    VitModel at_model = VitModel::random_init(cfg.model, at_rng);
    TrainConfig atc = cfg.train;
    atc.adversarial = cfg.at;
    const TrainHistory at_history = adversarial_train(at_model, ds, atc);
    save_checkpoint(rt.out / "checkpoint_at.nsvt", cfg.model, at_model.params());
    write_text_file(rt.out / "history_at.csv", training_history_csv(at_history));
    outputs.push_back("checkpoint_at.nsvt");
    outputs.push_back("history_at.csv");
  }
  return outputs;
}

std::vector<std::string> run_gen_ncs(StageRuntime& rt) {
  const ExperimentConfig& cfg = rt.cfg;
  const VitModel model = rt.load_model("checkpoint.nsvt");
  const Dataset train_split = rt.dataset(cfg.ncs_dataset).subset(Split::kTrain);
  NSVIT_REQUIRE(!train_split.images.empty(),
                "calibration dataset has no train split");

  const size_t count = std::min(static_cast<size_t>(cfg.ncs_count),
                                train_split.size());
  const std::vector<size_t> idx =
      Rng::stream(cfg.seed, "ncs.subset").sample_indices(train_split.size(), count);
  std::vector<Tensor> images;
  std::vector<int> labels;
  images.reserve(idx.size());
  for (size_t i : idx) {
    images.push_back(train_split.images[i]);
    labels.push_back(train_split.labels[i]);
  }

  std::vector<Tensor> targets;
  std::vector<int> target_labels;
  const std::vector<Tensor>* targets_ptr = nullptr;
  const std::vector<int>* target_labels_ptr = nullptr;
  if (cfg.ncs_attack.kind == AttackKind::kIgo) {
    targets = igo_targets(images, labels, &target_labels);
    targets_ptr = &targets;
    target_labels_ptr = &target_labels;
  }
  const uint64_t attack_seed = Rng::stream(cfg.seed, "ncs.attack").next_u64();
  const AdversarialSet set = generate_adversarial_set(
      model, images, labels, cfg.ncs_attack, attack_seed, targets_ptr,
      target_labels_ptr);
  save_adversarial_set(set, (rt.out / "ncs.json").string());
  return {"ncs.json", "ncs.bin"};
}

std::vector<std::string> run_attack(StageRuntime& rt) {
  const ExperimentConfig& cfg = rt.cfg;
  const VitModel model = rt.load_model("checkpoint.nsvt");
  const StageRuntime::EvalSubset subset = rt.eval_subset();

  const std::vector<std::string> labels_per_attack = attack_labels(cfg.attacks);
  std::vector<std::string> outputs;
  for (size_t a = 0; a < cfg.attacks.size(); ++a) {
    const AttackConfig& acfg = cfg.attacks[a];
    std::vector<Tensor> targets;
    std::vector<int> target_labels;
    const std::vector<Tensor>* targets_ptr = nullptr;
    const std::vector<int>* target_labels_ptr = nullptr;
    if (acfg.kind == AttackKind::kIgo) {
      targets = igo_targets(subset.images, subset.labels, &target_labels);
      targets_ptr = &targets;
      target_labels_ptr = &target_labels;
    }
    const AdversarialSet set =
        generate_adversarial_set(model, subset.images, subset.labels, acfg,
                                 cfg.seed, targets_ptr, target_labels_ptr);
    const std::string manifest = "advset_" + labels_per_attack[a] + ".json";
    const std::string blob = "advset_" + labels_per_attack[a] + ".bin";
    save_adversarial_set(set, (rt.out / manifest).string());
    outputs.push_back(manifest);
    outputs.push_back(blob);
  }
  return outputs;
}

std::vector<std::string> run_calibrate(StageRuntime& rt) {
  const ExperimentConfig& cfg = rt.cfg;
  const VitModel model = rt.load_model("checkpoint.nsvt");
  const AdversarialSet set =
      load_adversarial_set((rt.out / "ncs.json").string());
  const CalibrationSet ncs = CalibrationSet::from_adversarial_set(set);
  NeutralizationPlan plan = calibrate(model, ncs, cfg.plan_options);
  plan.checkpoint_sha256 = sha256_file_hex(rt.out / "checkpoint.nsvt");
  save_plan((rt.out / "plan.json").string(), plan);
  return {"plan.json"};
}

std::vector<std::string> run_evaluate(StageRuntime& rt) {
  const ExperimentConfig& cfg = rt.cfg;
  const VitModel model = rt.load_model("checkpoint.nsvt");
  const Dataset test = rt.dataset(cfg.eval_dataset).subset(Split::kTest);
  NSVIT_REQUIRE(!test.images.empty(), "evaluation dataset has no test split");

  EvalOptions opts;
  opts.sample_count = cfg.eval_sample_count;
  opts.seed = cfg.seed;
  opts.model_id = "vit";

  std::vector<EvalReport> reports;
  reports.push_back(evaluate(model, Defense::none(), test, cfg.attacks, opts));

  const NeutralizationPlan plan =
      load_plan((rt.out / "plan.json").string(),
                sha256_file_hex(rt.out / "checkpoint.nsvt"));
  reports.push_back(
      evaluate(model, Defense::neuroshield(plan), test, cfg.attacks, opts));

  if (cfg.smoothing_enabled) {
    reports.push_back(evaluate(
        model, Defense::smoothing(cfg.smoothing_sigma, cfg.smoothing_samples),
        test, cfg.attacks, opts));
  }
  if (cfg.at_enabled) {
    const VitModel at_model = rt.load_model("checkpoint_at.nsvt");
    EvalOptions at_opts = opts;
    at_opts.model_id = "vit-at";
    reports.push_back(
        evaluate(at_model, Defense::none("at"), test, cfg.attacks, at_opts));
  }

  std::vector<std::string> outputs;
  for (const EvalReport& report : reports) {
    const std::string file = "eval_" + report.defense_id + ".json";
    write_text_file(rt.out / file, eval_report_json(report));
    outputs.push_back(file);
  }
  write_text_file(rt.out / "eval_table.csv", eval_table_csv(reports));
  outputs.push_back("eval_table.csv");
  return outputs;
}

std::vector<std::string> run_analyze(StageRuntime& rt) {
  const ExperimentConfig& cfg = rt.cfg;
  const VitModel model = rt.load_model("checkpoint.nsvt");
  const std::string first_label = attack_labels(cfg.attacks).front();
  const AdversarialSet set = rt.load_advset(first_label);

  const size_t pair_cap = std::min<size_t>(8, set.count());
  std::vector<SimilarityCurve> curves;
  TokenSimilarityProfile profile;
  std::vector<std::pair<Tensor, Tensor>> pairs;
  for (size_t i = 0; i < pair_cap; ++i) {
    curves.push_back(cls_similarity_curve(model, set.clean[i], set.adversarial[i],
                                          PairKind::kInputPerturbed));
    const TokenSimilarityProfile one = token_similarity_profile(
        model, set.clean[i], set.adversarial[i], default_profile_sites());
    for (const auto& [hs, hist] : one.histograms) {
      auto& acc = profile.histograms[hs];
      for (int b = 0; b < TokenSimilarityProfile::kBins; ++b) {
        acc[static_cast<size_t>(b)] += hist[static_cast<size_t>(b)];
      }
    }
    profile.token_count += one.token_count;
    pairs.emplace_back(set.clean[i], set.adversarial[i]);
  }

  const std::vector<double> p_values = {0.5, 1.0, 2.0, 5.0, 10.0};
  const FractionCurve fractions =
      adversarial_fraction_curve(model, pairs, p_values);

  write_text_file(rt.out / "similarity.csv", similarity_curve_csv(curves));
  write_text_file(rt.out / "token_histograms.csv", token_histogram_csv(profile));
  write_text_file(rt.out / "fractions.csv", fraction_curve_csv(fractions));
  return {"similarity.csv", "token_histograms.csv", "fractions.csv"};
}

std::vector<std::string> run_sweep(StageRuntime& rt) {
  const ExperimentConfig& cfg = rt.cfg;
  std::vector<std::string> outputs;
  const bool grid = !cfg.sweep_fractions.empty();
  if (!cfg.sweep_layer_ablation && !grid) return outputs;

  const VitModel model = rt.load_model("checkpoint.nsvt");
  const std::string first_label = attack_labels(cfg.attacks).front();
  const AdversarialSet set = rt.load_advset(first_label);

  if (cfg.sweep_layer_ablation) {
    const NeutralizationPlan plan =
        load_plan((rt.out / "plan.json").string(),
                  sha256_file_hex(rt.out / "checkpoint.nsvt"));
    const LayerSweepResult result =
        layer_ablation_sweep(model, plan, set.adversarial, set.labels);
    write_text_file(rt.out / "layer_sweep.csv", layer_sweep_csv(result));
    outputs.push_back("layer_sweep.csv");
  }

  if (grid) {
    const AdversarialSet ncs_set =
        load_adversarial_set((rt.out / "ncs.json").string());
    const CalibrationSet ncs = CalibrationSet::from_adversarial_set(ncs_set);
    const std::vector<SubsetSweepCell> cells = subset_size_sweep(
        model, ncs, cfg.sweep_fractions, cfg.sweep_ps, cfg.sweep_alphas,
        set.clean, set.adversarial, set.labels, cfg.plan_options);
    write_text_file(rt.out / "subset_sweep.csv", subset_sweep_csv(cells));
    outputs.push_back("subset_sweep.csv");
  }
  return outputs;
}

std::vector<std::string> execute_stage(Stage s, StageRuntime& rt) {
  switch (s) {
    case Stage::kTrain: return run_train(rt);
    case Stage::kGenNcs: return run_gen_ncs(rt);
    case Stage::kAttack: return run_attack(rt);
    case Stage::kCalibrate: return run_calibrate(rt);
    case Stage::kEvaluate: return run_evaluate(rt);
    case Stage::kAnalyze: return run_analyze(rt);
    case Stage::kSweep: return run_sweep(rt);
  }
  throw ContractError("execute_stage: invalid enum value");
}

// ---------------------------------------------------------------------------
// Manifests and resume

struct Manifest {
  std::string input_hash;
  std::map<std::string, std::string> outputs;  // file -> sha256
};

fs::path manifest_path(const fs::path& out, Stage s) {
  return out / ("manifest_" + std::string(stage_name(s)) + ".json");
}

std::optional<Manifest> read_manifest(const fs::path& out, Stage s, bool strict) {
  const fs::path path = manifest_path(out, s);
  if (!fs::exists(path)) return std::nullopt;
  try {
    const json j = json::parse(read_text_file(path));
    Manifest m;
    m.input_hash = j.at("input_hash").get<std::string>();
    for (const auto& [file, hash] : j.at("outputs").items()) {
      m.outputs[file] = hash.get<std::string>();
    }
    return m;
  } catch (const json::exception& e) {
    if (strict) {
      throw IoError(detail::concat("manifest ", path.string(),
                                   " is malformed: ", e.what()));
    }
    return std::nullopt;  // treat as absent; the stage reruns
  }
}

void write_manifest(const fs::path& out, Stage s, uint64_t seed,
                    const std::string& input_hash,
                    const std::vector<std::string>& outputs) {
  ordered_json j;
  j["stage"] = std::string(stage_name(s));
  j["input_hash"] = input_hash;
  j["seed"] = seed;
  ordered_json files = ordered_json::object();
  for (const std::string& file : outputs) {
    files[file] = sha256_file_hex(out / file);
  }
  j["outputs"] = std::move(files);
  write_text_file(manifest_path(out, s), j.dump(2) + "\n");
}

// Up to date: manifest present, input hash matches, every output on disk
// with the recorded content. Under strict, content disagreement is an error.
bool stage_current(const std::optional<Manifest>& manifest,
                   const std::string& input_hash, const fs::path& out, Stage s,
                   bool strict) {
  if (!manifest || manifest->input_hash != input_hash) return false;
  for (const auto& [file, hash] : manifest->outputs) {
    const fs::path path = out / file;
    if (!fs::exists(path)) return false;
    if (sha256_file_hex(path) != hash) {
      NSVIT_REQUIRE(!strict, "stage ", stage_name(s), " output ", file,
                    " does not match its recorded hash (strict mode)");
      return false;
    }
  }
  return true;
}

}  // namespace

PipelineResult run_experiment(const ExperimentConfig& config,
                              const PipelineOptions& options) {
  config.validate();
  if (options.threads > 0) set_thread_count(options.threads);
  fs::create_directories(config.out_dir);

  // Selection closure: requested stages plus all transitive dependencies.
  std::array<bool, kStageCount> selected{};
  if (options.stages.empty()) {
    selected.fill(true);
  } else {
    std::vector<Stage> frontier = options.stages;
    while (!frontier.empty()) {
      const Stage s = frontier.back();
      frontier.pop_back();
      if (selected[static_cast<size_t>(s)]) continue;
      selected[static_cast<size_t>(s)] = true;
      for (Stage d : stage_dependencies(s)) frontier.push_back(d);
    }
  }

  StageRuntime rt(config);
  std::array<std::string, kStageCount> input_hashes;
  std::array<bool, kStageCount> ran{};
  PipelineResult result;
  result.out_dir = config.out_dir;

  for (int i = 0; i < kStageCount; ++i) {
    const Stage s = static_cast<Stage>(i);

    ordered_json description;
    description["stage"] = std::string(stage_name(s));
    description["inputs"] = config.stage_inputs(s);
    ordered_json deps = ordered_json::object();
    bool deps_ran = false;
    for (Stage d : stage_dependencies(s)) {
      deps[std::string(stage_name(d))] = input_hashes[static_cast<size_t>(d)];
      deps_ran = deps_ran || ran[static_cast<size_t>(d)];
    }
    description["deps"] = std::move(deps);
    input_hashes[static_cast<size_t>(i)] = sha256_hex(description.dump());

    if (!selected[static_cast<size_t>(i)]) continue;

    StageOutcome outcome;
    outcome.stage = s;
    outcome.input_hash = input_hashes[static_cast<size_t>(i)];

    const std::optional<Manifest> manifest =
        read_manifest(config.out_dir, s, options.strict);
    if (!deps_ran && stage_current(manifest, outcome.input_hash, config.out_dir,
                                   s, options.strict)) {
      for (const auto& [file, hash] : manifest->outputs) {
        outcome.outputs.push_back(file);
      }
    } else {
      outcome.outputs = execute_stage(s, rt);
      write_manifest(config.out_dir, s, config.seed, outcome.input_hash,
                     outcome.outputs);
      outcome.ran = true;
      ran[static_cast<size_t>(i)] = true;
    }
    result.outcomes.push_back(std::move(outcome));
  }
  return result;
}

PipelineResult run_experiment(const fs::path& config_path,
                              const PipelineOptions& options) {
  return run_experiment(ExperimentConfig::from_file(config_path), options);
}

}  // namespace nsvit
