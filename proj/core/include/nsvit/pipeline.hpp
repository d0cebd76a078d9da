#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "nsvit/attacks.hpp"
#include "nsvit/neuroshield.hpp"
#include "nsvit/training.hpp"
#include "nsvit/vit.hpp"

namespace nsvit {

// Experiment stages, listed in execution (topological) order.
enum class Stage {
  kTrain = 0,
  kGenNcs,
  kAttack,
  kCalibrate,
  kEvaluate,
  kAnalyze,
  kSweep,
};
inline constexpr int kStageCount = 7;

std::string_view stage_name(Stage s);  // "train", "gen-ncs", ..., "sweep"
Stage stage_from_name(std::string_view name);
const std::vector<Stage>& stage_dependencies(Stage s);

// Parsed experiment configuration. The JSON form has the fixed top-level
// keys {model, train, attacks, ncs, neuroshield, baselines, eval, sweeps,
// seed, out_dir}; unknown keys anywhere are rejected so every field is
// guaranteed to participate in stage input hashes.
struct ExperimentConfig {
  uint64_t seed = 0;
  std::filesystem::path out_dir;

  VitConfig model;

  std::string train_dataset;  // required; spec string or path
  double val_fraction = 0.15;
  double test_fraction = 0.15;
  TrainConfig train;  // train.seed mirrors the top-level seed

  std::vector<AttackConfig> attacks;  // default: fgsm + pgd at 8/255

  std::string ncs_dataset;  // defaults to train_dataset
  int ncs_count = 32;
  AttackConfig ncs_attack;  // default: igo

  CalibrateOptions plan_options;  // seed mirrors the top-level seed

  bool at_enabled = false;
  AdversarialTrainConfig at;
  bool smoothing_enabled = false;
  double smoothing_sigma = 0.25;
  int smoothing_samples = 64;

  std::string eval_dataset;  // defaults to train_dataset
  int eval_sample_count = 200;

  bool sweep_layer_ablation = false;
  std::vector<double> sweep_fractions;
  std::vector<double> sweep_ps;
  std::vector<float> sweep_alphas;

  static ExperimentConfig from_json(const nlohmann::json& config);
  static ExperimentConfig from_file(const std::filesystem::path& path);
  void validate() const;

  // The normalized slice of the configuration this stage consumes (without
  // dependency hashes); equal configs give equal slices, and a stage's slice
  // changes iff one of the fields it consumes changes.
  nlohmann::ordered_json stage_inputs(Stage s) const;
};

struct PipelineOptions {
  bool strict = false;  // recorded-vs-on-disk output hash mismatch -> error
  int threads = 0;      // >0 pins the worker count
  std::vector<Stage> stages;  // empty = all; dependencies are added implicitly
};

struct StageOutcome {
  Stage stage = Stage::kTrain;
  bool ran = false;                  // false = up to date, skipped
  std::string input_hash;            // sha256 over slice + dependency hashes
  std::vector<std::string> outputs;  // file names relative to out_dir
};

struct PipelineResult {
  std::filesystem::path out_dir;
  std::vector<StageOutcome> outcomes;

  const StageOutcome& outcome(Stage s) const;
  bool ran(Stage s) const { return outcome(s).ran; }
};

// Runs the selected stages in order. Every stage writes its outputs under
// out_dir plus a manifest_<stage>.json recording {stage, input_hash, seed,
// outputs: {file: sha256}}. A stage is skipped when its manifest exists, the
// recorded input hash matches, every output file is present with the
// recorded content hash, and no dependency ran in this invocation;
// otherwise it reruns. With strict set, an existing output whose content
// hash disagrees with the manifest raises ContractError instead.
PipelineResult run_experiment(const ExperimentConfig& config,
                              const PipelineOptions& options = {});
PipelineResult run_experiment(const std::filesystem::path& config_path,
                              const PipelineOptions& options = {});

}  // namespace nsvit
