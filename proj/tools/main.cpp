// Command-line front end: each experiment stage is a subcommand that runs
// the corresponding pipeline stage (plus any stale dependencies) from a JSON
// config; `report` re-emits or inspects existing artifacts.
//
// Exit codes: 0 success, 2 contract/usage error, 3 I/O error.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "nsvit/checkpoint.hpp"
#include "nsvit/errors.hpp"
#include "nsvit/eval.hpp"
#include "nsvit/hash.hpp"
#include "nsvit/neuroshield.hpp"
#include "nsvit/pipeline.hpp"
#include "nsvit/report.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace nsvit;

namespace {

struct CliArgs {
  std::string config;
  std::string out;
  std::string checkpoint;
  std::string plan;
  uint64_t seed = 0;
  bool seed_set = false;
  int threads = 0;
  bool strict = false;
  std::string format = "csv";
  std::string output;
};

void emit(const CliArgs& args, const std::string& content) {
  if (args.output.empty()) {
    std::cout << content;
  } else {
    write_text_file(args.output, content);
  }
}

ExperimentConfig load_config(const CliArgs& args) {
  NSVIT_REQUIRE(!args.config.empty(), "--config is required for this command");
  ExperimentConfig cfg = ExperimentConfig::from_file(args.config);
  if (args.seed_set) {
    cfg.seed = args.seed;
    cfg.train.seed = args.seed;
    cfg.plan_options.seed = args.seed;
  }
  if (!args.out.empty()) cfg.out_dir = args.out;
  return cfg;
}

int run_stages(const CliArgs& args, std::vector<Stage> stages) {
  const ExperimentConfig cfg = load_config(args);
  PipelineOptions options;
  options.strict = args.strict;
  options.threads = args.threads;
  options.stages = std::move(stages);
  const PipelineResult result = run_experiment(cfg, options);
  for (const StageOutcome& outcome : result.outcomes) {
    std::cout << stage_name(outcome.stage) << ": "
              << (outcome.ran ? "ran" : "up to date");
    if (outcome.ran && !outcome.outputs.empty()) {
      std::cout << " (";
      for (size_t i = 0; i < outcome.outputs.size(); ++i) {
        if (i) std::cout << ", ";
        std::cout << outcome.outputs[i];
      }
      std::cout << ")";
    }
    std::cout << "\n";
  }
  return 0;
}

int report_checkpoint(const CliArgs& args) {
  const Checkpoint ck = load_checkpoint(args.checkpoint);
  ordered_json j;
  j["file"] = args.checkpoint;
  j["sha256"] = sha256_file_hex(args.checkpoint);
  j["config"] = ordered_json{{"image_size", ck.config.image_size},
                             {"channels", ck.config.channels},
                             {"patch_size", ck.config.patch_size},
                             {"depth", ck.config.depth},
                             {"embed_dim", ck.config.embed_dim},
                             {"heads", ck.config.heads},
                             {"mlp_ratio", ck.config.mlp_ratio},
                             {"num_classes", ck.config.num_classes}};
  j["parameters"] = ck.params.count();
  emit(args, j.dump(2) + "\n");
  return 0;
}

int report_plan(const CliArgs& args) {
  const NeutralizationPlan plan = load_plan(args.plan);
  ordered_json j;
  j["file"] = args.plan;
  j["alpha"] = plan.alpha;
  j["p"] = plan.p;
  j["occurrence_threshold"] = plan.occurrence_threshold;
  j["checkpoint_sha256"] = plan.checkpoint_sha256;
  j["total_neurons"] = plan.total_neurons();
  ordered_json per_site = ordered_json::object();
  for (const auto& [hs, channels] : plan.channels) {
    per_site[hook_site_str(hs)] = channels.size();
  }
  j["neurons_per_site"] = std::move(per_site);
  emit(args, j.dump(2) + "\n");
  return 0;
}

int report_tables(const CliArgs& args) {
  NSVIT_REQUIRE(!args.out.empty(),
                "report needs --out (experiment directory), --checkpoint, or --plan");
  const fs::path dir = args.out;
  const fs::path manifest = dir / "manifest_evaluate.json";
  ordered_json m;
  try {
    m = ordered_json::parse(read_text_file(manifest));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(detail::concat("manifest ", manifest.string(),
                                 " is malformed: ", e.what()));
  }
  std::vector<EvalReport> reports;
  for (const auto& [file, hash] : m.at("outputs").items()) {
    if (file.rfind("eval_", 0) == 0 && file.size() > 5 &&
        file.substr(file.size() - 5) == ".json") {
      reports.push_back(eval_report_from_json(read_text_file(dir / file)));
    }
  }
  NSVIT_REQUIRE(!reports.empty(), "no evaluation reports recorded under ",
                dir.string());
  if (args.format == "json") {
    ordered_json arr = ordered_json::array();
    for (const EvalReport& r : reports) {
      arr.push_back(ordered_json::parse(eval_report_json(r)));
    }
    emit(args, arr.dump(2) + "\n");
  } else {
    emit(args, eval_table_csv(reports));
  }
  return 0;
}

int report_command(const CliArgs& args) {
  if (!args.checkpoint.empty()) return report_checkpoint(args);
  if (!args.plan.empty()) return report_plan(args);
  return report_tables(args);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale laboratory for adversarial-effect analysis and "
               "selective neuron neutralization in vision transformers"};

  CliArgs args;
  app.add_option("--config", args.config, "Experiment configuration (JSON)");
  auto* seed_opt =
      app.add_option("--seed", args.seed, "Override the configured seed");
  app.add_option("--out", args.out,
                 "Override the configured out_dir (stages) or name the "
                 "experiment directory (report)");
  app.add_option("--checkpoint", args.checkpoint,
                 "Checkpoint file to summarize (report)");
  app.add_option("--plan", args.plan,
                 "Neutralization plan file to summarize (report)");
  app.add_option("--threads", args.threads, "Worker threads (0 = hardware)");
  app.add_flag("--strict", args.strict,
               "Fail when recorded artifact hashes do not match disk");

  const std::vector<std::pair<std::string, Stage>> stage_commands = {
      {"train", Stage::kTrain},         {"gen-ncs", Stage::kGenNcs},
      {"attack", Stage::kAttack},       {"calibrate", Stage::kCalibrate},
      {"defend-eval", Stage::kEvaluate}, {"analyze", Stage::kAnalyze},
      {"sweep", Stage::kSweep}};
  const std::map<std::string, std::string> stage_help = {
      {"train", "Train the model (and the adversarial-training baseline)"},
      {"gen-ncs", "Generate the neutralization calibration set"},
      {"attack", "Craft the evaluation adversarial sets"},
      {"calibrate", "Derive the neuron-neutralization plan"},
      {"defend-eval", "Score every defense on the evaluation subset"},
      {"analyze", "Emit similarity curves, histograms, and fraction curves"},
      {"sweep", "Run the layer-ablation and calibration-grid sweeps"}};
  for (const auto& [name, stage] : stage_commands) {
    auto* sub = app.add_subcommand(name, stage_help.at(name));
    sub->fallthrough();
  }
  auto* report_sub =
      app.add_subcommand("report", "Re-emit or inspect existing artifacts");
  report_sub->fallthrough();
  report_sub->add_option("--format", args.format, "Table format")
      ->check(CLI::IsMember({"csv", "json"}));
  report_sub->add_option("--output", args.output,
                         "Write to this file instead of stdout");

  app.require_subcommand(0, 1);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  args.seed_set = seed_opt->count() > 0;

  try {
    for (const auto& [name, stage] : stage_commands) {
      if (app.got_subcommand(name)) return run_stages(args, {stage});
    }
    if (app.got_subcommand("report")) return report_command(args);
    if (!args.config.empty()) return run_stages(args, {});  // all stages
    std::cerr << app.help();
    return 2;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
