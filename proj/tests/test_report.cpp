#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nsvit/attacks.hpp"
#include "nsvit/errors.hpp"
#include "nsvit/hash.hpp"
#include "nsvit/report.hpp"

using namespace nsvit;
namespace fs = std::filesystem;

namespace {

EvalReport sample_report() {
  EvalReport r;
  r.model_id = "vit-desk";
  r.defense_id = "neuroshield";
  r.natural_accuracy = 82.5;
  r.sample_count = 200;
  r.seed = 16045690984833335023ull;
  r.timestamp = 1723456789;

  AttackEval fgsm;
  fgsm.label = "fgsm";
  fgsm.config.kind = AttackKind::kFgsm;
  fgsm.config.epsilon = 0.03;
  fgsm.config.steps = 1;
  fgsm.config.random_start = false;
  fgsm.natural_accuracy = 82.5;
  fgsm.robust_accuracy = 41.0;
  fgsm.sample_count = 200;
  r.attacks.push_back(fgsm);

  AttackEval igo;
  igo.label = "igo";
  igo.config.kind = AttackKind::kIgo;
  igo.config.epsilon = 0.0625;
  igo.config.igo.lr = 0.05;
  igo.config.igo.max_iters = 150;
  igo.config.igo.cos_target = 0.995;
  igo.config.igo.l2_max = 4.5;
  igo.natural_accuracy = 82.5;
  igo.robust_accuracy = 37.5;
  igo.sample_count = 200;
  r.attacks.push_back(igo);
  return r;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("nsvit-report-" + std::to_string(static_cast<unsigned>(std::rand())));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("format_number emits shortest round-trip decimals") {
  CHECK(format_number(1.0) == "1");
  CHECK(format_number(0.5) == "0.5");
  CHECK(format_number(-0.25) == "-0.25");
  CHECK(format_number(100.0) == "100");
  CHECK(format_number(0.1) == "0.1");
  CHECK(format_number(1e-12) == "1e-12");
  CHECK(format_number(0.1f) == "0.1");
  CHECK(format_number(-3.5f) == "-3.5");
  CHECK(format_number(0.0) == "0");

  // Round-trip property on an awkward value.
  const double v = 1.0 / 3.0;
  CHECK(std::stod(format_number(v)) == v);
}

TEST_CASE("similarity curve CSV matches the golden layout") {
  SimilarityCurve a;
  a.kind = PairKind::kInputPerturbed;
  a.values = {1.0f, 0.5f};
  SimilarityCurve b;
  b.kind = PairKind::kInputTarget;
  b.values = {-0.25f};

  CHECK(similarity_curve_csv({a, b}) ==
        "layer,kind,value\n"
        "0,input-perturbed,1\n"
        "1,input-perturbed,0.5\n"
        "0,input-target,-0.25\n");
  CHECK(similarity_curve_csv({}) == "layer,kind,value\n");
}

TEST_CASE("fraction curve CSV orders rows by hook site then p") {
  FractionCurve curve;
  curve.p_values = {10.0, 25.0};
  curve.fractions[HookSite{1, Site::kMlpFc2}] = {0.0, 1.0};
  curve.fractions[HookSite{0, Site::kAttnQkv}] = {0.5, 0.75};

  CHECK(fraction_curve_csv(curve) ==
        "layer,site,p,fraction\n"
        "0,attn.qkv,10,0.5\n"
        "0,attn.qkv,25,0.75\n"
        "1,mlp.fc2,10,0\n"
        "1,mlp.fc2,25,1\n");
  CHECK(fraction_curve_csv(FractionCurve{}) == "layer,site,p,fraction\n");

  FractionCurve bad;
  bad.p_values = {10.0};
  bad.fractions[HookSite{0, Site::kAdd1}] = {0.5, 0.6};
  CHECK_THROWS_AS((void)fraction_curve_csv(bad), ContractError);
}

TEST_CASE("token histogram CSV prints one-decimal bin edges") {
  TokenSimilarityProfile profile;
  auto& hist = profile.histograms[HookSite{2, Site::kAdd1}];
  for (int i = 0; i < TokenSimilarityProfile::kBins; ++i) {
    hist[static_cast<size_t>(i)] = i;
  }

  const std::string csv = token_histogram_csv(profile);
  std::vector<std::string> lines;
  for (size_t start = 0; start < csv.size();) {
    const size_t end = csv.find('\n', start);
    lines.push_back(csv.substr(start, end - start));
    start = end + 1;
  }
  REQUIRE(lines.size() == 21);
  CHECK(lines[0] == "layer,site,bin_low,bin_high,count");
  CHECK(lines[1] == "2,add_1,-1.0,-0.9,0");
  CHECK(lines[10] == "2,add_1,-0.1,0.0,9");
  CHECK(lines[11] == "2,add_1,0.0,0.1,10");
  CHECK(lines[20] == "2,add_1,0.9,1.0,19");

  CHECK(token_histogram_csv(TokenSimilarityProfile{}) ==
        "layer,site,bin_low,bin_high,count\n");
}

TEST_CASE("training history CSV emits a train and a val row per epoch") {
  TrainHistory history;
  history.epochs.push_back(EpochStats{0, 1.5, 50.0, 2.25, 25.0});
  history.epochs.push_back(EpochStats{1, 0.75, 87.5, 1.125, 62.5});

  CHECK(training_history_csv(history) ==
        "epoch,split,loss,accuracy\n"
        "0,train,1.5,50\n"
        "0,val,2.25,25\n"
        "1,train,0.75,87.5\n"
        "1,val,1.125,62.5\n");
  CHECK(training_history_csv(TrainHistory{}) == "epoch,split,loss,accuracy\n");
}

TEST_CASE("eval table CSV is method x attack with a natural column") {
  EvalReport none;
  none.defense_id = "none";
  none.natural_accuracy = 85.5;
  none.sample_count = 200;
  none.attacks.resize(2);
  none.attacks[0].label = "fgsm";
  none.attacks[0].robust_accuracy = 10.0;
  none.attacks[0].sample_count = 200;
  none.attacks[1].label = "pgd";
  none.attacks[1].robust_accuracy = 12.5;
  none.attacks[1].sample_count = 200;

  EvalReport shield = none;
  shield.defense_id = "neuroshield";
  shield.natural_accuracy = 80.0;
  shield.attacks[0].robust_accuracy = 45.5;
  shield.attacks[1].robust_accuracy = 47.0;

  CHECK(eval_table_csv({none, shield}) ==
        "method,natural,fgsm,pgd\n"
        "none,85.5,10,12.5\n"
        "neuroshield,80,45.5,47\n");

  SUBCASE("empty input gives the minimal header") {
    CHECK(eval_table_csv({}) == "method,natural\n");
  }
  SUBCASE("natural-only reports give a two-column table") {
    EvalReport bare = none;
    bare.attacks.clear();
    CHECK(eval_table_csv({bare}) == "method,natural\nnone,85.5\n");
  }
  SUBCASE("mismatched attack labels are rejected") {
    EvalReport swapped = shield;
    std::swap(swapped.attacks[0], swapped.attacks[1]);
    CHECK_THROWS_AS((void)eval_table_csv({none, swapped}), ContractError);
    EvalReport missing = shield;
    missing.attacks.pop_back();
    CHECK_THROWS_AS((void)eval_table_csv({none, missing}), ContractError);
  }
  SUBCASE("ids must be CSV-safe") {
    EvalReport bad = none;
    bad.defense_id = "no,ne";
    CHECK_THROWS_AS((void)eval_table_csv({bad}), ContractError);
    EvalReport badLabel = none;
    badLabel.attacks[0].label = "fg\nsm";
    CHECK_THROWS_AS((void)eval_table_csv({badLabel}), ContractError);
  }
}

TEST_CASE("sweep CSVs match their documented schemas") {
  LayerSweepResult sweep;
  sweep.front = {70.0, 75.5};
  sweep.back = {70.0, 72.0};
  CHECK(layer_sweep_csv(sweep) ==
        "layers,mode,accuracy\n"
        "0,front,70\n"
        "1,front,75.5\n"
        "0,back,70\n"
        "1,back,72\n");
  CHECK(layer_sweep_csv(LayerSweepResult{}) == "layers,mode,accuracy\n");

  SubsetSweepCell cell;
  cell.fraction = 0.25;
  cell.p = 50.0;
  cell.alpha = 0.1f;
  cell.robust_accuracy = 40.5;
  cell.natural_accuracy = 78.0;
  CHECK(subset_sweep_csv({cell}) ==
        "fraction,p,alpha,robust_accuracy,natural_accuracy\n"
        "0.25,50,0.1,40.5,78\n");
  CHECK(subset_sweep_csv({}) ==
        "fraction,p,alpha,robust_accuracy,natural_accuracy\n");
}

TEST_CASE("eval report JSON round-trips exactly") {
  const EvalReport report = sample_report();
  const std::string text = eval_report_json(report);
  const EvalReport parsed = eval_report_from_json(text);
  CHECK(parsed == report);

  // The serialized form carries every field under the documented keys.
  const auto j = nlohmann::json::parse(text);
  CHECK(j.at("version") == 1);
  CHECK(j.at("model_id") == "vit-desk");
  CHECK(j.at("seed").get<uint64_t>() == 16045690984833335023ull);
  CHECK(j.at("attacks").size() == 2);
  CHECK(j.at("attacks")[1].at("config").at("kind") == "igo");
  CHECK(j.at("attacks")[1].at("config").at("igo").at("max_iters") == 150);
}

TEST_CASE("eval report parsing rejects malformed input") {
  CHECK_THROWS_AS((void)eval_report_from_json("not json"), IoError);
  CHECK_THROWS_AS((void)eval_report_from_json("{}"), IoError);

  const EvalReport report = sample_report();
  auto j = nlohmann::json::parse(eval_report_json(report));

  auto wrong_version = j;
  wrong_version["version"] = 2;
  CHECK_THROWS_AS((void)eval_report_from_json(wrong_version.dump()), IoError);

  auto missing_key = j;
  missing_key.erase("defense_id");
  CHECK_THROWS_AS((void)eval_report_from_json(missing_key.dump()), IoError);

  auto bad_value = j;
  bad_value["natural_accuracy"] = 150.0;
  CHECK_THROWS_AS((void)eval_report_from_json(bad_value.dump()), IoError);
}

TEST_CASE("content hash ignores the timestamp and nothing else") {
  const EvalReport report = sample_report();
  EvalReport later = report;
  later.timestamp = report.timestamp + 86400;
  CHECK(report_content_hash(report) == report_content_hash(later));

  EvalReport changed = report;
  changed.natural_accuracy = 82.0;
  CHECK(report_content_hash(changed) != report_content_hash(report));

  EvalReport relabeled = report;
  relabeled.attacks[0].label = "fgsm-2";
  CHECK(relabeled.attacks[0].label != report.attacks[0].label);
  CHECK(report_content_hash(relabeled) != report_content_hash(report));

  // Oracle: the hash is the SHA-256 of the zero-timestamp serialization.
  EvalReport zeroed = report;
  zeroed.timestamp = 0;
  CHECK(report_content_hash(report) == sha256_hex(eval_report_json(zeroed)));
}

TEST_CASE("text files round-trip and failures raise IoError") {
  TempDir dir;
  const fs::path file = dir.path / "table.csv";
  const std::string content = "method,natural\nnone,85.5\n";
  write_text_file(file, content);
  CHECK(read_text_file(file) == content);

  // Overwrite truncates.
  write_text_file(file, "x");
  CHECK(read_text_file(file) == "x");

  CHECK_THROWS_AS(write_text_file(dir.path / "no-such-dir" / "f.csv", "x"), IoError);
  CHECK_THROWS_AS((void)read_text_file(dir.path / "missing.csv"), IoError);
}
