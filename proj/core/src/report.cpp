#include "nsvit/report.hpp"

#include <array>
#include <charconv>
#include <fstream>
#include <sstream>
#include <system_error>

#include <nlohmann/json.hpp>

#include "nsvit/attacks.hpp"
#include "nsvit/errors.hpp"
#include "nsvit/hash.hpp"

namespace nsvit {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

template <typename Float>
std::string shortest(Float v) {
  std::array<char, 64> buf;
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

// Bin edges are multiples of 0.1 up to rounding noise; one fixed decimal
// renders them exactly.
std::string one_decimal(double v) {
  std::array<char, 64> buf;
  const auto res =
      std::to_chars(buf.data(), buf.data() + buf.size(), v, std::chars_format::fixed, 1);
  return std::string(buf.data(), res.ptr);
}

void require_csv_safe(const std::string& text, const char* what) {
  NSVIT_REQUIRE(text.find_first_of(",\"\n\r") == std::string::npos, what,
                " must not contain commas, quotes, or newlines: \"", text, "\"");
}

}  // namespace

std::string format_number(double v) { return shortest(v); }
std::string format_number(float v) { return shortest(v); }

std::string similarity_curve_csv(const std::vector<SimilarityCurve>& curves) {
  std::string out = "layer,kind,value\n";
  for (const SimilarityCurve& curve : curves) {
    for (size_t l = 0; l < curve.values.size(); ++l) {
      out += std::to_string(l);
      out += ',';
      out += pair_kind_name(curve.kind);
      out += ',';
      out += shortest(curve.values[l]);
      out += '\n';
    }
  }
  return out;
}

std::string fraction_curve_csv(const FractionCurve& curve) {
  std::string out = "layer,site,p,fraction\n";
  for (const auto& [hs, fractions] : curve.fractions) {
    NSVIT_REQUIRE(fractions.size() == curve.p_values.size(), "fraction curve for ",
                  hook_site_str(hs), " has ", fractions.size(), " values for ",
                  curve.p_values.size(), " p levels");
    for (size_t i = 0; i < fractions.size(); ++i) {
      out += std::to_string(hs.layer);
      out += ',';
      out += site_name(hs.site);
      out += ',';
      out += shortest(curve.p_values[i]);
      out += ',';
      out += shortest(fractions[i]);
      out += '\n';
    }
  }
  return out;
}

std::string token_histogram_csv(const TokenSimilarityProfile& profile) {
  std::string out = "layer,site,bin_low,bin_high,count\n";
  for (const auto& [hs, histogram] : profile.histograms) {
    for (int bin = 0; bin < TokenSimilarityProfile::kBins; ++bin) {
      const auto [low, high] = TokenSimilarityProfile::bin_range(bin);
      out += std::to_string(hs.layer);
      out += ',';
      out += site_name(hs.site);
      out += ',';
      out += one_decimal(low);
      out += ',';
      out += one_decimal(high);
      out += ',';
      out += std::to_string(histogram[static_cast<size_t>(bin)]);
      out += '\n';
    }
  }
  return out;
}

std::string training_history_csv(const TrainHistory& history) {
  std::string out = "epoch,split,loss,accuracy\n";
  for (const EpochStats& stats : history.epochs) {
    out += std::to_string(stats.epoch);
    out += ",train,";
    out += shortest(stats.train_loss);
    out += ',';
    out += shortest(stats.train_accuracy);
    out += '\n';
    out += std::to_string(stats.epoch);
    out += ",val,";
    out += shortest(stats.val_loss);
    out += ',';
    out += shortest(stats.val_accuracy);
    out += '\n';
  }
  return out;
}

std::string eval_table_csv(const std::vector<EvalReport>& reports) {
  std::string out = "method,natural";
  std::vector<std::string> labels;
  if (!reports.empty()) {
    for (const AttackEval& attack : reports.front().attacks) {
      require_csv_safe(attack.label, "attack label");
      labels.push_back(attack.label);
      out += ',';
      out += attack.label;
    }
  }
  out += '\n';
  for (const EvalReport& report : reports) {
    NSVIT_REQUIRE(report.attacks.size() == labels.size(), "report \"", report.defense_id,
                  "\" lists ", report.attacks.size(), " attacks; the table has ",
                  labels.size(), " attack columns");
    require_csv_safe(report.defense_id, "defense id");
    out += report.defense_id;
    out += ',';
    out += shortest(report.natural_accuracy);
    for (size_t i = 0; i < labels.size(); ++i) {
      NSVIT_REQUIRE(report.attacks[i].label == labels[i], "report \"", report.defense_id,
                    "\" lists attack \"", report.attacks[i].label, "\" where the table has \"",
                    labels[i], "\"");
      out += ',';
      out += shortest(report.attacks[i].robust_accuracy);
    }
    out += '\n';
  }
  return out;
}

std::string layer_sweep_csv(const LayerSweepResult& result) {
  std::string out = "layers,mode,accuracy\n";
  const auto emit = [&out](const std::vector<double>& accs, const char* mode) {
    for (size_t m = 0; m < accs.size(); ++m) {
      out += std::to_string(m);
      out += ',';
      out += mode;
      out += ',';
      out += shortest(accs[m]);
      out += '\n';
    }
  };
  emit(result.front, "front");
  emit(result.back, "back");
  return out;
}

std::string subset_sweep_csv(const std::vector<SubsetSweepCell>& cells) {
  std::string out = "fraction,p,alpha,robust_accuracy,natural_accuracy\n";
  for (const SubsetSweepCell& cell : cells) {
    out += shortest(cell.fraction);
    out += ',';
    out += shortest(cell.p);
    out += ',';
    out += shortest(cell.alpha);
    out += ',';
    out += shortest(cell.robust_accuracy);
    out += ',';
    out += shortest(cell.natural_accuracy);
    out += '\n';
  }
  return out;
}

std::string eval_report_json(const EvalReport& report) {
  ordered_json j;
  j["version"] = 1;
  j["model_id"] = report.model_id;
  j["defense_id"] = report.defense_id;
  j["natural_accuracy"] = report.natural_accuracy;
  j["sample_count"] = report.sample_count;
  j["seed"] = report.seed;
  j["timestamp"] = report.timestamp;
  j["attacks"] = ordered_json::array();
  for (const AttackEval& attack : report.attacks) {
    ordered_json a;
    a["label"] = attack.label;
    a["config"] = attack_config_to_json(attack.config);
    a["natural_accuracy"] = attack.natural_accuracy;
    a["robust_accuracy"] = attack.robust_accuracy;
    a["sample_count"] = attack.sample_count;
    j["attacks"].push_back(std::move(a));
  }
  return j.dump(2) + "\n";
}

EvalReport eval_report_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string("evaluation report is not valid JSON: ") + e.what());
  }
  try {
    const int version = j.at("version").get<int>();
    if (version != 1) {
      throw IoError("unsupported evaluation report version " + std::to_string(version));
    }
    EvalReport report;
    report.model_id = j.at("model_id").get<std::string>();
    report.defense_id = j.at("defense_id").get<std::string>();
    report.natural_accuracy = j.at("natural_accuracy").get<double>();
    report.sample_count = j.at("sample_count").get<int>();
    report.seed = j.at("seed").get<uint64_t>();
    report.timestamp = j.at("timestamp").get<int64_t>();
    for (const json& a : j.at("attacks")) {
      AttackEval attack;
      attack.label = a.at("label").get<std::string>();
      attack.config = attack_config_from_json(a.at("config"));
      attack.natural_accuracy = a.at("natural_accuracy").get<double>();
      attack.robust_accuracy = a.at("robust_accuracy").get<double>();
      attack.sample_count = a.at("sample_count").get<int>();
      report.attacks.push_back(std::move(attack));
    }
    report.validate();
    return report;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed evaluation report: ") + e.what());
  } catch (const ContractError& e) {
    throw IoError(std::string("malformed evaluation report: ") + e.what());
  }
}

std::string report_content_hash(const EvalReport& report) {
  EvalReport canonical = report;
  canonical.timestamp = 0;
  return sha256_hex(eval_report_json(canonical));
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) {
    throw IoError("cannot open " + path.string() + " for writing");
  }
  os.write(content.data(), static_cast<std::streamsize>(content.size()));
  os.flush();
  if (!os) {
    throw IoError("failed writing " + path.string());
  }
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw IoError("cannot open " + path.string() + " for reading");
  }
  std::ostringstream buffer;
  buffer << is.rdbuf();
  if (is.bad()) {
    throw IoError("failed reading " + path.string());
  }
  return buffer.str();
}

}  // namespace nsvit
