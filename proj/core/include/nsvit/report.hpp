#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "nsvit/analysis.hpp"
#include "nsvit/eval.hpp"
#include "nsvit/neuroshield.hpp"
#include "nsvit/training.hpp"

namespace nsvit {

// Shortest decimal string that parses back to the same value (fixed or
// scientific, whichever is shorter). All CSV/JSON numbers use this except
// histogram bin edges, which print with one fixed decimal.
std::string format_number(double v);
std::string format_number(float v);

// Every emitter returns full file content: a fixed header line followed by
// one row per record, each line '\n'-terminated. Empty input gives the
// header alone. Layer indices are 0-based throughout.

// layer,kind,value — one row per layer per curve, curves in input order.
std::string similarity_curve_csv(const std::vector<SimilarityCurve>& curves);

// layer,site,p,fraction — rows ordered by (layer, site), then by p.
std::string fraction_curve_csv(const FractionCurve& curve);

// layer,site,bin_low,bin_high,count — twenty bins per (layer, site).
std::string token_histogram_csv(const TokenSimilarityProfile& profile);

// epoch,split,loss,accuracy — a train row then a val row per epoch.
std::string training_history_csv(const TrainHistory& history);

// method,natural,<attack label...> — one row per report (method =
// defense_id). All reports must list the same attack labels in the same
// order; ids and labels must be CSV-safe (no comma, quote, or newline).
std::string eval_table_csv(const std::vector<EvalReport>& reports);

// layers,mode,accuracy — front rows for m = 0..depth, then back rows.
std::string layer_sweep_csv(const LayerSweepResult& result);

// fraction,p,alpha,robust_accuracy,natural_accuracy — cells in input order.
std::string subset_sweep_csv(const std::vector<SubsetSweepCell>& cells);

// Canonical JSON for an evaluation report; from_json(json(r)) == r.
std::string eval_report_json(const EvalReport& report);
EvalReport eval_report_from_json(const std::string& text);

// SHA-256 of the canonical JSON with the timestamp zeroed, so re-running an
// identical experiment at a different time yields the same hash.
std::string report_content_hash(const EvalReport& report);

void write_text_file(const std::filesystem::path& path, const std::string& content);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace nsvit
