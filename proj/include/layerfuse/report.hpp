// SPDX-License-Identifier: Apache-2.0
//
// Run reports and their on-disk layouts.
//
// report.json   {provenance, config, plan, seed, param_count, heads, heads_fallback,
//                test_bal_acc, baseline_bal_acc, gain_pp, history}
// history.csv   epoch,train_loss,train_bal_acc,val_bal_acc
// heatmap.csv   kind,layer_1,...,layer_L   (one row per token kind)
// cka.csv       layer,<kind>...            (one column per token kind)
//
// Floats in CSV files use 17 significant digits; JSON uses shortest round-trip form.
#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "layerfuse/analysis.hpp"
#include "layerfuse/probes.hpp"
#include "layerfuse/trainer.hpp"

namespace layerfuse::report {

inline constexpr const char *kArtifact = "layerfuse";
inline constexpr const char *kVersion = "0.1.0";

nlohmann::json provenance(const std::string &command, const nlohmann::json &extra = {});

struct RunReport {
  probes::ProbeConfig config;
  trainer::TrainPlan plan;
  std::int64_t param_count = 0;
  std::optional<double> test_bal_acc;
  std::optional<double> baseline_bal_acc;
  trainer::TrainHistory history;
  nlohmann::json provenance;
};

nlohmann::json history_summary(const trainer::TrainHistory &history);
nlohmann::json to_json(const RunReport &report);
nlohmann::json leaderboard_json(const trainer::GridResult &result);

void write_json(const std::filesystem::path &path, const nlohmann::json &j);
nlohmann::json read_json(const std::filesystem::path &path);

void write_history_csv(const std::filesystem::path &path, const trainer::TrainHistory &history);
void write_heatmap_csv(const std::filesystem::path &path, const analysis::HeatmapMatrix &heatmap);
void write_cka_csv(const std::filesystem::path &path,
                   const std::map<std::string, std::vector<double>> &curves);

/// Writes report.json and history.csv (plus heatmap.csv / cka.csv when given) into `dir`.
void emit_report(const std::filesystem::path &dir, const RunReport &report,
                 const analysis::HeatmapMatrix *heatmap = nullptr,
                 const std::map<std::string, std::vector<double>> *cka_curves = nullptr);

/// Formats with 17 significant digits.
std::string format_real(double v);

} // namespace layerfuse::report
