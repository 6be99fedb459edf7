// SPDX-License-Identifier: Apache-2.0
#include "layerfuse/report.hpp"

#include <fstream>

#include <fmt/format.h>

#include "layerfuse/checkpoint.hpp"

namespace layerfuse::report {

using nlohmann::json;

namespace {

std::ofstream open_out(const std::filesystem::path &path) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out)
    throw Error("cannot open '" + path.string() + "' for writing");
  return out;
}

json optional_real(const std::optional<double> &v) { return v ? json(*v) : json(nullptr); }

} // namespace

std::string format_real(double v) { return fmt::format("{:.17g}", v); }

json provenance(const std::string &command, const json &extra) {
  json j{{"artifact", kArtifact}, {"version", kVersion}, {"command", command}};
  if (extra.is_object())
    for (const auto &[k, v] : extra.items())
      j[k] = v;
  return j;
}

json history_summary(const trainer::TrainHistory &history) {
  json j{{"epochs", history.epochs.size()}, {"wall_clock_seconds", history.seconds}};
  if (!history.epochs.empty()) {
    const auto &last = history.epochs.back();
    j["final_train_loss"] = last.train_loss;
    j["final_train_bal_acc"] = last.train_bal_acc;
    j["final_val_bal_acc"] = optional_real(last.val_bal_acc);
  }
  return j;
}

json to_json(const RunReport &report) {
  json j;
  j["provenance"] = report.provenance;
  j["config"] = probes::config_to_json(report.config);
  j["plan"] = trainer::plan_to_json(report.plan);
  j["seed"] = report.plan.seed;
  j["param_count"] = report.param_count;
  j["heads"] = report.config.heads;
  j["heads_fallback"] = report.config.heads_fallback;
  j["test_bal_acc"] = optional_real(report.test_bal_acc);
  j["baseline_bal_acc"] = optional_real(report.baseline_bal_acc);
  if (report.test_bal_acc && report.baseline_bal_acc)
    j["gain_pp"] = analysis::accuracy_gain(*report.test_bal_acc, *report.baseline_bal_acc);
  else
    j["gain_pp"] = nullptr;
  j["history"] = history_summary(report.history);
  return j;
}

json leaderboard_json(const trainer::GridResult &result) {
  json cells = json::array();
  for (const auto &c : result.cells) {
    json cell{{"lr", c.lr},
              {"wd", c.weight_decay},
              {"dropout", c.dropout},
              {"val_bal_acc", c.valid ? json(c.val_bal_acc) : json(nullptr)},
              {"train_bal_acc", c.valid ? json(c.train_bal_acc) : json(nullptr)},
              {"steps", c.steps},
              {"seconds", c.seconds}};
    if (!c.valid)
      cell["error"] = c.error;
    cells.push_back(std::move(cell));
  }
  return {{"cells", std::move(cells)}, {"winner", result.winner}};
}

void write_json(const std::filesystem::path &path, const json &j) {
  auto out = open_out(path);
  out << j.dump(2) << "\n";
}

json read_json(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw ConfigError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception &e) {
    throw ConfigError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

void write_history_csv(const std::filesystem::path &path, const trainer::TrainHistory &history) {
  auto out = open_out(path);
  out << "epoch,train_loss,train_bal_acc,val_bal_acc\n";
  for (std::size_t e = 0; e < history.epochs.size(); ++e) {
    const auto &r = history.epochs[e];
    out << e + 1 << "," << format_real(r.train_loss) << "," << format_real(r.train_bal_acc) << ","
        << (r.val_bal_acc ? format_real(*r.val_bal_acc) : std::string()) << "\n";
  }
}

void write_heatmap_csv(const std::filesystem::path &path, const analysis::HeatmapMatrix &heatmap) {
  auto out = open_out(path);
  out << "kind";
  for (int l = 1; l <= heatmap.num_layers; ++l)
    out << ",layer_" << l;
  out << "\n";
  for (std::size_t k = 0; k < heatmap.kinds.size(); ++k) {
    out << store::to_string(heatmap.kinds[k]);
    for (std::size_t l = 0; l < static_cast<std::size_t>(heatmap.num_layers); ++l)
      out << "," << format_real(heatmap.values.at(k, l));
    out << "\n";
  }
}

void write_cka_csv(const std::filesystem::path &path,
                   const std::map<std::string, std::vector<double>> &curves) {
  auto out = open_out(path);
  out << "layer";
  std::size_t L = 0;
  for (const auto &[kind, curve] : curves) {
    out << "," << kind;
    L = std::max(L, curve.size());
  }
  out << "\n";
  for (std::size_t l = 0; l < L; ++l) {
    out << l + 1;
    for (const auto &[kind, curve] : curves)
      out << "," << (l < curve.size() ? format_real(curve[l]) : std::string());
    out << "\n";
  }
}

void emit_report(const std::filesystem::path &dir, const RunReport &report,
                 const analysis::HeatmapMatrix *heatmap,
                 const std::map<std::string, std::vector<double>> *cka_curves) {
  std::filesystem::create_directories(dir);
  write_json(dir / "report.json", to_json(report));
  write_history_csv(dir / "history.csv", report.history);
  if (heatmap)
    write_heatmap_csv(dir / "heatmap.csv", *heatmap);
  if (cka_curves)
    write_cka_csv(dir / "cka.csv", *cka_curves);
}

} // namespace layerfuse::report
