// SPDX-License-Identifier: Apache-2.0
#include "layerfuse/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "layerfuse/analysis.hpp"
#include "layerfuse/checkpoint.hpp"
#include "layerfuse/probes.hpp"
#include "layerfuse/report.hpp"
#include "layerfuse/reprstore.hpp"
#include "layerfuse/synthgen.hpp"
#include "layerfuse/trainer.hpp"

namespace layerfuse::cli {

namespace fs = std::filesystem;
using nlohmann::json;

int default_workers() {
  const char *env = std::getenv("LAYERFUSE_WORKERS");
  if (!env || !*env)
    return 1;
  char *end = nullptr;
  const long v = std::strtol(env, &end, 10);
  return (end && *end == '\0' && v > 0) ? static_cast<int>(std::min<long>(v, 1024)) : 1;
}

namespace {

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  std::replace(s.begin(), s.end(), '_', '-');
  return s;
}

// Flags shared by every command that builds a probe.
struct ProbeFlags {
  std::string probe = "attentive-fusion";
  std::optional<std::string> layers;
  std::optional<std::string> tokens;
  std::string heads = "auto";

  void add(CLI::App *app) {
    app->add_option("--probe", probe,
                    "probe kind: linear (last-layer CLS baseline), linear-concat, "
                    "attentive-fusion, aat (attention over the last layer's CLS and patch "
                    "tokens) or hybrid (all tokens of the quarterly layers)")
        ->capture_default_str();
    app->add_option("--layers", layers,
                    "layer subset: last, mid+last, quarterly, all, or a 1-based list such as "
                    "3,6,9 [default: last for linear, all otherwise; fixed for aat/hybrid]");
    app->add_option("--tokens", tokens,
                    "token kinds, '+'-joined from cls, ap, patch [default: cls for linear, "
                    "cls+ap otherwise; fixed for aat/hybrid]");
    app->add_option("--heads", heads,
                    "attention heads: auto (one per stacked row, falling back to the largest "
                    "divisor of 2d) or an integer dividing 2d; aat defaults to 8, hybrid to 24")
        ->capture_default_str();
  }

  std::optional<int> explicit_heads() const {
    if (lower(heads) == "auto")
      return std::nullopt;
    try {
      std::size_t pos = 0;
      const int m = std::stoi(heads, &pos);
      if (pos == heads.size())
        return m;
    } catch (const std::exception &) {
    }
    throw ConfigError("--heads must be 'auto' or an integer (got '" + heads + "')");
  }

  probes::ProbeConfig build(const store::StoreMeta &meta) const {
    const auto name = lower(probe);
    probes::ProbeConfig cfg;
    cfg.kind = probes::parse_probe_kind(name);
    cfg.num_heads = explicit_heads();
    if (name == "aat" || name == "hybrid") {
      if (meta.num_patches < 1 || !meta.token_kinds.patch)
        throw ConfigError("probe '" + name + "' attends over patch tokens, but store '" +
                          meta.model_id +
                          "' has no PATCH tensors; re-extract with patch tokens or use "
                          "attentive-fusion");
      if (layers || tokens)
        throw ConfigError("probe '" + name + "' fixes its layers and tokens; drop --layers/--tokens");
      cfg.tokens = {true, false, true};
      if (name == "aat") {
        cfg.layers = store::LayerScheme::last();
        cfg.num_heads = cfg.num_heads.value_or(probes::kAatHeads);
        cfg.pinned_weight_decay = probes::kAatWeightDecay;
      } else {
        cfg.layers = store::LayerScheme::quarterly();
        cfg.num_heads = cfg.num_heads.value_or(probes::kHybridHeads);
        cfg.attn_dropout = probes::kHybridDropout;
      }
    } else {
      const bool linear_cls = cfg.kind == probes::ProbeKind::LinearCls;
      const bool token_kind = cfg.kind == probes::ProbeKind::AttentiveTokens;
      cfg.layers = store::LayerScheme::parse(layers.value_or(linear_cls || token_kind ? "last" : "all"));
      cfg.tokens = store::TokenSet::parse(
          tokens.value_or(linear_cls ? "cls" : token_kind ? "cls+patch" : "cls+ap"));
      if (!probes::is_attentive(cfg.kind) && cfg.num_heads)
        throw ConfigError("--heads applies to attentive probes only");
    }
    return probes::resolve_config(cfg, meta);
  }

  json to_json() const {
    return {{"probe", probe},
            {"layers", layers ? json(*layers) : json(nullptr)},
            {"tokens", tokens ? json(*tokens) : json(nullptr)},
            {"heads", heads}};
  }
};

// Optimization flags for train / seedstudy.
struct OptFlags {
  double lr = 0.01;
  std::optional<double> wd;
  std::optional<double> dropout;
  std::uint64_t seed = 0;
  int batch = trainer::kDefaultBatch;
  int epochs = trainer::kDefaultEpochs;

  void add(CLI::App *app) {
    app->add_option("--lr", lr, "peak learning rate of the cosine schedule")->capture_default_str();
    app->add_option("--wd", wd,
                    "AdamW decoupled weight decay [default: 1e-4; 0.1 for aat]");
    app->add_option("--dropout", dropout,
                    "attention dropout probability in [0, 1) [default: 0; 0.5 for hybrid]");
    app->add_option("--seed", seed, "seed for initialization, shuffling, jitter and dropout")
        ->capture_default_str();
    add_schedule(app, batch, epochs);
  }

  static void add_schedule(CLI::App *app, int &batch, int &epochs) {
    app->add_option("--batch", batch,
                    "requested batch size; capped at 2048 and at N/5 so every epoch has at "
                    "least 5 batches")
        ->capture_default_str();
    app->add_option("--epochs", epochs,
                    "requested epochs; raised until training takes at least 1000 steps")
        ->capture_default_str();
  }

  trainer::TrainPlan plan(const probes::ProbeConfig &cfg, std::size_t n_train) const {
    const double weight_decay = wd.value_or(cfg.pinned_weight_decay.value_or(1e-4));
    const double p = dropout.value_or(cfg.attn_dropout);
    if (!probes::is_attentive(cfg.kind) && p != 0.0)
      throw ConfigError("--dropout applies to attentive probes only");
    return trainer::make_plan(n_train, lr, weight_decay, p, seed, batch, epochs);
  }

  json to_json() const {
    return {{"lr", lr},
            {"wd", wd ? json(*wd) : json(nullptr)},
            {"dropout", dropout ? json(*dropout) : json(nullptr)},
            {"seed", seed},
            {"batch", batch},
            {"epochs", epochs}};
  }
};

trainer::SplitSpec default_splits(const store::FeatureStore &store) {
  if (!store.labels.contains("train"))
    throw ConfigError("store '" + store.meta.model_id + "' has no 'train' split");
  trainer::SplitSpec spec;
  if (store.labels.contains("val"))
    spec.val = trainer::IndexedSplit{"val", {}};
  return spec;
}

std::optional<double> test_accuracy(const probes::Probe &probe, const store::FeatureStore &store) {
  if (!store.labels.contains("test"))
    return std::nullopt;
  return trainer::evaluate(probe, store, {"test", {}}).bal_acc;
}

double baseline_from_file(const fs::path &path) {
  const auto j = report::read_json(path);
  for (const char *key : {"test_bal_acc", "bal_acc"})
    if (j.contains(key) && j[key].is_number())
      return j[key].get<double>();
  throw ConfigError("baseline file '" + path.string() +
                    "' has no numeric test_bal_acc or bal_acc field");
}

json store_info(const fs::path &path, const store::FeatureStore &store) {
  return {{"path", path.string()},
          {"model_id", store.meta.model_id},
          {"num_layers", store.meta.num_layers},
          {"num_patches", store.meta.num_patches},
          {"num_classes", store.meta.num_classes},
          {"splits", store.meta.split_sizes}};
}

json config_summary(const probes::ProbeConfig &cfg) {
  return {{"label", cfg.label()},
          {"rows", cfg.num_rows},
          {"heads", cfg.heads},
          {"heads_fallback", cfg.heads_fallback},
          {"d", cfg.d_model},
          {"classes", cfg.num_classes}};
}

std::vector<std::string> split_list(const std::string &text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

// ---------------------------------------------------------------------------

struct SynthCmd {
  std::string preset = "separable";
  std::optional<std::string> spec_path;
  std::optional<std::size_t> n_train, n_val, n_test;
  std::optional<int> num_layers, dim, patches, classes, layer;
  std::optional<std::string> dims, kind, model_id;
  std::optional<double> signal, noise, imbalance;
  std::optional<std::uint64_t> seed;
  std::string out_file;

  void add(CLI::App *app) {
    app->add_option("--preset", preset,
                    "generator: separable (every slot carries the class signal), planted (only "
                    "--layer/--kind carries it) or mixed (separable with per-layer --dims)")
        ->capture_default_str();
    app->add_option("--spec", spec_path, "JSON synth spec; explicit flags override its fields")
        ->check(CLI::ExistingFile);
    app->add_option("--out", out_file, "output feature store (.lfr)")->required();
    app->add_option("--n-train", n_train, "train split size [default: 200]");
    app->add_option("--n-val", n_val, "validation split size; 0 omits the split [default: 0]");
    app->add_option("--n-test", n_test, "test split size; 0 omits the split [default: 100]");
    app->add_option("--num-layers", num_layers, "number of layers L [default: 4]");
    app->add_option("--dim", dim, "hidden width shared by every layer [default: 16]");
    app->add_option("--dims", dims, "comma list of per-layer widths, one per layer");
    app->add_option("--patches", patches, "patch tokens per layer P; > 0 stores PATCH tensors [default: 0]");
    app->add_option("--classes", classes, "number of classes K (K <= every width) [default: 2]");
    app->add_option("--layer", layer, "planted layer (1-based), planted preset only");
    app->add_option("--kind", kind, "planted token kind: cls, ap or patch, planted preset only");
    app->add_option("--signal", signal, "class-mean scale before noise [default: 1.0]");
    app->add_option("--noise", noise, "Gaussian noise standard deviation [default: 0.1]");
    app->add_option("--imbalance", imbalance,
                    "majority/minority class-size ratio >= 1, geometric across classes [default: 1]");
    app->add_option("--seed", seed, "generator seed [default: 0]");
    app->add_option("--model-id", model_id, "model id recorded in the store meta [default: synthetic]");
  }

  synth::SynthSpec spec() const {
    synth::SynthSpec s = spec_path ? synth::spec_from_json(report::read_json(*spec_path)) : synth::SynthSpec{};
    if (n_train) s.n_train = *n_train;
    if (n_val) s.n_val = *n_val;
    if (n_test) s.n_test = *n_test;
    if (num_layers) s.num_layers = *num_layers;
    if (dim) s.dims = {*dim};
    if (dims) {
      s.dims.clear();
      for (const auto &t : split_list(*dims)) {
        try {
          s.dims.push_back(std::stoi(t));
        } catch (const std::exception &) {
          throw ConfigError("dims: '" + t + "' is not an integer");
        }
      }
    }
    if (patches) s.num_patches = *patches;
    if (classes) s.num_classes = *classes;
    if (layer) s.planted_layer = *layer;
    if (kind) s.planted_kind = store::parse_token_kind(*kind);
    if (signal) s.signal_strength = *signal;
    if (noise) s.noise_std = *noise;
    if (imbalance) s.imbalance_ratio = *imbalance;
    if (seed) s.seed = *seed;
    if (model_id) s.model_id = *model_id;
    return s;
  }

  int run(std::ostream &out) const {
    const auto s = spec();
    const auto p = lower(preset);
    store::FeatureStore fs;
    if (p == "separable") {
      fs = synth::generate_separable(s);
    } else if (p == "planted") {
      if (!s.planted_layer || !s.planted_kind)
        throw ConfigError("planted preset needs planted_layer (--layer) and planted_kind (--kind)");
      fs = synth::generate_planted(s);
    } else if (p == "mixed") {
      fs = synth::generate_mixed_width(s);
    } else {
      throw ConfigError("unknown preset '" + preset + "' (expected separable, planted or mixed)");
    }
    store::write_store(fs, out_path());
    json j{{"provenance", report::provenance("synth", {{"preset", p}})},
           {"spec", synth::spec_to_json(s)},
           {"store", store_info(out_path(), fs)}};
    out << j.dump(2) << "\n";
    return kExitOk;
  }

  fs::path out_path() const { return out_file; }
};

struct TrainCmd {
  std::string features;
  std::string out_dir;
  std::optional<std::string> baseline;
  ProbeFlags probe;
  OptFlags opt;

  void add(CLI::App *app) {
    app->add_option("--features", features, "input feature store (.lfr)")
        ->required()
        ->check(CLI::ExistingFile);
    app->add_option("--out", out_dir, "output directory for probe.lfpb, report.json, history.csv")
        ->required();
    app->add_option("--baseline", baseline,
                    "report.json of a baseline run; adds gain_pp = 100 * (test - baseline)")
        ->check(CLI::ExistingFile);
    probe.add(app);
    opt.add(app);
  }

  int run(std::ostream &out, const std::vector<std::string> &args) const {
    const auto store = store::read_store(features);
    const auto cfg = probe.build(store.meta);
    const auto splits = default_splits(store);
    const auto plan = opt.plan(cfg, store.split_size("train"));
    const auto result = trainer::train(cfg, plan, store, splits);

    report::RunReport rep;
    rep.config = result.probe.config;
    rep.plan = plan;
    rep.param_count = static_cast<std::int64_t>(probes::enumerate_param_count(result.probe));
    rep.test_bal_acc = test_accuracy(result.probe, store);
    if (baseline)
      rep.baseline_bal_acc = baseline_from_file(*baseline);
    rep.history = result.history;
    rep.provenance = report::provenance(
        "train", {{"args", args}, {"store", store_info(features, store)},
                  {"flags", {{"probe", probe.to_json()}, {"opt", opt.to_json()}}}});

    const fs::path dir(out_dir);
    fs::create_directories(dir);
    probes::save_checkpoint(dir / "probe.lfpb", result.probe,
                            {{"provenance", rep.provenance}, {"plan", trainer::plan_to_json(plan)}});
    report::emit_report(dir, rep);
    json summary{{"probe", config_summary(rep.config)},
                 {"param_count", rep.param_count},
                 {"steps", plan.total_steps},
                 {"test_bal_acc", rep.test_bal_acc ? json(*rep.test_bal_acc) : json(nullptr)},
                 {"out", dir.string()}};
    out << summary.dump(2) << "\n";
    return kExitOk;
  }
};

struct GridCmd {
  std::string features;
  std::string out_dir;
  ProbeFlags probe;
  std::uint64_t seed = 0;
  int workers = 1;
  int batch = trainer::kDefaultBatch;
  int epochs = trainer::kDefaultEpochs;
  trainer::GridSpace space;

  void add(CLI::App *app) {
    workers = default_workers();
    app->add_option("--features", features, "input feature store (.lfr)")
        ->required()
        ->check(CLI::ExistingFile);
    app->add_option("--out", out_dir,
                    "output directory for leaderboard.json and the winner's probe.lfpb, "
                    "report.json, history.csv")
        ->required();
    probe.add(app);
    app->add_option("--seed", seed, "seed for the 80/20 split and every cell's training run")
        ->capture_default_str();
    app->add_option("--workers", workers,
                    "parallel training runs [default: LAYERFUSE_WORKERS or 1]");
    app->add_option("--lrs", space.learning_rates, "learning-rate axis")
        ->delimiter(',')
        ->capture_default_str();
    app->add_option("--wds", space.weight_decays, "weight-decay axis (ignored for aat: pinned to 0.1)")
        ->delimiter(',')
        ->capture_default_str();
    app->add_option("--dropouts", space.dropouts, "attention-dropout axis (linear probes use 0 only)")
        ->delimiter(',')
        ->capture_default_str();
    OptFlags::add_schedule(app, batch, epochs);
  }

  int run(std::ostream &out, const std::vector<std::string> &args) const {
    const auto store = store::read_store(features);
    const auto cfg = probe.build(store.meta);
    const auto result =
        trainer::grid_search(cfg, space, store, seed, "train", std::max(1, workers), batch, epochs);

    const auto prov = report::provenance(
        "gridsearch", {{"args", args},
                       {"store", store_info(features, store)},
                       {"flags", {{"probe", probe.to_json()}, {"seed", seed}, {"batch", batch},
                                  {"epochs", epochs}, {"workers", workers}}}});
    const fs::path dir(out_dir);
    fs::create_directories(dir);
    auto board = report::leaderboard_json(result);
    board["provenance"] = prov;
    board["config"] = probes::config_to_json(cfg);
    board["split"] = {{"train", result.split.train.size()}, {"val", result.split.val.size()}};
    report::write_json(dir / "leaderboard.json", board);

    report::RunReport rep;
    rep.config = result.best_probe.config;
    rep.plan = result.best_plan;
    rep.param_count = static_cast<std::int64_t>(probes::enumerate_param_count(result.best_probe));
    rep.test_bal_acc = test_accuracy(result.best_probe, store);
    rep.history = result.best_history;
    rep.provenance = prov;
    probes::save_checkpoint(dir / "probe.lfpb", result.best_probe,
                            {{"provenance", prov}, {"plan", trainer::plan_to_json(rep.plan)}});
    report::emit_report(dir, rep);

    const auto &w = result.cells[result.winner];
    json summary{{"cells", result.cells.size()},
                 {"winner", {{"lr", w.lr}, {"wd", w.weight_decay}, {"dropout", w.dropout},
                             {"val_bal_acc", w.val_bal_acc}}},
                 {"test_bal_acc", rep.test_bal_acc ? json(*rep.test_bal_acc) : json(nullptr)}};
    out << summary.dump(2) << "\n";
    return kExitOk;
  }
};

struct EvalCmd {
  std::string checkpoint;
  std::string features;
  std::string split = "test";
  std::optional<std::string> baseline;
  std::optional<double> baseline_acc;
  std::optional<std::string> out_dir;

  void add(CLI::App *app) {
    app->add_option("--checkpoint", checkpoint, "trained probe (.lfpb)")
        ->required()
        ->check(CLI::ExistingFile);
    app->add_option("--features", features, "feature store (.lfr) to evaluate on")
        ->required()
        ->check(CLI::ExistingFile);
    app->add_option("--split", split, "split to evaluate")->capture_default_str();
    auto *b = app->add_option("--baseline", baseline,
                              "baseline report.json (reads test_bal_acc); adds gain_pp")
                  ->check(CLI::ExistingFile);
    app->add_option("--baseline-acc", baseline_acc, "baseline balanced accuracy in [0, 1]")
        ->excludes(b);
    app->add_option("--out", out_dir, "directory to write eval.json into (always printed)");
  }

  int run(std::ostream &out, const std::vector<std::string> &args) const {
    const auto ckpt = probes::load_checkpoint(checkpoint);
    const auto store = store::read_store(features);
    if (!store.labels.contains(split))
      throw ConfigError("store has no split '" + split + "'");
    const auto ev = trainer::evaluate(ckpt.probe, store, {split, {}});
    const int K = ckpt.probe.config.num_classes;
    json j{{"provenance", report::provenance("eval", {{"args", args},
                                                      {"store", store_info(features, store)},
                                                      {"checkpoint", checkpoint},
                                                      {"training", ckpt.provenance}})},
           {"config", probes::config_to_json(ckpt.probe.config)},
           {"split", split},
           {"samples", ev.labels.size()},
           {"bal_acc", analysis::balanced_accuracy(ev.preds, ev.labels, K)}};
    std::optional<double> base = baseline_acc;
    if (baseline)
      base = baseline_from_file(*baseline);
    if (base) {
      const auto gain = analysis::make_gain(ckpt.probe.config.label(), j["bal_acc"].get<double>(), *base);
      j["baseline_bal_acc"] = gain.baseline_acc;
      j["gain_pp"] = gain.delta_pp;
    } else {
      j["baseline_bal_acc"] = nullptr;
      j["gain_pp"] = nullptr;
    }
    if (out_dir)
      report::write_json(fs::path(*out_dir) / "eval.json", j);
    out << j.dump(2) << "\n";
    return kExitOk;
  }
};

struct HeatmapCmd {
  std::string checkpoint;
  std::string features;
  std::string split = "test";
  std::string out_dir = ".";

  void add(CLI::App *app) {
    app->add_option("--checkpoint", checkpoint, "trained attentive probe (.lfpb)")
        ->required()
        ->check(CLI::ExistingFile);
    app->add_option("--features", features, "feature store (.lfr)")
        ->required()
        ->check(CLI::ExistingFile);
    app->add_option("--split", split, "split whose eval-mode attention is averaged")
        ->capture_default_str();
    app->add_option("--out", out_dir, "directory for heatmap.csv and heatmap.json")
        ->capture_default_str();
  }

  int run(std::ostream &out, const std::vector<std::string> &args) const {
    const auto ckpt = probes::load_checkpoint(checkpoint);
    const auto &cfg = ckpt.probe.config;
    if (!probes::is_attentive(cfg.kind))
      throw ConfigError("heatmap needs an attentive probe; checkpoint holds " +
                        std::string(probes::to_string(cfg.kind)));
    const auto store = store::read_store(features);
    if (!store.labels.contains(split))
      throw ConfigError("store has no split '" + split + "'");
    analysis::HeatmapAccumulator acc(store::row_layout(store.meta, cfg.layer_indices, cfg.tokens),
                                     store.meta.num_layers);
    trainer::evaluate(ckpt.probe, store, {split, {}}, &acc);
    const auto hm = acc.finish();
    const auto [kind, layer] = hm.argmax();

    json values = json::object();
    for (std::size_t k = 0; k < hm.kinds.size(); ++k) {
      std::vector<double> row;
      for (int l = 0; l < hm.num_layers; ++l)
        row.push_back(hm.values.at(k, static_cast<std::size_t>(l)));
      values[std::string(store::to_string(hm.kinds[k]))] = row;
    }
    json j{{"provenance", report::provenance("heatmap", {{"args", args},
                                                         {"store", store_info(features, store)},
                                                         {"checkpoint", checkpoint}})},
           {"config", probes::config_to_json(cfg)},
           {"split", split},
           {"samples", hm.samples},
           {"heads", hm.heads},
           {"argmax", {{"kind", store::to_string(kind)}, {"layer", layer}}},
           {"values", values}};
    const fs::path dir(out_dir);
    report::write_heatmap_csv(dir / "heatmap.csv", hm);
    report::write_json(dir / "heatmap.json", j);
    out << j.dump(2) << "\n";
    return kExitOk;
  }
};

struct CkaCmd {
  std::string features;
  std::optional<std::string> split;
  std::string kind = "cls";
  std::optional<int> reference;
  double sigma = 0.2;
  bool absolute_sigma = false;
  std::size_t max_rows = analysis::kCkaMaxRows;
  std::uint64_t seed = 0;
  std::string out_dir = ".";

  void add(CLI::App *app) {
    app->add_option("--features", features, "feature store (.lfr)")
        ->required()
        ->check(CLI::ExistingFile);
    app->add_option("--split", split, "split to sample from [default: test if present, else train]");
    app->add_option("--kind", kind, "token kind compared across layers: cls or ap")
        ->capture_default_str();
    app->add_option("--reference", reference, "reference layer (1-based) [default: last layer]");
    app->add_option("--sigma", sigma,
                    "RBF bandwidth as a fraction of the median pairwise distance")
        ->capture_default_str();
    app->add_flag("--absolute-sigma", absolute_sigma, "treat --sigma as an absolute bandwidth");
    app->add_option("--max-rows", max_rows, "seeded subsample cap")->capture_default_str();
    app->add_option("--seed", seed, "subsampling seed")->capture_default_str();
    app->add_option("--out", out_dir, "directory for cka.csv and cka.json")->capture_default_str();
  }

  int run(std::ostream &out, const std::vector<std::string> &args) const {
    const auto store = store::read_store(features);
    const std::string s = split.value_or(store.labels.contains("test") ? "test" : "train");
    if (!store.labels.contains(s))
      throw ConfigError("store has no split '" + s + "'");
    const auto k = store::parse_token_kind(kind);
    if (k == store::TokenKind::Patch)
      throw ConfigError("cka compares per-sample summary tokens; --kind must be cls or ap");
    const analysis::CkaOptions opts{!absolute_sigma, sigma};
    const auto curve = analysis::layer_similarity_curve(store, s, k, reference, opts, seed, max_rows);
    const std::string col(store::to_string(k));
    const std::map<std::string, std::vector<double>> curves{{lower(col), curve}};
    json j{{"provenance", report::provenance("cka", {{"args", args},
                                                     {"store", store_info(features, store)}})},
           {"split", s},
           {"kind", lower(col)},
           {"reference_layer", reference.value_or(store.meta.num_layers)},
           {"sigma", sigma},
           {"median_fraction", !absolute_sigma},
           {"seed", seed},
           {"max_rows", max_rows},
           {"curve", curve}};
    const fs::path dir(out_dir);
    report::write_cka_csv(dir / "cka.csv", curves);
    report::write_json(dir / "cka.json", j);
    out << j.dump(2) << "\n";
    return kExitOk;
  }
};

struct ParamsCmd {
  std::string probe = "attentive-fusion";
  std::int64_t d = 0;
  std::int64_t classes = 0;
  std::optional<std::int64_t> num_layers;
  bool as_json = false;

  void add(CLI::App *app) {
    app->add_option("--probe", probe, "probe kind (aat and hybrid count as attentive)")
        ->capture_default_str();
    app->add_option("--d", d, "hidden width d")->required();
    app->add_option("--classes", classes, "number of classes K")->required();
    app->add_option("--num-layers", num_layers,
                    "fused layers |L|, linear-concat only (concatenates CLS and AP per layer)");
    app->add_flag("--json", as_json, "print a JSON object with provenance instead of the bare count");
  }

  int run(std::ostream &out, const std::vector<std::string> &args) const {
    const auto kind = probes::parse_probe_kind(lower(probe));
    if (d < 1 || classes < 1)
      throw ConfigError("--d and --classes must be positive");
    if (kind == probes::ProbeKind::LinearConcat && !num_layers)
      throw ConfigError("linear-concat parameter count needs --num-layers");
    const auto n = probes::count_params(kind, d, num_layers.value_or(1), classes);
    if (as_json) {
      json j{{"provenance", report::provenance("params", {{"args", args}})},
             {"probe", probes::to_string(kind)},
             {"d", d},
             {"classes", classes},
             {"num_layers", num_layers ? json(*num_layers) : json(nullptr)},
             {"param_count", n}};
      out << j.dump(2) << "\n";
    } else {
      out << n << "\n";
    }
    return kExitOk;
  }
};

struct SeedStudyCmd {
  std::string features;
  std::string out_dir;
  ProbeFlags probe;
  OptFlags opt;
  std::optional<std::string> seeds;
  int num_seeds = 5;
  int workers = 1;

  void add(CLI::App *app) {
    workers = default_workers();
    app->add_option("--features", features, "input feature store (.lfr)")
        ->required()
        ->check(CLI::ExistingFile);
    app->add_option("--out", out_dir, "output directory for seedstudy.json")->required();
    probe.add(app);
    opt.add(app);
    app->add_option("--seeds", seeds, "explicit comma list of seeds (overrides --num-seeds)");
    app->add_option("--num-seeds", num_seeds, "number of consecutive seeds starting at --seed")
        ->capture_default_str();
    app->add_option("--workers", workers,
                    "parallel training runs [default: LAYERFUSE_WORKERS or 1]");
  }

  std::vector<std::uint64_t> seed_list() const {
    std::vector<std::uint64_t> out;
    if (seeds) {
      for (const auto &t : split_list(*seeds)) {
        try {
          out.push_back(std::stoull(t));
        } catch (const std::exception &) {
          throw ConfigError("--seeds: '" + t + "' is not a non-negative integer");
        }
      }
    } else {
      for (int i = 0; i < num_seeds; ++i)
        out.push_back(opt.seed + static_cast<std::uint64_t>(i));
    }
    return out;
  }

  int run(std::ostream &out, const std::vector<std::string> &args) const {
    const auto store = store::read_store(features);
    if (!store.labels.contains("test"))
      throw ConfigError("seed study evaluates on a 'test' split, which the store lacks");
    const auto cfg = probe.build(store.meta);
    const auto plan = opt.plan(cfg, store.split_size("train"));
    const auto study = trainer::seed_study(cfg, plan, store, default_splits(store), {"test", {}},
                                           seed_list(), std::max(1, workers));
    json j{{"provenance", report::provenance("seedstudy",
                                             {{"args", args},
                                              {"store", store_info(features, store)},
                                              {"flags", {{"probe", probe.to_json()},
                                                         {"opt", opt.to_json()},
                                                         {"workers", workers}}}})},
           {"config", probes::config_to_json(cfg)},
           {"plan", trainer::plan_to_json(plan)},
           {"seeds", study.seeds},
           {"test_bal_acc", study.test_bal_acc},
           {"mean", study.mean},
           {"std", study.stddev}};
    report::write_json(fs::path(out_dir) / "seedstudy.json", j);
    out << j.dump(2) << "\n";
    return kExitOk;
  }
};

} // namespace

int run(const std::vector<std::string> &args, std::ostream &out, std::ostream &err) {
  CLI::App app{"layerfuse: layer-fusion probes over frozen transformer features", "layerfuse"};
  app.require_subcommand(1);
  app.set_version_flag("--version", report::kVersion);

  SynthCmd synth;
  TrainCmd train;
  GridCmd grid;
  EvalCmd eval;
  HeatmapCmd heatmap;
  CkaCmd cka;
  ParamsCmd params;
  SeedStudyCmd seedstudy;

  auto *c_synth = app.add_subcommand("synth", "generate a deterministic synthetic feature store");
  auto *c_train = app.add_subcommand(
      "train", "train one probe; probes are named '[layers] ([tokens], [fusion type])'");
  auto *c_grid = app.add_subcommand(
      "gridsearch", "lr x dropout x weight-decay search on a stratified 80/20 split of train");
  auto *c_eval = app.add_subcommand("eval", "balanced accuracy of a checkpoint, optionally vs. a baseline");
  auto *c_heat = app.add_subcommand(
      "heatmap", "attention mass per (token kind, layer), averaged over heads and samples");
  auto *c_cka = app.add_subcommand("cka", "RBF-kernel CKA of every layer against a reference layer");
  auto *c_params = app.add_subcommand("params", "closed-form parameter count of a probe");
  auto *c_seed = app.add_subcommand("seedstudy", "retrain under several seeds and report the spread");

  synth.add(c_synth);
  train.add(c_train);
  grid.add(c_grid);
  eval.add(c_eval);
  heatmap.add(c_heat);
  cka.add(c_cka);
  params.add(c_params);
  seedstudy.add(c_seed);

  std::vector<const char *> argv{"layerfuse"};
  for (const auto &a : args)
    argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (c_synth->parsed())
      return synth.run(out);
    if (c_train->parsed())
      return train.run(out, args);
    if (c_grid->parsed())
      return grid.run(out, args);
    if (c_eval->parsed())
      return eval.run(out, args);
    if (c_heat->parsed())
      return heatmap.run(out, args);
    if (c_cka->parsed())
      return cka.run(out, args);
    if (c_params->parsed())
      return params.run(out, args);
    if (c_seed->parsed())
      return seedstudy.run(out, args);
  } catch (const ConfigError &e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FormatError &e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DivergenceError &e) {
    err << "training diverged: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception &e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  err << "error: no subcommand\n";
  return kExitConfig;
}

} // namespace layerfuse::cli
