// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "layerfuse/analysis.hpp"
#include "layerfuse/probes.hpp"
#include "layerfuse/reprstore.hpp"

namespace layerfuse::trainer {

inline constexpr int kDefaultBatch = 2048;
inline constexpr int kDefaultEpochs = 40;
inline constexpr int kMinBatchesPerEpoch = 5;
inline constexpr int kMinSteps = 1000;
inline constexpr double kGradClip = 5.0;
inline constexpr double kJitterSigma = 0.05;
inline constexpr double kJitterProb = 0.5;

struct Schedule {
  int batch_size;
  int batches_per_epoch;
  int epochs;
  std::int64_t total_steps;
};

/// batch = min(requested, floor(N/5)) (>= 1); epochs raised until >= 1000 steps.
Schedule resolve_schedule(std::size_t n_train, int requested_batch = kDefaultBatch,
                          int requested_epochs = kDefaultEpochs);

struct TrainPlan {
  double lr_max = 0.01;
  double weight_decay = 1e-4;
  double attn_dropout = 0.0;
  int epochs = kDefaultEpochs;
  int batch_size = kDefaultBatch;
  std::int64_t total_steps = kMinSteps;
  double grad_clip = kGradClip;
  double jitter_sigma = kJitterSigma;
  double jitter_prob = kJitterProb;
  std::uint64_t seed = 0;
};

/// Plan with the schedule resolved for `n_train` samples.
TrainPlan make_plan(std::size_t n_train, double lr, double weight_decay, double dropout,
                    std::uint64_t seed, int requested_batch = kDefaultBatch,
                    int requested_epochs = kDefaultEpochs);

nlohmann::json plan_to_json(const TrainPlan &plan);
TrainPlan plan_from_json(const nlohmann::json &j);

struct IndexedSplit {
  std::string split;
  std::vector<std::size_t> indices; // empty = whole split
};

struct SplitSpec {
  IndexedSplit train{"train", {}};
  std::optional<IndexedSplit> val;
};

struct EpochRecord {
  double train_loss;    // mean weighted loss over the epoch (train mode)
  double train_bal_acc; // running predictions in train mode
  std::optional<double> val_bal_acc;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  double seconds = 0.0;
};

struct TrainResult {
  probes::Probe probe;
  TrainHistory history;
};

/// Full training run: seeded shuffling, jitter, attention dropout, weighted
/// cross-entropy, clipping at 5.0 and AdamW under a cosine schedule. Returns the
/// last-epoch probe. Throws DivergenceError on a non-finite loss.
TrainResult train(const probes::ProbeConfig &cfg, const TrainPlan &plan,
                  const store::FeatureStore &store, const SplitSpec &split);

struct Evaluation {
  std::vector<std::int32_t> preds;
  std::vector<std::int32_t> labels;
  double bal_acc = 0.0;
};

/// Eval-mode pass over a split (no dropout, no jitter). When `heatmap` is
/// given, eval attention is accumulated into it.
Evaluation evaluate(const probes::Probe &probe, const store::FeatureStore &store,
                    const IndexedSplit &split, analysis::HeatmapAccumulator *heatmap = nullptr,
                    std::size_t batch_size = 1024);

struct GridSpace {
  std::vector<double> learning_rates{0.1, 0.01, 0.001};
  std::vector<double> dropouts{0.0, 0.1, 0.3};
  std::vector<double> weight_decays{1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 0.1, 1.0};
};

struct GridCell {
  double lr = 0.0;
  double weight_decay = 0.0;
  double dropout = 0.0;
  bool valid = true;
  std::string error = {};
  double val_bal_acc = 0.0;
  double train_bal_acc = 0.0;
  std::int64_t steps = 0;
  double seconds = 0.0;
};

struct GridResult {
  std::vector<GridCell> cells; // ranked, best first
  std::size_t winner = 0;
  probes::Probe best_probe;
  TrainPlan best_plan;
  TrainHistory best_history;
  store::SplitIndices split;
};

/// Cells the search will run for this config: AAT pins weight decay, linear
/// probes have no attention dropout to vary.
std::vector<GridCell> grid_cells(const probes::ProbeConfig &cfg, const GridSpace &space);

/// Strict ranking used by the search: higher validation score first, then
/// lower weight decay, lower lr, lower dropout.
bool ranks_before(const GridCell &a, const GridCell &b);

/// Trains every cell on a stratified 80% of `train_split` and selects by
/// validation balanced accuracy on the remaining 20%. The winner is not retrained.
GridResult grid_search(const probes::ProbeConfig &cfg, const GridSpace &space,
                       const store::FeatureStore &store, std::uint64_t seed,
                       const std::string &train_split = "train", int workers = 1,
                       int requested_batch = kDefaultBatch, int requested_epochs = kDefaultEpochs);

struct SeedStudy {
  std::vector<std::uint64_t> seeds;
  std::vector<double> test_bal_acc;
  double mean = 0.0;
  double stddev = 0.0; // sample standard deviation
};

SeedStudy seed_study(const probes::ProbeConfig &cfg, const TrainPlan &plan,
                     const store::FeatureStore &store, const SplitSpec &split,
                     const IndexedSplit &test, const std::vector<std::uint64_t> &seeds,
                     int workers = 1);

/// Runs `count` independent jobs on up to `workers` threads.
void parallel_for(std::size_t count, int workers, const std::function<void(std::size_t)> &job);

} // namespace layerfuse::trainer
