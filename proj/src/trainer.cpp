// SPDX-License-Identifier: Apache-2.0
#include "layerfuse/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

#include "layerfuse/checkpoint.hpp"

namespace layerfuse::trainer {

using nlohmann::json;
using probes::Probe;
using probes::ProbeConfig;

Schedule resolve_schedule(std::size_t n_train, int requested_batch, int requested_epochs) {
  if (n_train < static_cast<std::size_t>(kMinBatchesPerEpoch))
    throw ConfigError("need at least " + std::to_string(kMinBatchesPerEpoch) +
                      " training samples, got " + std::to_string(n_train));
  if (requested_batch < 1 || requested_epochs < 1)
    throw ConfigError("requested batch size and epochs must be positive");
  const auto cap = static_cast<std::size_t>(std::min(requested_batch, kDefaultBatch));
  const auto batch = std::max<std::size_t>(1, std::min(cap, n_train / kMinBatchesPerEpoch));
  const auto per_epoch = (n_train + batch - 1) / batch;
  const auto min_epochs = (static_cast<std::size_t>(kMinSteps) + per_epoch - 1) / per_epoch;
  const auto epochs = std::max<std::size_t>(static_cast<std::size_t>(requested_epochs), min_epochs);
  return {static_cast<int>(batch), static_cast<int>(per_epoch), static_cast<int>(epochs),
          static_cast<std::int64_t>(epochs * per_epoch)};
}

TrainPlan make_plan(std::size_t n_train, double lr, double weight_decay, double dropout,
                    std::uint64_t seed, int requested_batch, int requested_epochs) {
  if (lr < 0.0 || weight_decay < 0.0)
    throw ConfigError("learning rate and weight decay must be non-negative");
  if (!(dropout >= 0.0 && dropout < 1.0))
    throw ConfigError("attention dropout must lie in [0, 1)");
  const auto s = resolve_schedule(n_train, requested_batch, requested_epochs);
  TrainPlan plan;
  plan.lr_max = lr;
  plan.weight_decay = weight_decay;
  plan.attn_dropout = dropout;
  plan.epochs = s.epochs;
  plan.batch_size = s.batch_size;
  plan.total_steps = s.total_steps;
  plan.seed = seed;
  return plan;
}

json plan_to_json(const TrainPlan &plan) {
  return {{"lr_max", plan.lr_max},
          {"weight_decay", plan.weight_decay},
          {"attn_dropout", plan.attn_dropout},
          {"epochs", plan.epochs},
          {"batch_size", plan.batch_size},
          {"total_steps", plan.total_steps},
          {"grad_clip", plan.grad_clip},
          {"jitter_sigma", plan.jitter_sigma},
          {"jitter_prob", plan.jitter_prob},
          {"seed", plan.seed}};
}

TrainPlan plan_from_json(const json &j) {
  TrainPlan plan;
  plan.lr_max = j.at("lr_max").get<double>();
  plan.weight_decay = j.at("weight_decay").get<double>();
  plan.attn_dropout = j.at("attn_dropout").get<double>();
  plan.epochs = j.at("epochs").get<int>();
  plan.batch_size = j.at("batch_size").get<int>();
  plan.total_steps = j.at("total_steps").get<std::int64_t>();
  plan.grad_clip = j.at("grad_clip").get<double>();
  plan.jitter_sigma = j.at("jitter_sigma").get<double>();
  plan.jitter_prob = j.at("jitter_prob").get<double>();
  plan.seed = j.at("seed").get<std::uint64_t>();
  return plan;
}

namespace {

std::vector<std::size_t> resolve_indices(const store::FeatureStore &store, const IndexedSplit &s) {
  if (!s.indices.empty())
    return s.indices;
  std::vector<std::size_t> all(store.split_size(s.split));
  for (std::size_t i = 0; i < all.size(); ++i)
    all[i] = i;
  return all;
}

std::vector<std::int32_t> labels_of(const store::FeatureStore &store, const std::string &split,
                                    const std::vector<std::size_t> &indices) {
  const auto &all = store.labels.at(split);
  std::vector<std::int32_t> out;
  out.reserve(indices.size());
  for (auto i : indices)
    out.push_back(all.at(i));
  return out;
}

store::StackedBatch gather(const store::StackedBatch &full, std::span<const std::size_t> positions) {
  const auto R = full.num_rows(), d = full.width();
  store::StackedBatch out;
  out.h = Tensor({positions.size(), R, d});
  out.rows = full.rows;
  out.labels.reserve(positions.size());
  for (std::size_t b = 0; b < positions.size(); ++b) {
    const auto src = positions[b];
    std::copy_n(&full.h.at(src, 0, 0), R * d, &out.h.at(b, 0, 0));
    out.labels.push_back(full.labels[src]);
  }
  return out;
}

std::int32_t argmax_row(const Tensor &logits, std::size_t i) {
  const auto K = logits.dim(1);
  const double *row = logits.data() + i * K;
  return static_cast<std::int32_t>(std::max_element(row, row + K) - row);
}

ProbeConfig ensure_resolved(ProbeConfig cfg, const store::StoreMeta &meta) {
  if (cfg.num_rows > 0 && cfg.d_model > 0 && !cfg.layer_indices.empty())
    return cfg;
  return probes::resolve_config(std::move(cfg), meta);
}

double elapsed(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

} // namespace

TrainResult train(const ProbeConfig &cfg_in, const TrainPlan &plan,
                  const store::FeatureStore &store, const SplitSpec &split) {
  const auto start = std::chrono::steady_clock::now();
  ProbeConfig cfg = ensure_resolved(cfg_in, store.meta);
  cfg.attn_dropout = plan.attn_dropout;
  probes::check_store_compatible(cfg, store, split.train.split);

  const auto train_idx = resolve_indices(store, split.train);
  const auto n = train_idx.size();
  if (plan.batch_size < 1 || plan.epochs < 1)
    throw ConfigError("training plan has no steps");
  const auto batch_size = static_cast<std::size_t>(plan.batch_size);
  const auto per_epoch = (n + batch_size - 1) / batch_size;
  if (static_cast<std::int64_t>(per_epoch) * plan.epochs != plan.total_steps)
    throw ConfigError("training plan was resolved for a different training-set size (" +
                      std::to_string(plan.total_steps) + " planned steps vs " +
                      std::to_string(per_epoch * static_cast<std::size_t>(plan.epochs)) + ")");

  const auto train_labels = labels_of(store, split.train.split, train_idx);
  const auto weights = core::compute_class_weights(train_labels, cfg.num_classes);
  const auto full = store::assemble_batch(store, split.train.split, train_idx, cfg.layer_indices,
                                          cfg.tokens);

  const RngStream root(plan.seed, "train");
  RngStream init_rng = root.fork("init");
  RngStream shuffle_rng = root.fork("shuffle");
  RngStream jitter_rng = root.fork("jitter");
  RngStream dropout_rng = root.fork("dropout");

  TrainResult result{probes::init_probe(cfg, init_rng), {}};
  Probe &probe = result.probe;
  auto params = probes::parameters(probe);
  auto opt = core::make_opt_state(params, {0.9, 0.999, 1e-8, plan.weight_decay});

  std::vector<std::size_t> order(n);
  std::int64_t step = 0;
  std::vector<std::int32_t> epoch_preds, epoch_labels;
  for (int epoch = 0; epoch < plan.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i)
      order[i] = i;
    shuffle_rng.shuffle(std::span(order));
    double loss_sum = 0.0;
    epoch_preds.clear();
    epoch_labels.clear();
    for (std::size_t begin = 0; begin < n; begin += batch_size) {
      const auto end = std::min(n, begin + batch_size);
      auto batch = gather(full, std::span(order).subspan(begin, end - begin));
      core::apply_jitter(batch.h, plan.jitter_sigma, plan.jitter_prob, jitter_rng, true);
      const auto fwd = probes::probe_forward(probe, batch, true, dropout_rng);
      const auto loss = core::weighted_ce(fwd.logits, batch.labels, weights);
      if (!std::isfinite(loss.loss))
        throw DivergenceError("non-finite loss at step " + std::to_string(step) + " (epoch " +
                              std::to_string(epoch) + ") for " + cfg.label() + " with " +
                              probes::config_to_json(cfg).dump() + " and plan " +
                              plan_to_json(plan).dump());
      Probe grads = probes::probe_backward(probe, fwd, loss.d_logits);
      auto grad_refs = probes::parameters(grads);
      std::vector<Tensor *> grad_ptrs;
      for (auto &g : grad_refs)
        grad_ptrs.push_back(g.tensor);
      core::clip_global_norm(grad_ptrs, plan.grad_clip);
      const std::vector<const Tensor *> grad_view(grad_ptrs.begin(), grad_ptrs.end());
      core::adamw_step(params, grad_view, opt, core::cosine_lr(step, plan.total_steps, plan.lr_max));
      ++step;

      loss_sum += loss.loss * static_cast<double>(end - begin);
      for (std::size_t i = 0; i < end - begin; ++i) {
        epoch_preds.push_back(argmax_row(fwd.logits, i));
        epoch_labels.push_back(batch.labels[i]);
      }
    }
    EpochRecord rec{loss_sum / static_cast<double>(n),
                    analysis::mean_present_recall(epoch_preds, epoch_labels, cfg.num_classes),
                    std::nullopt};
    if (split.val) {
      const auto val = evaluate(probe, store, *split.val);
      rec.val_bal_acc = val.bal_acc;
    }
    result.history.epochs.push_back(rec);
  }
  result.history.seconds = elapsed(start);
  return result;
}

Evaluation evaluate(const Probe &probe, const store::FeatureStore &store, const IndexedSplit &split,
                    analysis::HeatmapAccumulator *heatmap, std::size_t batch_size) {
  const auto &cfg = probe.config;
  probes::check_store_compatible(cfg, store, split.split);
  const auto idx = resolve_indices(store, split);
  RngStream unused(0, "eval");
  Evaluation ev;
  ev.preds.reserve(idx.size());
  for (std::size_t begin = 0; begin < idx.size(); begin += batch_size) {
    const auto end = std::min(idx.size(), begin + batch_size);
    const auto batch = store::assemble_batch(store, split.split,
                                             std::span(idx).subspan(begin, end - begin),
                                             cfg.layer_indices, cfg.tokens);
    const auto fwd = probes::probe_forward(probe, batch, false, unused);
    for (std::size_t i = 0; i < end - begin; ++i) {
      ev.preds.push_back(argmax_row(fwd.logits, i));
      ev.labels.push_back(batch.labels[i]);
    }
    if (heatmap && !fwd.attn.empty())
      heatmap->add(fwd.attn);
  }
  ev.bal_acc = ev.labels.empty()
                   ? 0.0
                   : analysis::mean_present_recall(ev.preds, ev.labels, cfg.num_classes);
  return ev;
}

std::vector<GridCell> grid_cells(const ProbeConfig &cfg, const GridSpace &space) {
  const std::vector<double> wds =
      cfg.pinned_weight_decay ? std::vector<double>{*cfg.pinned_weight_decay} : space.weight_decays;
  const std::vector<double> dropouts =
      probes::is_attentive(cfg.kind) ? space.dropouts : std::vector<double>{0.0};
  std::vector<GridCell> cells;
  for (double lr : space.learning_rates)
    for (double p : dropouts)
      for (double wd : wds)
        cells.push_back(GridCell{.lr = lr, .weight_decay = wd, .dropout = p});
  return cells;
}

bool ranks_before(const GridCell &a, const GridCell &b) {
  if (a.valid != b.valid)
    return a.valid;
  if (a.valid && a.val_bal_acc != b.val_bal_acc)
    return a.val_bal_acc > b.val_bal_acc;
  if (a.weight_decay != b.weight_decay)
    return a.weight_decay < b.weight_decay;
  if (a.lr != b.lr)
    return a.lr < b.lr;
  return a.dropout < b.dropout;
}

void parallel_for(std::size_t count, int workers, const std::function<void(std::size_t)> &job) {
  const auto threads = static_cast<std::size_t>(std::max(1, workers));
  if (threads == 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i)
      job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(threads, count); ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure)
            failure = std::current_exception();
        }
      }
    });
  }
  for (auto &th : pool)
    th.join();
  if (failure)
    std::rethrow_exception(failure);
}

GridResult grid_search(const ProbeConfig &cfg_in, const GridSpace &space,
                       const store::FeatureStore &store, std::uint64_t seed,
                       const std::string &train_split, int workers, int requested_batch,
                       int requested_epochs) {
  const ProbeConfig cfg = ensure_resolved(cfg_in, store.meta);
  GridResult result;
  result.split = store::stratified_split(store.labels.at(train_split), 0.2, seed);
  const SplitSpec spec{{train_split, result.split.train}, IndexedSplit{train_split, result.split.val}};

  auto cells = grid_cells(cfg, space);
  std::vector<std::optional<TrainResult>> runs(cells.size());
  std::vector<TrainPlan> plans(cells.size());
  parallel_for(cells.size(), workers, [&](std::size_t i) {
    auto &cell = cells[i];
    const auto start = std::chrono::steady_clock::now();
    try {
      plans[i] = make_plan(result.split.train.size(), cell.lr, cell.weight_decay, cell.dropout,
                           seed, requested_batch, requested_epochs);
      runs[i] = train(cfg, plans[i], store, spec);
      const auto &last = runs[i]->history.epochs.back();
      cell.val_bal_acc = last.val_bal_acc.value_or(0.0);
      cell.train_bal_acc = last.train_bal_acc;
      cell.steps = plans[i].total_steps;
    } catch (const std::exception &e) {
      cell.valid = false;
      cell.error = e.what();
    }
    cell.seconds = elapsed(start);
  });

  std::vector<std::size_t> order(cells.size());
  for (std::size_t i = 0; i < order.size(); ++i)
    order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return ranks_before(cells[a], cells[b]); });
  for (auto i : order)
    result.cells.push_back(cells[i]);
  result.winner = 0;
  const auto best = order.front();
  if (!cells[best].valid)
    throw Error("grid search: every cell failed; first error: " + cells[best].error);
  result.best_probe = std::move(runs[best]->probe);
  result.best_history = std::move(runs[best]->history);
  result.best_plan = plans[best];
  return result;
}

SeedStudy seed_study(const ProbeConfig &cfg, const TrainPlan &plan,
                     const store::FeatureStore &store, const SplitSpec &split,
                     const IndexedSplit &test, const std::vector<std::uint64_t> &seeds,
                     int workers) {
  if (seeds.size() < 2)
    throw ConfigError("seed study needs at least two seeds");
  SeedStudy study;
  study.seeds = seeds;
  study.test_bal_acc.assign(seeds.size(), 0.0);
  parallel_for(seeds.size(), workers, [&](std::size_t i) {
    TrainPlan p = plan;
    p.seed = seeds[i];
    const auto run = train(cfg, p, store, split);
    const auto ev = evaluate(run.probe, store, test);
    study.test_bal_acc[i] = analysis::balanced_accuracy(ev.preds, ev.labels, cfg.num_classes > 0
                                                                                 ? cfg.num_classes
                                                                                 : store.meta.num_classes);
  });
  double sum = 0.0;
  for (double a : study.test_bal_acc)
    sum += a;
  study.mean = sum / static_cast<double>(seeds.size());
  double sq = 0.0;
  for (double a : study.test_bal_acc)
    sq += (a - study.mean) * (a - study.mean);
  study.stddev = std::sqrt(sq / static_cast<double>(seeds.size() - 1));
  return study;
}

} // namespace layerfuse::trainer
