// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <atomic>
#include <cmath>

#include "layerfuse/synthgen.hpp"
#include "layerfuse/trainer.hpp"

using namespace layerfuse;
using namespace layerfuse::trainer;
using probes::ProbeKind;

namespace {

store::FeatureStore small_store(std::uint64_t seed = 1, std::size_t n_train = 60) {
  synth::SynthSpec spec;
  spec.n_train = n_train;
  spec.n_val = 30;
  spec.n_test = 30;
  spec.num_layers = 2;
  spec.dims = {6};
  spec.num_classes = 3;
  spec.noise_std = 0.3;
  spec.seed = seed;
  return synth::generate_separable(spec);
}

probes::ProbeConfig config(ProbeKind kind, const store::FeatureStore &fs, double dropout = 0.0) {
  probes::ProbeConfig c;
  c.kind = kind;
  const bool cls = kind == ProbeKind::LinearCls;
  c.layers = cls ? store::LayerScheme::last() : store::LayerScheme::all();
  c.tokens = {true, !cls, false};
  c.attn_dropout = dropout;
  return probes::resolve_config(c, fs.meta);
}

bool same_params(const probes::Probe &a, const probes::Probe &b) {
  const auto pa = probes::parameters(a), pb = probes::parameters(b);
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (!(*pa[i].tensor == *pb[i].tensor))
      return false;
  return true;
}

} // namespace

TEST_SUITE("trainer") {
  TEST_CASE("schedule examples") {
    const auto a = resolve_schedule(1000);
    CHECK(a.batch_size == 200);
    CHECK(a.batches_per_epoch == 5);
    CHECK(a.epochs == 200);
    CHECK(a.total_steps == 1000);

    const auto b = resolve_schedule(100000);
    CHECK(b.batch_size == 2048);
    CHECK(b.batches_per_epoch == 49);
    CHECK(b.epochs == 40);
    CHECK(b.total_steps == 1960);

    const auto c = resolve_schedule(10007);
    CHECK(c.batch_size == 2001);
    CHECK(c.batches_per_epoch == 6);
    CHECK(c.epochs == 167);
    CHECK(c.total_steps == 1002);

    CHECK(resolve_schedule(5).batch_size == 1);
    CHECK(resolve_schedule(100000, 4096).batch_size == 2048);
    CHECK(resolve_schedule(100000, 256).batch_size == 256);
    CHECK_THROWS_AS(resolve_schedule(4), ConfigError);
    CHECK_THROWS_AS(resolve_schedule(100, 0), ConfigError);
  }

  TEST_CASE("schedule properties") {
    RngStream rng(2, "sched");
    for (int i = 0; i < 2000; ++i) {
      const auto n = 5 + static_cast<std::size_t>(rng.below(300000));
      const int req_b = 1 + static_cast<int>(rng.below(5000));
      const int req_e = 1 + static_cast<int>(rng.below(100));
      const auto s = resolve_schedule(n, req_b, req_e);
      CAPTURE(n);
      CHECK(s.total_steps >= kMinSteps);
      CHECK(s.batches_per_epoch >= kMinBatchesPerEpoch);
      CHECK(s.batch_size <= std::min(req_b, kDefaultBatch));
      CHECK(s.batch_size >= 1);
      CHECK(s.epochs >= req_e);
      CHECK(s.total_steps == static_cast<std::int64_t>(s.epochs) * s.batches_per_epoch);
      // Minimal: one fewer epoch would either drop below the floor or the request.
      CHECK((s.epochs == req_e || (s.epochs - 1) * s.batches_per_epoch < kMinSteps));
    }
  }

  TEST_CASE("plan validation and json") {
    CHECK_THROWS_AS(make_plan(100, -0.1, 0.0, 0.0, 0), ConfigError);
    CHECK_THROWS_AS(make_plan(100, 0.1, 0.0, 1.0, 0), ConfigError);
    const auto p = make_plan(1000, 0.01, 1e-4, 0.1, 42, 64, 3);
    const auto back = plan_from_json(plan_to_json(p));
    CHECK(back.lr_max == p.lr_max);
    CHECK(back.weight_decay == p.weight_decay);
    CHECK(back.attn_dropout == p.attn_dropout);
    CHECK(back.seed == 42);
    CHECK(back.batch_size == 64);
    CHECK(back.total_steps == p.total_steps);
  }

  TEST_CASE("training is deterministic and learns separable data") {
    const auto fs = small_store();
    const auto cfg = config(ProbeKind::AttentiveFusion, fs, 0.1);
    const auto plan = make_plan(60, 0.01, 1e-4, 0.1, 7);
    const SplitSpec split{{"train", {}}, IndexedSplit{"val", {}}};
    const auto a = train(cfg, plan, fs, split);
    const auto b = train(cfg, plan, fs, split);
    CHECK(same_params(a.probe, b.probe));
    REQUIRE(a.history.epochs.size() == static_cast<std::size_t>(plan.epochs));
    for (std::size_t e = 0; e < a.history.epochs.size(); ++e) {
      CHECK(a.history.epochs[e].train_loss == b.history.epochs[e].train_loss);
      CHECK(a.history.epochs[e].val_bal_acc == b.history.epochs[e].val_bal_acc);
    }
    CHECK(a.history.epochs.back().train_loss < a.history.epochs.front().train_loss);
    CHECK(evaluate(a.probe, fs, {"test", {}}).bal_acc >= 0.9);

    auto other = plan;
    other.seed = 8;
    CHECK_FALSE(same_params(a.probe, train(cfg, other, fs, split).probe));
  }

  TEST_CASE("zero learning rate leaves the initial parameters untouched") {
    const auto fs = small_store();
    const auto cfg = config(ProbeKind::AttentiveFusion, fs, 0.3);
    const SplitSpec split{};
    const auto a = train(cfg, make_plan(60, 0.0, 0.0, 0.3, 5, 2048, 1), fs, split);
    const auto b = train(cfg, make_plan(60, 0.0, 0.5, 0.0, 5, 2048, 1), fs, split);
    CHECK(same_params(a.probe, b.probe));
    CHECK_FALSE(a.history.epochs.back().val_bal_acc.has_value());
    CHECK_FALSE(same_params(a.probe, train(cfg, make_plan(60, 0.01, 0.0, 0.3, 5, 2048, 1), fs, split).probe));
  }

  TEST_CASE("divergence is reported") {
    const auto fs = small_store();
    const auto cfg = config(ProbeKind::LinearConcat, fs);
    CHECK_THROWS_AS(train(cfg, make_plan(60, 1e307, 0.0, 0.0, 1, 2048, 1), fs, {}), DivergenceError);
  }

  TEST_CASE("evaluation ignores dropout and is batch-size invariant") {
    const auto fs = small_store();
    const auto cfg = config(ProbeKind::AttentiveFusion, fs, 0.5);
    RngStream rng(3, "eval");
    auto probe = probes::init_probe(cfg, rng);
    auto no_drop = probe;
    no_drop.config.attn_dropout = 0.0;
    const auto a = evaluate(probe, fs, {"test", {}}, nullptr, 7);
    const auto b = evaluate(no_drop, fs, {"test", {}}, nullptr, 1024);
    CHECK(a.preds == b.preds);
    CHECK(a.bal_acc == b.bal_acc);
    const auto sub = evaluate(probe, fs, {"test", {0, 1, 2, 3, 4, 5}});
    CHECK(sub.labels.size() == 6);

    analysis::HeatmapAccumulator acc(store::row_layout(fs.meta, cfg.layer_indices, cfg.tokens), 2);
    evaluate(probe, fs, {"test", {}}, &acc, 8);
    const auto hm = acc.finish();
    CHECK(hm.samples == 30);
    CHECK(std::abs(hm.total() - 1.0) < 1e-12);
  }

  TEST_CASE("grid cells") {
    const auto fs = small_store();
    const GridSpace space;
    CHECK(grid_cells(config(ProbeKind::AttentiveFusion, fs), space).size() == 63);
    CHECK(grid_cells(config(ProbeKind::LinearConcat, fs), space).size() == 21);
    CHECK(grid_cells(config(ProbeKind::LinearCls, fs), space).size() == 21);
    const auto aat = grid_cells(probes::make_aat_config(12, 16, 8, 3), space);
    CHECK(aat.size() == 9);
    for (const auto &c : aat)
      CHECK(c.weight_decay == 0.1);
  }

  TEST_CASE("ranking prefers validity, score, then smaller wd, lr, dropout") {
    GridCell a{.lr = 0.01, .weight_decay = 1e-4, .dropout = 0.1, .val_bal_acc = 0.8};
    GridCell b = a;
    CHECK_FALSE(ranks_before(a, b));
    b.val_bal_acc = 0.9;
    CHECK(ranks_before(b, a));
    b = a;
    b.weight_decay = 1e-5;
    CHECK(ranks_before(b, a));
    b = a;
    b.lr = 0.001;
    b.weight_decay = 1e-3;
    CHECK(ranks_before(a, b));
    b = a;
    b.lr = 0.001;
    CHECK(ranks_before(b, a));
    b = a;
    b.dropout = 0.0;
    CHECK(ranks_before(b, a));
    b = a;
    b.valid = false;
    b.val_bal_acc = 1.0;
    CHECK(ranks_before(a, b));
  }

  TEST_CASE("grid search selects deterministically and breaks ties") {
    const auto fs = small_store(4, 100);
    const auto cfg = config(ProbeKind::AttentiveFusion, fs);
    GridSpace space{{0.0}, {0.3, 0.0}, {1e-3, 1e-5}};
    // lr = 0 makes every cell identical; the tie-break alone decides.
    const auto r = grid_search(cfg, space, fs, 3, "train", 2, 2048, 1);
    REQUIRE(r.cells.size() == 4);
    CHECK(r.winner == 0);
    CHECK(r.cells[0].weight_decay == 1e-5);
    CHECK(r.cells[0].dropout == 0.0);
    CHECK(r.cells[1].weight_decay == 1e-5);
    CHECK(r.cells[1].dropout == 0.3);
    for (std::size_t i = 1; i < r.cells.size(); ++i)
      CHECK(r.cells[i].val_bal_acc == r.cells[0].val_bal_acc);
    CHECK(r.split.train.size() == 79); // per class round(0.2 * {34, 33, 33}) = 7
    CHECK(r.split.val.size() == 21);
    CHECK(r.best_plan.weight_decay == 1e-5);

    GridSpace real{{0.01, 0.001}, {0.0}, {1e-4}};
    const auto p1 = grid_search(cfg, real, fs, 3, "train", 1, 2048, 1);
    const auto p2 = grid_search(cfg, real, fs, 3, "train", 2, 2048, 1);
    CHECK(same_params(p1.best_probe, p2.best_probe));
    for (std::size_t i = 0; i < 2; ++i)
      CHECK(p1.cells[i].val_bal_acc == p2.cells[i].val_bal_acc);
  }

  TEST_CASE("seed study") {
    const auto fs = small_store();
    const auto cfg = config(ProbeKind::LinearConcat, fs);
    const auto plan = make_plan(60, 0.01, 1e-4, 0.0, 0, 2048, 1);
    const auto same = seed_study(cfg, plan, fs, {}, {"test", {}}, {5, 5, 5}, 2);
    CHECK(same.stddev == 0.0);
    CHECK(same.test_bal_acc.size() == 3);
    const auto varied = seed_study(cfg, plan, fs, {}, {"test", {}}, {1, 2, 3, 4}, 3);
    double mean = 0.0;
    for (double v : varied.test_bal_acc)
      mean += v / 4.0;
    double ss = 0.0;
    for (double v : varied.test_bal_acc)
      ss += (v - mean) * (v - mean);
    CHECK(varied.mean == doctest::Approx(mean).epsilon(1e-14));
    CHECK(varied.stddev == doctest::Approx(std::sqrt(ss / 3.0)).epsilon(1e-12));
  }

  TEST_CASE("parallel_for runs every job once") {
    std::vector<std::atomic<int>> hits(37);
    parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i]++; });
    for (auto &h : hits)
      CHECK(h.load() == 1);
    CHECK_THROWS_AS(parallel_for(3, 2, [](std::size_t i) {
                      if (i == 1)
                        throw ConfigError("boom");
                    }),
                    ConfigError);
  }
}
