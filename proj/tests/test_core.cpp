// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "layerfuse/core.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace layerfuse;
using namespace layerfuse::core;

namespace {

oracle::Matrix to_matrix(const Tensor &t) {
  oracle::Matrix m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j)
      m[i][j] = t.at(i, j);
  return m;
}

std::vector<const Tensor *> views(const std::vector<Tensor> &ts) {
  std::vector<const Tensor *> out;
  for (const auto &t : ts)
    out.push_back(&t);
  return out;
}

} // namespace

TEST_SUITE("core") {
  TEST_CASE("linear_forward") {
    Tensor eye({2, 2}, std::vector<double>{1, 0, 0, 1});
    Tensor w({2, 2}, std::vector<double>{1, 2, 3, 4});
    CHECK(linear_forward(eye, w, Tensor({2})) == w);

    RngStream rng(1, "lin");
    const auto x = testing::random_tensor({5, 3}, rng);
    Tensor c({4}, std::vector<double>{1, -2, 3, 0.5});
    const auto out = linear_forward(x, Tensor({3, 4}), c);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 4; ++j)
        CHECK(out.at(i, j) == c[j]);

    const auto a = testing::random_tensor({3, 4}, rng);
    const auto wr = testing::random_tensor({4, 2}, rng);
    const auto br = testing::random_tensor({2}, rng);
    const auto got = linear_forward(a, wr, br);
    const auto want = oracle::affine(to_matrix(a), to_matrix(wr), {br[0], br[1]});
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j)
        CHECK(std::abs(got.at(i, j) - want[i][j]) < 1e-12);

    CHECK_THROWS_AS(linear_forward(a, Tensor({3, 2}), br), ShapeError);
  }

  TEST_CASE("linear_backward matches transposed products") {
    RngStream rng(2, "linb");
    const auto x = testing::random_tensor({4, 3}, rng);
    const auto w = testing::random_tensor({3, 2}, rng);
    const auto g = testing::random_tensor({4, 2}, rng);
    Tensor dw({3, 2}, 1.0), db({2}, 1.0), dx;
    linear_backward(x, w, g, dw, db, &dx);
    const auto dw_want = oracle::matmul(oracle::transpose(to_matrix(x)), to_matrix(g));
    const auto dx_want = oracle::matmul(to_matrix(g), oracle::transpose(to_matrix(w)));
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j)
        CHECK(std::abs(dw.at(i, j) - (1.0 + dw_want[i][j])) < 1e-12);
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 1.0;
      for (std::size_t i = 0; i < 4; ++i)
        s += g.at(i, j);
      CHECK(std::abs(db[j] - s) < 1e-12);
    }
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 3; ++j)
        CHECK(std::abs(dx.at(i, j) - dx_want[i][j]) < 1e-12);
  }

  TEST_CASE("softmax_rows") {
    const auto half = softmax_rows(Tensor({1, 2}));
    CHECK(half.at(0, 0) == 0.5);
    CHECK(half.at(0, 1) == 0.5);
    const auto big = softmax_rows(Tensor({1, 2}, std::vector<double>{1000, 0}));
    CHECK(big.all_finite());
    CHECK(big.at(0, 0) == doctest::Approx(1.0));
    CHECK(big.at(0, 1) < 1e-300);
    RngStream rng(3, "sm");
    for (int t = 0; t < 100; ++t) {
      auto s = testing::random_tensor({3, 1 + rng.below(9)}, rng, 5.0);
      const auto p = softmax_rows(s);
      for (auto &v : s.values())
        v += 7.0;
      const auto shifted = softmax_rows(s);
      CHECK(testing::max_abs_diff(p, shifted) < 1e-12);
      for (std::size_t i = 0; i < 3; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < p.dim(1); ++j)
          sum += p.at(i, j);
        CHECK(std::abs(sum - 1.0) < 1e-12);
      }
    }
  }

  TEST_CASE("attention_forward special cases") {
    RngStream rng(4, "att");
    // One key: weight 1 and output equals the value row.
    const auto q = testing::random_tensor({2, 1, 3}, rng);
    const auto k1 = testing::random_tensor({2, 1, 3}, rng);
    const auto v1 = testing::random_tensor({2, 1, 3}, rng);
    const auto one = attention_forward(q, k1, v1, 0.0, false, rng);
    for (std::size_t b = 0; b < 2; ++b) {
      CHECK(one.attn.at(b, 0) == 1.0);
      for (std::size_t j = 0; j < 3; ++j)
        CHECK(one.out.at(b, 0, j) == v1.at(b, 0, j));
    }
    // Identical keys: uniform weights.
    Tensor keys({1, 5, 3});
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t j = 0; j < 3; ++j)
        keys.at(0, r, j) = 0.1 * static_cast<double>(j + 1);
    const auto vals = testing::random_tensor({1, 5, 3}, rng);
    const auto uni = attention_forward(testing::random_tensor({1, 1, 3}, rng), keys, vals, 0.0, false, rng);
    for (std::size_t r = 0; r < 5; ++r)
      CHECK(std::abs(uni.attn.at(0, r) - 0.2) < 1e-15);
  }

  TEST_CASE("attention output is the hand-evaluated convex combination") {
    // B=1, R=2, dh=3.
    Tensor q({1, 1, 3}, std::vector<double>{1, 0, -1});
    Tensor k({1, 2, 3}, std::vector<double>{1, 2, 3, 0, 1, 0});
    Tensor v({1, 2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
    RngStream rng(0, "unused");
    const auto res = attention_forward(q, k, v, 0.0, false, rng);
    const double s0 = (1 - 3) / std::sqrt(3.0), s1 = 0.0;
    const double a0 = std::exp(s0) / (std::exp(s0) + std::exp(s1));
    const double a1 = 1.0 - a0;
    CHECK(std::abs(res.attn.at(0, 0) - a0) < 1e-12);
    for (std::size_t j = 0; j < 3; ++j)
      CHECK(std::abs(res.out.at(0, 0, j) - (a0 * v.at(0, 0, j) + a1 * v.at(0, 1, j))) < 1e-12);
  }

  TEST_CASE("attention dropout is inverted, seeded and train-only") {
    RngStream src(5, "drop");
    const auto q = testing::random_tensor({64, 1, 4}, src);
    const auto k = testing::random_tensor({64, 6, 4}, src);
    const auto v = testing::random_tensor({64, 6, 4}, src);
    RngStream r1(9, "d"), r2(9, "d"), r3(9, "d");
    const auto a = attention_forward(q, k, v, 0.5, true, r1);
    const auto b = attention_forward(q, k, v, 0.5, true, r2);
    CHECK(a.out == b.out);
    bool saw_zero = false, saw_two = false;
    for (double m : a.cache.keep.values()) {
      CHECK((m == 0.0 || m == 2.0));
      saw_zero |= m == 0.0;
      saw_two |= m == 2.0;
    }
    CHECK(saw_zero);
    CHECK(saw_two);
    const auto eval = attention_forward(q, k, v, 0.5, false, r3);
    CHECK(r3.counter() == RngStream(9, "d").counter());
    CHECK(eval.attn == a.attn); // returned weights are pre-dropout
    const auto eval0 = attention_forward(q, k, v, 0.0, false, r3);
    CHECK(eval.out == eval0.out);
  }

  TEST_CASE("attention_backward") {
    RngStream rng(6, "attb");
    const auto q = testing::random_tensor({2, 1, 4}, rng);
    const auto k = testing::random_tensor({2, 5, 4}, rng);
    const auto v = testing::random_tensor({2, 5, 4}, rng);
    const auto g = testing::random_tensor({2, 1, 4}, rng);
    RngStream none(0, "none");
    const auto fwd = attention_forward(q, k, v, 0.0, false, none);
    const auto grads = attention_backward(fwd.cache, g);

    Tensor qq = q, kk = k, vv = v;
    auto loss = [&] {
      RngStream r(0, "none");
      const auto o = attention_forward(qq, kk, vv, 0.0, false, r);
      double s = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i)
        s += g[i] * o.out[i];
      return s;
    };
    std::vector<ParamRef> params{{"q", &qq}, {"k", &kk}, {"v", &vv}};
    std::vector<const Tensor *> analytic{&grads.dq, &grads.dk, &grads.dv};
    CHECK(finite_difference_check(loss, params, analytic) < 1e-6);

    const auto zero = attention_backward(fwd.cache, Tensor({2, 1, 4}));
    for (const auto *t : {&zero.dq, &zero.dk, &zero.dv})
      for (double x : t->values())
        CHECK(x == 0.0);

    const auto k1 = testing::random_tensor({2, 1, 4}, rng);
    const auto v1 = testing::random_tensor({2, 1, 4}, rng);
    const auto single = attention_forward(q, k1, v1, 0.0, false, none);
    const auto g1 = attention_backward(single.cache, g);
    CHECK(g1.dv == g);
    for (double x : g1.dq.values())
      CHECK(x == 0.0);
    for (double x : g1.dk.values())
      CHECK(x == 0.0);

    CHECK_THROWS_AS(attention_backward(AttentionCache{}, g), Error);
  }

  TEST_CASE("standardize forward/backward") {
    RngStream rng(7, "std");
    const auto x = testing::random_tensor({3, 6}, rng);
    const auto gain = testing::random_tensor({6}, rng);
    const auto bias = testing::random_tensor({6}, rng);
    StandardizeCache cache;
    const auto y = standardize_forward(x, gain, bias, cache);
    for (std::size_t i = 0; i < 3; ++i) {
      double mean = 0.0, var = 0.0;
      for (std::size_t j = 0; j < 6; ++j)
        mean += x.at(i, j);
      mean /= 6;
      for (std::size_t j = 0; j < 6; ++j)
        var += (x.at(i, j) - mean) * (x.at(i, j) - mean);
      const double sd = std::sqrt(var / 6);
      for (std::size_t j = 0; j < 6; ++j)
        CHECK(std::abs(y.at(i, j) - (gain[j] * (x.at(i, j) - mean) / (sd + 1e-6) + bias[j])) < 1e-12);
    }
    const auto g = testing::random_tensor({3, 6}, rng);
    Tensor dg({6}), db({6});
    const auto dx = standardize_backward(cache, gain, g, dg, db);
    Tensor xx = x, gg = gain, bb = bias;
    auto loss = [&] {
      StandardizeCache c;
      const auto o = standardize_forward(xx, gg, bb, c);
      double s = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i)
        s += g[i] * o[i];
      return s;
    };
    std::vector<ParamRef> params{{"x", &xx}, {"gain", &gg}, {"bias", &bb}};
    std::vector<const Tensor *> analytic{&dx, &dg, &db};
    CHECK(finite_difference_check(loss, params, analytic) < 1e-6);

    // Constant rows: output is the bias, gradient stays finite.
    Tensor flat({1, 4}, 3.0);
    StandardizeCache fc;
    const auto yf = standardize_forward(flat, Tensor({4}, 1.0), Tensor({4}, 0.25), fc);
    for (double v : yf.values())
      CHECK(v == 0.25);
    Tensor dg2({4}), db2({4});
    CHECK(standardize_backward(fc, Tensor({4}, 1.0), Tensor({1, 4}, 1.0), dg2, db2).all_finite());
  }

  TEST_CASE("weighted_ce") {
    const std::vector<double> w{2.0, 1.0};
    const auto hand = weighted_ce(Tensor({1, 2}), std::vector<std::int32_t>{0}, w);
    CHECK(std::abs(hand.loss - 2.0 * std::log(2.0)) < 1e-12);

    RngStream rng(8, "ce");
    for (int t = 0; t < 20; ++t) {
      const std::size_t B = 1 + rng.below(10), K = 2 + rng.below(5);
      const auto logits = testing::random_tensor({B, K}, rng, 3.0);
      std::vector<std::int32_t> labels(B);
      for (auto &y : labels)
        y = static_cast<std::int32_t>(rng.below(K));
      const auto res = weighted_ce(logits, labels, std::vector<double>(K, 1.0));
      CHECK(std::abs(res.loss - oracle::plain_cross_entropy(
                                    [&] {
                                      oracle::Matrix m(B, std::vector<double>(K));
                                      for (std::size_t i = 0; i < B; ++i)
                                        for (std::size_t j = 0; j < K; ++j)
                                          m[i][j] = logits.at(i, j);
                                      return m;
                                    }(),
                                    labels)) < 1e-12);
      std::vector<double> cw(K);
      for (auto &c : cw)
        c = 0.1 + rng.uniform();
      const auto wres = weighted_ce(logits, labels, cw);
      Tensor z = logits;
      auto loss = [&] { return weighted_ce(z, labels, cw).loss; };
      std::vector<ParamRef> params{{"logits", &z}};
      std::vector<const Tensor *> analytic{&wres.d_logits};
      CHECK(finite_difference_check(loss, params, analytic) < 1e-6);
    }

    const auto confident = weighted_ce(Tensor({1, 2}, std::vector<double>{60, -60}),
                                       std::vector<std::int32_t>{0}, std::vector<double>{1, 1});
    CHECK(confident.loss < 1e-40);
    CHECK_THROWS_AS(weighted_ce(Tensor({1, 2}), std::vector<std::int32_t>{2}, w), Error);
  }

  TEST_CASE("compute_class_weights") {
    CHECK(compute_class_weights(std::vector<std::int32_t>{0, 1, 0, 1, 0, 1, 0, 1, 0, 1}, 2) ==
          std::vector<double>{1.0, 1.0});
    std::vector<std::int32_t> skew(9, 0);
    skew.push_back(1);
    const auto w = compute_class_weights(skew, 2);
    CHECK(std::abs(w[0] - 10.0 / 18.0) < 1e-15);
    CHECK(std::abs(w[1] - 5.0) < 1e-15);
    CHECK_THROWS_AS(compute_class_weights(std::vector<std::int32_t>{0, 0}, 2), ConfigError);

    RngStream rng(10, "cw");
    for (int t = 0; t < 100; ++t) {
      const int K = 2 + static_cast<int>(rng.below(8));
      std::vector<std::int32_t> labels;
      for (int c = 0; c < K; ++c)
        labels.push_back(c);
      const auto extra = rng.below(200);
      for (std::uint64_t i = 0; i < extra; ++i)
        labels.push_back(static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(K))));
      const auto cw = compute_class_weights(labels, K);
      std::vector<double> n(static_cast<std::size_t>(K), 0.0);
      for (auto y : labels)
        n[static_cast<std::size_t>(y)] += 1.0;
      double s = 0.0;
      for (int c = 0; c < K; ++c)
        s += cw[static_cast<std::size_t>(c)] * n[static_cast<std::size_t>(c)];
      CHECK(std::abs(s - static_cast<double>(labels.size())) < 1e-9);
    }
  }

  TEST_CASE("adamw_step") {
    Tensor theta({3}, std::vector<double>{1.0, -2.0, 0.5});
    const Tensor start = theta;
    std::vector<ParamRef> params{{"theta", &theta}};
    Tensor zero({3});
    std::vector<const Tensor *> grads{&zero};

    auto frozen = make_opt_state(params, {0.9, 0.999, 1e-8, 0.0});
    for (int i = 0; i < 5; ++i)
      adamw_step(params, grads, frozen, 0.1);
    CHECK(theta == start);

    auto decay = make_opt_state(params, {0.9, 0.999, 1e-8, 0.1});
    adamw_step(params, grads, decay, 0.01);
    for (std::size_t i = 0; i < 3; ++i)
      CHECK(theta[i] == start[i] * (1.0 - 0.01 * 0.1));

    Tensor scalar({1}, std::vector<double>{0.7});
    std::vector<ParamRef> sp{{"s", &scalar}};
    Tensor g({1}, std::vector<double>{-0.3});
    std::vector<const Tensor *> sg{&g};
    auto raw = make_opt_state(sp, {0.0, 0.0, 0.0, 0.0});
    adamw_step(sp, sg, raw, 0.05);
    CHECK(std::abs(scalar[0] - (0.7 + 0.05)) < 1e-15);

    Tensor bad({3}, std::vector<double>{0, NAN, 0});
    std::vector<const Tensor *> bg{&bad};
    CHECK_THROWS_WITH_AS(adamw_step(params, bg, decay, 0.01), doctest::Contains("theta"), NumericError);
  }

  TEST_CASE("adamw matches a scalar reference over several steps") {
    Tensor theta({1}, std::vector<double>{0.4});
    std::vector<ParamRef> params{{"t", &theta}};
    auto state = make_opt_state(params, {0.9, 0.999, 1e-8, 0.01});
    double ref = 0.4, m = 0.0, v = 0.0;
    for (int t = 1; t <= 10; ++t) {
      const double gval = std::sin(t) * 0.5;
      Tensor g({1}, std::vector<double>{gval});
      std::vector<const Tensor *> grads{&g};
      const double lr = 0.003 * t;
      adamw_step(params, grads, state, lr);
      m = 0.9 * m + 0.1 * gval;
      v = 0.999 * v + 0.001 * gval * gval;
      const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
      ref -= lr * (mh / (std::sqrt(vh) + 1e-8) + 0.01 * ref);
      CHECK(std::abs(theta[0] - ref) < 1e-14);
    }
  }

  TEST_CASE("cosine_lr") {
    CHECK(cosine_lr(0, 1000, 0.01) == 0.01);
    CHECK(cosine_lr(1000, 1000, 0.01) == 0.0);
    CHECK(std::abs(cosine_lr(500, 1000, 0.01) - 0.005) < 1e-15);
    double prev = 1.0;
    for (int s = 0; s <= 777; ++s) {
      const double lr = cosine_lr(s, 777, 0.1);
      CHECK(lr <= prev);
      CHECK(lr >= 0.0);
      prev = lr;
    }
  }

  TEST_CASE("global norm clipping") {
    std::vector<Tensor> g{Tensor({2}, std::vector<double>{0.0, 2.0})};
    std::vector<Tensor *> ptrs{&g[0]};
    CHECK(clip_global_norm(ptrs, 5.0) == 1.0);
    CHECK(g[0][1] == 2.0);

    std::vector<Tensor> big{Tensor({2}, std::vector<double>{6.0, 0.0}),
                            Tensor({1, 1}, std::vector<double>{8.0})};
    std::vector<Tensor *> bp{&big[0], &big[1]};
    CHECK(clip_global_norm(bp, 5.0) == doctest::Approx(0.5));
    CHECK(global_norm(views(big)) == doctest::Approx(5.0).epsilon(1e-15));

    RngStream rng(11, "clip");
    std::vector<Tensor> parts{testing::random_tensor({3, 4}, rng), testing::random_tensor({7}, rng),
                              testing::random_tensor({2, 2, 2}, rng)};
    double flat = 0.0;
    for (const auto &p : parts)
      for (double x : p.values())
        flat += x * x;
    CHECK(std::abs(global_norm(views(parts)) - std::sqrt(flat)) < 1e-12);
  }

  TEST_CASE("apply_jitter") {
    RngStream rng(12, "jit");
    const auto h = testing::random_tensor({4, 3, 5}, rng);
    Tensor a = h;
    apply_jitter(a, 0.05, 1.0, rng, false);
    CHECK(a == h);
    apply_jitter(a, 0.0, 1.0, rng, true);
    CHECK(a == h);

    // Monte-Carlo moments over 10^6 entries.
    Tensor big({1000, 1, 1000});
    apply_jitter(big, 0.05, 1.0, rng, true);
    double s = 0.0, s2 = 0.0;
    for (double x : big.values()) {
      s += x;
      s2 += x * x;
    }
    const double n = 1e6, mean = s / n, sd = std::sqrt(s2 / n - mean * mean);
    CHECK(std::abs(mean) < 3.0 * 0.05 / 1e3);
    CHECK(std::abs(sd - 0.05) < 0.001);

    // prob = 0 never fires; prob = 0.5 fires on roughly half the calls, all-or-nothing.
    Tensor c = h;
    apply_jitter(c, 0.05, 0.0, rng, true);
    CHECK(c == h);
    int fired = 0;
    for (int t = 0; t < 400; ++t) {
      Tensor d = h;
      apply_jitter(d, 0.05, 0.5, rng, true);
      std::size_t changed = 0;
      for (std::size_t i = 0; i < d.size(); ++i)
        changed += d[i] != h[i];
      CHECK((changed == 0 || changed == d.size()));
      fired += changed > 0;
    }
    CHECK(std::abs(fired - 200) < 40);
  }

  TEST_CASE("finite_difference_check on a quadratic") {
    RngStream rng(13, "fd");
    Tensor theta({5, 5});
    for (auto &x : theta.values())
      x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * (0.5 + rng.uniform());
    std::vector<ParamRef> params{{"theta", &theta}};
    auto loss = [&] {
      double s = 0.0;
      for (double x : theta.values())
        s += x * x;
      return s;
    };
    Tensor grad = theta;
    for (auto &x : grad.values())
      x *= 2.0;
    std::vector<const Tensor *> analytic{&grad};
    CHECK(finite_difference_check(loss, params, analytic) < 1e-9);
    grad[3] += 0.1;
    CHECK(finite_difference_check(loss, params, analytic) > 1e-3);
    Tensor wrong({4});
    std::vector<const Tensor *> bad{&wrong};
    CHECK_THROWS_AS(finite_difference_check(loss, params, bad), ShapeError);
  }
}
