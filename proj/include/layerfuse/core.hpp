// SPDX-License-Identifier: Apache-2.0
//
// Dense forward/backward kernels for the probe graphs, the optimizer and the
// training-time regularizers. All arithmetic is in double precision.
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "layerfuse/rng.hpp"
#include "layerfuse/tensor.hpp"

namespace layerfuse::core {

// ---------------------------------------------------------------------------
// Linear maps

/// out[B x m] = X[B x n] * W[n x m] + b (b broadcast over rows).
Tensor linear_forward(const Tensor &x, const Tensor &w, const Tensor &b);

/// Accumulates dW += X^T dOut and db += column sums of dOut. Returns dX when requested.
void linear_backward(const Tensor &x, const Tensor &w, const Tensor &d_out, Tensor &d_w,
                     Tensor &d_b, Tensor *d_x = nullptr);

// ---------------------------------------------------------------------------
// Softmax and attention

/// Row-wise softmax with max subtraction.
Tensor softmax_rows(const Tensor &scores);

struct AttentionCache {
  Tensor q;    // [B x 1 x dh]
  Tensor k;    // [B x R x dh]
  Tensor v;    // [B x R x dh]
  Tensor attn; // [B x R] pre-dropout softmax
  Tensor keep; // [B x R] dropout multiplier (0 or 1/(1-p)); all ones when not training
  bool valid = false;
};

struct AttentionOutput {
  Tensor out;  // [B x 1 x dh]
  Tensor attn; // [B x R] pre-dropout weights
  AttentionCache cache;
};

/// Single-query scaled dot-product attention with inverted attention dropout.
/// Dropout draws one Bernoulli per (sample, key) from `rng` in row-major order.
AttentionOutput attention_forward(const Tensor &q, const Tensor &k, const Tensor &v,
                                  double dropout_p, bool train, RngStream &rng);

struct AttentionGrads {
  Tensor dq;
  Tensor dk;
  Tensor dv;
};

AttentionGrads attention_backward(const AttentionCache &cache, const Tensor &d_out);

// ---------------------------------------------------------------------------
// Affine standardization over the feature axis: y = gain * (x - mean) / (std + eps) + bias

inline constexpr double kStandardizeEps = 1e-6;

struct StandardizeCache {
  Tensor centered; // [B x d]
  Tensor normed;   // [B x d]
  std::vector<double> sigma;
};

Tensor standardize_forward(const Tensor &x, const Tensor &gain, const Tensor &bias,
                           StandardizeCache &cache);
/// Accumulates into d_gain / d_bias and returns dX.
Tensor standardize_backward(const StandardizeCache &cache, const Tensor &gain, const Tensor &d_out,
                            Tensor &d_gain, Tensor &d_bias);

// ---------------------------------------------------------------------------
// Loss

struct LossResult {
  double loss = 0.0;
  Tensor d_logits;
};

/// Class-weighted softmax cross-entropy averaged over the batch size.
LossResult weighted_ce(const Tensor &logits, std::span<const std::int32_t> labels,
                       std::span<const double> class_weights);

/// w_i = N / (K * n_i). Throws ConfigError for a class without samples.
std::vector<double> compute_class_weights(std::span<const std::int32_t> labels, int num_classes);

// ---------------------------------------------------------------------------
// Optimization

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct OptState {
  AdamWConfig config;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::int64_t step = 0;
};

OptState make_opt_state(std::span<const ParamRef> params, AdamWConfig config);

/// Decoupled-weight-decay Adam step, in place:
///   theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
void adamw_step(std::span<const ParamRef> params, std::span<const Tensor *const> grads,
                OptState &state, double lr);

/// 0.5 * lr_max * (1 + cos(pi * step / total_steps)).
double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_max);

double global_norm(std::span<const Tensor *const> grads);

/// Rescales all gradients by min(1, max_norm / global_norm) and returns the factor.
double clip_global_norm(std::span<Tensor *const> grads, double max_norm);

/// With probability `prob` (one draw per call) adds N(0, sigma^2) noise to every entry.
/// Identity when `train` is false.
void apply_jitter(Tensor &h, double sigma, double prob, RngStream &rng, bool train);

// ---------------------------------------------------------------------------
// Gradient verification

struct GradCheckOptions {
  double step = 1e-5;
  std::size_t min_coords = 200;
  std::uint64_t seed = 0;
  /// Denominator floor as a fraction of the largest numeric gradient component.
  double relative_floor = 1e-3;
};

/// Compares analytic gradients against central finite differences of `loss`
/// on a random subsample of `min_coords` coordinates (all of them if fewer
/// exist). Returns the max over coordinates of
///   |a - n| / max(|a|, |n|, relative_floor * max_k |n_k|, 1e-10).
/// The floor keeps roundoff in near-zero components from dominating.
/// `loss` must be deterministic.
double finite_difference_check(const std::function<double()> &loss,
                               std::span<const ParamRef> params,
                               std::span<const Tensor *const> analytic,
                               const GradCheckOptions &options = {});

} // namespace layerfuse::core
