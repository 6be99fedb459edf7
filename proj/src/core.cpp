// SPDX-License-Identifier: Apache-2.0
#include "layerfuse/core.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace layerfuse::core {

namespace {

void require(bool ok, const std::string &what) {
  if (!ok)
    throw ShapeError(what);
}

} // namespace

Tensor linear_forward(const Tensor &x, const Tensor &w, const Tensor &b) {
  require(x.rank() == 2 && w.rank() == 2 && b.rank() == 1,
          "linear_forward: expected X[B x n], W[n x m], b[m]");
  const auto B = x.dim(0), n = x.dim(1), m = w.dim(1);
  require(w.dim(0) == n && b.dim(0) == m,
          "linear_forward: shape mismatch X" + shape_string(x.shape()) + " W" +
              shape_string(w.shape()) + " b" + shape_string(b.shape()));
  Tensor out({B, m});
  for (std::size_t i = 0; i < B; ++i) {
    double *row = &out.at(i, 0);
    std::copy(b.data(), b.data() + m, row);
    const double *xi = x.data() + i * n;
    for (std::size_t k = 0; k < n; ++k) {
      const double xv = xi[k];
      if (xv == 0.0)
        continue;
      const double *wk = w.data() + k * m;
      for (std::size_t j = 0; j < m; ++j)
        row[j] += xv * wk[j];
    }
  }
  return out;
}

void linear_backward(const Tensor &x, const Tensor &w, const Tensor &d_out, Tensor &d_w,
                     Tensor &d_b, Tensor *d_x) {
  const auto B = x.dim(0), n = x.dim(1), m = w.dim(1);
  require(d_out.rank() == 2 && d_out.dim(0) == B && d_out.dim(1) == m,
          "linear_backward: dOut shape mismatch");
  for (std::size_t i = 0; i < B; ++i) {
    const double *g = d_out.data() + i * m;
    const double *xi = x.data() + i * n;
    for (std::size_t j = 0; j < m; ++j)
      d_b[j] += g[j];
    for (std::size_t k = 0; k < n; ++k) {
      const double xv = xi[k];
      if (xv == 0.0)
        continue;
      double *dwk = d_w.data() + k * m;
      for (std::size_t j = 0; j < m; ++j)
        dwk[j] += xv * g[j];
    }
  }
  if (d_x) {
    *d_x = Tensor({B, n});
    for (std::size_t i = 0; i < B; ++i) {
      const double *g = d_out.data() + i * m;
      double *dxi = d_x->data() + i * n;
      for (std::size_t k = 0; k < n; ++k) {
        const double *wk = w.data() + k * m;
        double acc = 0.0;
        for (std::size_t j = 0; j < m; ++j)
          acc += wk[j] * g[j];
        dxi[k] = acc;
      }
    }
  }
}

Tensor softmax_rows(const Tensor &scores) {
  require(scores.rank() == 2, "softmax_rows: expected a matrix");
  const auto R = scores.dim(0), C = scores.dim(1);
  Tensor out({R, C});
  for (std::size_t i = 0; i < R; ++i) {
    const double *s = scores.data() + i * C;
    double *o = out.data() + i * C;
    const double mx = *std::max_element(s, s + C);
    double total = 0.0;
    for (std::size_t j = 0; j < C; ++j) {
      o[j] = std::exp(s[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < C; ++j)
      o[j] /= total;
  }
  return out;
}

AttentionOutput attention_forward(const Tensor &q, const Tensor &k, const Tensor &v,
                                  double dropout_p, bool train, RngStream &rng) {
  require(q.rank() == 3 && k.rank() == 3 && v.rank() == 3,
          "attention_forward: expected rank-3 Q, K, V");
  const auto B = q.dim(0), R = k.dim(1), dh = q.dim(2);
  if (dh == 0)
    throw ShapeError("attention_forward: head dimension is zero");
  require(q.dim(1) == 1 && k.dim(0) == B && v.dim(0) == B && v.dim(1) == R && k.dim(2) == dh &&
              v.dim(2) == dh,
          "attention_forward: shape mismatch Q" + shape_string(q.shape()) + " K" +
              shape_string(k.shape()) + " V" + shape_string(v.shape()));
  if (!(dropout_p >= 0.0 && dropout_p < 1.0))
    throw ConfigError("attention dropout must lie in [0, 1)");

  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor scores({B, R});
  for (std::size_t b = 0; b < B; ++b) {
    const double *qb = &q.at(b, 0, 0);
    for (std::size_t r = 0; r < R; ++r) {
      const double *kr = &k.at(b, r, 0);
      double dot = 0.0;
      for (std::size_t c = 0; c < dh; ++c)
        dot += qb[c] * kr[c];
      scores.at(b, r) = dot * scale;
    }
  }

  AttentionOutput result;
  result.attn = softmax_rows(scores);
  Tensor keep({B, R}, 1.0);
  if (train && dropout_p > 0.0) {
    const double kept = 1.0 / (1.0 - dropout_p);
    for (std::size_t i = 0; i < keep.size(); ++i)
      keep[i] = rng.uniform() < dropout_p ? 0.0 : kept;
  }

  result.out = Tensor({B, 1, dh});
  for (std::size_t b = 0; b < B; ++b) {
    double *ob = &result.out.at(b, 0, 0);
    for (std::size_t r = 0; r < R; ++r) {
      const double a = result.attn.at(b, r) * keep.at(b, r);
      if (a == 0.0)
        continue;
      const double *vr = &v.at(b, r, 0);
      for (std::size_t c = 0; c < dh; ++c)
        ob[c] += a * vr[c];
    }
  }

  result.cache.q = q;
  result.cache.k = k;
  result.cache.v = v;
  result.cache.attn = result.attn;
  result.cache.keep = std::move(keep);
  result.cache.valid = true;
  return result;
}

AttentionGrads attention_backward(const AttentionCache &cache, const Tensor &d_out) {
  if (!cache.valid)
    throw Error("attention_backward: stale or empty cache");
  const auto B = cache.q.dim(0), R = cache.k.dim(1), dh = cache.q.dim(2);
  require(d_out.rank() == 3 && d_out.dim(0) == B && d_out.dim(1) == 1 && d_out.dim(2) == dh,
          "attention_backward: dOut shape " + shape_string(d_out.shape()) +
              " does not match cached forward");
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  AttentionGrads g{Tensor(cache.q.shape()), Tensor(cache.k.shape()), Tensor(cache.v.shape())};
  std::vector<double> d_attn(R);
  for (std::size_t b = 0; b < B; ++b) {
    const double *go = &d_out.at(b, 0, 0);
    for (std::size_t r = 0; r < R; ++r) {
      const double *vr = &cache.v.at(b, r, 0);
      double *dvr = &g.dv.at(b, r, 0);
      const double a = cache.attn.at(b, r) * cache.keep.at(b, r);
      double dot = 0.0;
      for (std::size_t c = 0; c < dh; ++c) {
        dvr[c] = a * go[c];
        dot += go[c] * vr[c];
      }
      d_attn[r] = dot * cache.keep.at(b, r);
    }
    double weighted = 0.0;
    for (std::size_t r = 0; r < R; ++r)
      weighted += cache.attn.at(b, r) * d_attn[r];
    const double *qb = &cache.q.at(b, 0, 0);
    double *dqb = &g.dq.at(b, 0, 0);
    for (std::size_t r = 0; r < R; ++r) {
      const double ds = cache.attn.at(b, r) * (d_attn[r] - weighted) * scale;
      if (ds == 0.0)
        continue;
      const double *kr = &cache.k.at(b, r, 0);
      double *dkr = &g.dk.at(b, r, 0);
      for (std::size_t c = 0; c < dh; ++c) {
        dqb[c] += ds * kr[c];
        dkr[c] = ds * qb[c];
      }
    }
  }
  return g;
}

Tensor standardize_forward(const Tensor &x, const Tensor &gain, const Tensor &bias,
                           StandardizeCache &cache) {
  require(x.rank() == 2 && gain.size() == x.dim(1) && bias.size() == x.dim(1),
          "standardize_forward: shape mismatch");
  const auto B = x.dim(0), d = x.dim(1);
  cache.centered = Tensor({B, d});
  cache.normed = Tensor({B, d});
  cache.sigma.assign(B, 0.0);
  Tensor out({B, d});
  for (std::size_t i = 0; i < B; ++i) {
    const double *xi = x.data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j)
      mean += xi[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xi[j] - mean;
      cache.centered.at(i, j) = c;
      var += c * c;
    }
    const double sigma = std::sqrt(var / static_cast<double>(d));
    cache.sigma[i] = sigma;
    const double denom = sigma + kStandardizeEps;
    for (std::size_t j = 0; j < d; ++j) {
      const double z = cache.centered.at(i, j) / denom;
      cache.normed.at(i, j) = z;
      out.at(i, j) = gain[j] * z + bias[j];
    }
  }
  return out;
}

Tensor standardize_backward(const StandardizeCache &cache, const Tensor &gain, const Tensor &d_out,
                            Tensor &d_gain, Tensor &d_bias) {
  const auto B = cache.normed.dim(0), d = cache.normed.dim(1);
  require(d_out.rank() == 2 && d_out.dim(0) == B && d_out.dim(1) == d,
          "standardize_backward: shape mismatch");
  Tensor d_x({B, d});
  std::vector<double> d_centered(d);
  for (std::size_t i = 0; i < B; ++i) {
    const double sigma = cache.sigma[i];
    const double denom = sigma + kStandardizeEps;
    double dot = 0.0; // sum_j dz_j * u_j
    for (std::size_t j = 0; j < d; ++j) {
      const double g = d_out.at(i, j);
      d_gain[j] += g * cache.normed.at(i, j);
      d_bias[j] += g;
      dot += g * gain[j] * cache.centered.at(i, j);
    }
    // z = u / (sigma + eps), sigma = sqrt(mean(u^2))
    const double coeff = sigma > 0.0 ? dot / (denom * denom * sigma * static_cast<double>(d)) : 0.0;
    double mean_du = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      d_centered[j] = d_out.at(i, j) * gain[j] / denom - coeff * cache.centered.at(i, j);
      mean_du += d_centered[j];
    }
    mean_du /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j)
      d_x.at(i, j) = d_centered[j] - mean_du;
  }
  return d_x;
}

LossResult weighted_ce(const Tensor &logits, std::span<const std::int32_t> labels,
                       std::span<const double> class_weights) {
  require(logits.rank() == 2 && logits.dim(0) == labels.size(),
          "weighted_ce: logits/labels batch mismatch");
  const auto B = logits.dim(0), K = logits.dim(1);
  require(class_weights.size() == K, "weighted_ce: class weight count differs from logit width");
  LossResult result;
  result.d_logits = softmax_rows(logits);
  if (B == 0)
    return result;
  const double inv_b = 1.0 / static_cast<double>(B);
  for (std::size_t i = 0; i < B; ++i) {
    const auto y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= K)
      throw ConfigError("weighted_ce: label " + std::to_string(y) + " out of range [0, " +
                        std::to_string(K) + ")");
    const double w = class_weights[static_cast<std::size_t>(y)];
    const double *row = logits.data() + i * K;
    const double mx = *std::max_element(row, row + K);
    double total = 0.0;
    for (std::size_t j = 0; j < K; ++j)
      total += std::exp(row[j] - mx);
    const double log_p = row[y] - mx - std::log(total);
    result.loss -= w * log_p * inv_b;
    double *g = result.d_logits.data() + i * K;
    g[y] -= 1.0;
    for (std::size_t j = 0; j < K; ++j)
      g[j] *= w * inv_b;
  }
  return result;
}

std::vector<double> compute_class_weights(std::span<const std::int32_t> labels, int num_classes) {
  if (num_classes < 1)
    throw ConfigError("compute_class_weights: num_classes must be >= 1");
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (auto y : labels) {
    if (y < 0 || y >= num_classes)
      throw ConfigError("compute_class_weights: label " + std::to_string(y) + " out of range");
    ++counts[static_cast<std::size_t>(y)];
  }
  const double N = static_cast<double>(labels.size());
  std::vector<double> w(counts.size());
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0)
      throw ConfigError("class " + std::to_string(c) +
                        " has no training samples; merge or drop it before training");
    w[c] = N / (static_cast<double>(num_classes) * static_cast<double>(counts[c]));
  }
  return w;
}

OptState make_opt_state(std::span<const ParamRef> params, AdamWConfig config) {
  OptState state;
  state.config = config;
  for (const auto &p : params) {
    state.m.push_back(Tensor::zeros_like(*p.tensor));
    state.v.push_back(Tensor::zeros_like(*p.tensor));
  }
  return state;
}

void adamw_step(std::span<const ParamRef> params, std::span<const Tensor *const> grads,
                OptState &state, double lr) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    throw ShapeError("adamw_step: parameter, gradient and state counts differ");
  if (lr < 0.0)
    throw ConfigError("adamw_step: negative learning rate");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i]->shape() != params[i].tensor->shape() ||
        state.m[i].shape() != params[i].tensor->shape())
      throw ShapeError("adamw_step: shape mismatch for parameter '" + params[i].name + "'");
    if (!grads[i]->all_finite())
      throw NumericError("adamw_step: non-finite gradient for parameter '" + params[i].name + "'");
  }
  const auto &cfg = state.config;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor &theta = *params[i].tensor;
    const Tensor &g = *grads[i];
    Tensor &m = state.m[i];
    Tensor &v = state.v[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double m_hat = bc1 > 0.0 ? m[j] / bc1 : m[j];
      const double v_hat = bc2 > 0.0 ? v[j] / bc2 : v[j];
      const double denom = std::sqrt(v_hat) + cfg.eps;
      const double adaptive = denom > 0.0 ? m_hat / denom : 0.0;
      theta[j] -= lr * (adaptive + cfg.weight_decay * theta[j]);
    }
  }
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double lr_max) {
  if (total_steps < 1)
    throw ConfigError("cosine_lr: total_steps must be >= 1");
  step = std::clamp<std::int64_t>(step, 0, total_steps);
  if (step == total_steps)
    return 0.0;
  return 0.5 * lr_max *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                         static_cast<double>(total_steps)));
}

double global_norm(std::span<const Tensor *const> grads) {
  double sq = 0.0;
  for (const auto *g : grads)
    for (double x : g->values())
      sq += x * x;
  return std::sqrt(sq);
}

double clip_global_norm(std::span<Tensor *const> grads, double max_norm) {
  if (!(max_norm > 0.0))
    throw ConfigError("clip_global_norm: max_norm must be positive");
  std::vector<const Tensor *> view(grads.begin(), grads.end());
  const double norm = global_norm(view);
  if (norm <= max_norm)
    return 1.0;
  const double scale = max_norm / norm;
  for (auto *g : grads)
    for (double &x : g->values())
      x *= scale;
  return scale;
}

void apply_jitter(Tensor &h, double sigma, double prob, RngStream &rng, bool train) {
  if (sigma < 0.0 || prob < 0.0 || prob > 1.0)
    throw ConfigError("apply_jitter: need sigma >= 0 and prob in [0, 1]");
  if (!train || sigma == 0.0)
    return;
  if (!rng.bernoulli(prob))
    return;
  for (double &x : h.values())
    x += sigma * rng.normal();
}

double finite_difference_check(const std::function<double()> &loss,
                               std::span<const ParamRef> params,
                               std::span<const Tensor *const> analytic,
                               const GradCheckOptions &options) {
  if (params.size() != analytic.size())
    throw ShapeError("finite_difference_check: parameter/gradient count mismatch");
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (analytic[p]->shape() != params[p].tensor->shape())
      throw ShapeError("finite_difference_check: gradient shape mismatch for '" + params[p].name + "'");
    for (std::size_t j = 0; j < params[p].tensor->size(); ++j)
      coords.emplace_back(p, j);
  }
  if (coords.size() > options.min_coords) {
    RngStream rng(options.seed, "gradcheck");
    rng.shuffle(std::span(coords));
    coords.resize(options.min_coords);
  }
  std::vector<double> numeric(coords.size());
  double scale = 0.0;
  for (std::size_t c = 0; c < coords.size(); ++c) {
    const auto [p, j] = coords[c];
    double &theta = (*params[p].tensor)[j];
    const double saved = theta;
    theta = saved + options.step;
    const double up = loss();
    theta = saved - options.step;
    const double down = loss();
    theta = saved;
    numeric[c] = (up - down) / (2.0 * options.step);
    scale = std::max(scale, std::abs(numeric[c]));
  }
  const double floor = std::max(options.relative_floor * scale, 1e-10);
  double worst = 0.0;
  for (std::size_t c = 0; c < coords.size(); ++c) {
    const auto [p, j] = coords[c];
    const double a = (*analytic[p])[j];
    const double denom = std::max({std::abs(a), std::abs(numeric[c]), floor});
    worst = std::max(worst, std::abs(a - numeric[c]) / denom);
  }
  return worst;
}

} // namespace layerfuse::core
