// SPDX-License-Identifier: Apache-2.0
#include "layerfuse/probes.hpp"

#include <algorithm>
#include <cctype>

namespace layerfuse::probes {

using store::TokenKind;

std::string_view to_string(ProbeKind kind) {
  switch (kind) {
  case ProbeKind::LinearCls:
    return "linear-cls";
  case ProbeKind::LinearConcat:
    return "linear-concat";
  case ProbeKind::AttentiveFusion:
    return "attentive-fusion";
  case ProbeKind::AttentiveTokens:
    return "attentive-tokens";
  }
  return "?";
}

ProbeKind parse_probe_kind(std::string_view text) {
  std::string t(text);
  std::transform(t.begin(), t.end(), t.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  std::replace(t.begin(), t.end(), '_', '-');
  if (t == "linear" || t == "linear-cls")
    return ProbeKind::LinearCls;
  if (t == "linear-concat" || t == "concat")
    return ProbeKind::LinearConcat;
  if (t == "attentive-fusion" || t == "attentive" || t == "fusion")
    return ProbeKind::AttentiveFusion;
  if (t == "attentive-tokens" || t == "aat" || t == "hybrid")
    return ProbeKind::AttentiveTokens;
  throw ConfigError("unknown probe kind '" + std::string(text) +
                    "' (expected linear, linear-concat, attentive-fusion, aat or hybrid)");
}

bool is_attentive(ProbeKind kind) {
  return kind == ProbeKind::AttentiveFusion || kind == ProbeKind::AttentiveTokens;
}

std::string ProbeConfig::label() const {
  std::string tok = tokens.patch ? "all tokens" : tokens.str();
  return layers.str() + " (" + tok + ", " + (is_attentive(kind) ? "attentive" : "linear") + ")";
}

HeadChoice resolve_heads(std::optional<int> requested, int num_rows, int d_model) {
  const int width = 2 * d_model;
  if (width <= 0)
    throw ConfigError("d_model must be positive");
  if (requested) {
    const int m = *requested;
    if (m < 1 || width % m != 0)
      throw ConfigError("head count " + std::to_string(m) + " does not divide 2d = " +
                        std::to_string(width));
    return {m, false};
  }
  if (num_rows < 1)
    throw ConfigError("cannot choose heads for an empty representation stack");
  if (width % num_rows == 0)
    return {num_rows, false};
  for (int m = std::min(num_rows, width); m >= 1; --m)
    if (width % m == 0)
      return {m, true};
  return {1, true};
}

ProbeConfig resolve_config(ProbeConfig cfg, const store::StoreMeta &meta) {
  const auto &tok = cfg.tokens;
  switch (cfg.kind) {
  case ProbeKind::LinearCls:
    if (!tok.cls || tok.ap || tok.patch)
      throw ConfigError("linear-cls probe takes CLS tokens only (got '" + tok.str() + "')");
    break;
  case ProbeKind::LinearConcat:
  case ProbeKind::AttentiveFusion:
    if (tok.patch)
      throw ConfigError(std::string(to_string(cfg.kind)) +
                        " fuses summary tokens; use aat or hybrid for patch tokens");
    break;
  case ProbeKind::AttentiveTokens:
    if (!tok.patch)
      throw ConfigError("attentive-tokens probe requires PATCH tokens");
    break;
  }
  for (auto kind : {TokenKind::Cls, TokenKind::Ap, TokenKind::Patch})
    if (tok.contains(kind) && !meta.token_kinds.contains(kind))
      throw ConfigError("store '" + meta.model_id + "' has no " + std::string(store::to_string(kind)) +
                        " tokens; probe " + std::string(to_string(cfg.kind)) + " cannot run on it");

  cfg.layer_indices = store::resolve_layers(meta.num_layers, cfg.layers);
  if (cfg.kind == ProbeKind::LinearCls && cfg.layer_indices.size() != 1)
    throw ConfigError("linear-cls probe reads a single layer");
  cfg.d_model = store::max_width(meta, cfg.layer_indices);
  cfg.num_classes = meta.num_classes;
  cfg.num_patches = tok.patch ? meta.num_patches : 0;
  cfg.num_rows = static_cast<int>(store::row_layout(meta, cfg.layer_indices, tok).size());
  if (cfg.num_rows < 1)
    throw ConfigError("probe selects no representation rows");
  if (is_attentive(cfg.kind)) {
    const auto requested =
        cfg.kind == ProbeKind::AttentiveTokens && !cfg.num_heads ? std::optional<int>(kAatHeads)
                                                                 : cfg.num_heads;
    const auto choice = resolve_heads(requested, cfg.num_rows, cfg.d_model);
    cfg.heads = choice.heads;
    cfg.heads_fallback = choice.fallback;
  } else {
    cfg.heads = 0;
    cfg.heads_fallback = false;
  }
  return cfg;
}

ProbeConfig make_aat_config(int num_layers, int num_patches, int d_model, int num_classes) {
  if (num_patches < 1)
    throw ConfigError("AAT probe requires PATCH tokens (num_patches = 0)");
  ProbeConfig cfg;
  cfg.kind = ProbeKind::AttentiveTokens;
  cfg.layers = store::LayerScheme::last();
  cfg.tokens = {true, false, true};
  cfg.num_heads = kAatHeads;
  cfg.d_model = d_model;
  cfg.num_classes = num_classes;
  cfg.pinned_weight_decay = kAatWeightDecay;
  cfg.layer_indices = {num_layers};
  cfg.num_patches = num_patches;
  cfg.num_rows = num_patches + 1;
  cfg.heads = resolve_heads(cfg.num_heads, cfg.num_rows, d_model).heads;
  return cfg;
}

ProbeConfig make_hybrid_config(int num_layers, int num_patches, int d_model, int num_classes) {
  if (num_patches < 1)
    throw ConfigError("hybrid probe requires PATCH tokens (num_patches = 0)");
  ProbeConfig cfg;
  cfg.kind = ProbeKind::AttentiveTokens;
  cfg.layers = store::LayerScheme::quarterly();
  cfg.tokens = {true, false, true};
  cfg.num_heads = kHybridHeads;
  cfg.attn_dropout = kHybridDropout;
  cfg.d_model = d_model;
  cfg.num_classes = num_classes;
  cfg.layer_indices = store::resolve_layers(num_layers, cfg.layers);
  cfg.num_patches = num_patches;
  cfg.num_rows = static_cast<int>(cfg.layer_indices.size()) * (num_patches + 1);
  cfg.heads = resolve_heads(cfg.num_heads, cfg.num_rows, d_model).heads;
  return cfg;
}

void check_store_compatible(const ProbeConfig &cfg, const store::FeatureStore &store,
                            const std::string &split) {
  if (!cfg.tokens.patch)
    return;
  for (int l : cfg.layer_indices)
    if (!store.has_tensor(split, TokenKind::Patch, l))
      throw ConfigError("store '" + store.meta.model_id + "' lacks PATCH tensors for layer " +
                        std::to_string(l) + " in split '" + split + "'");
}

namespace {

template <typename Ref, typename P> std::vector<Ref> collect(P &probe) {
  std::vector<Ref> out;
  std::visit(
      [&](auto &w) {
        using W = std::decay_t<decltype(w)>;
        if constexpr (std::is_same_v<W, LinearProbe>) {
          out = {{"w_clf", &w.w_clf}, {"b_clf", &w.b_clf}};
        } else {
          out = {{"query", &w.query},         {"w_key", &w.w_key},
                 {"b_key", &w.b_key},         {"w_val", &w.w_val},
                 {"b_val", &w.b_val},         {"w_query", &w.w_query},
                 {"b_query", &w.b_query},     {"w_out", &w.w_out},
                 {"b_out", &w.b_out},         {"norm_gain", &w.norm_gain},
                 {"norm_bias", &w.norm_bias}, {"w_clf", &w.w_clf},
                 {"b_clf", &w.b_clf}};
        }
      },
      probe.weights);
  return out;
}

void fill_normal(Tensor &t, RngStream &rng) {
  for (double &x : t.values())
    x = kInitStd * rng.normal();
}

const AttentiveProbe &attentive(const Probe &p) {
  const auto *w = std::get_if<AttentiveProbe>(&p.weights);
  if (!w)
    throw ShapeError("probe is not attentive");
  return *w;
}

const LinearProbe &linear(const Probe &p) {
  const auto *w = std::get_if<LinearProbe>(&p.weights);
  if (!w)
    throw ShapeError("probe is not linear");
  return *w;
}

} // namespace

std::vector<ParamRef> parameters(Probe &probe) { return collect<ParamRef>(probe); }
std::vector<ConstParamRef> parameters(const Probe &probe) { return collect<ConstParamRef>(probe); }

std::size_t enumerate_param_count(const Probe &probe) {
  std::size_t total = 0;
  for (const auto &p : parameters(probe))
    total += p.tensor->size();
  return total;
}

Probe zeros_like(const Probe &probe) {
  Probe out = probe;
  for (auto &p : parameters(out))
    p.tensor->fill(0.0);
  return out;
}

std::int64_t count_params(ProbeKind kind, std::int64_t d, std::int64_t num_layers,
                          std::int64_t num_classes) {
  switch (kind) {
  case ProbeKind::LinearConcat:
    return 2 * num_layers * d * num_classes + num_classes;
  case ProbeKind::LinearCls:
    return d * num_classes + num_classes;
  case ProbeKind::AttentiveFusion:
  case ProbeKind::AttentiveTokens:
    return 8 * d * d + 10 * d + d * num_classes + num_classes;
  }
  return 0;
}

Probe init_probe(const ProbeConfig &cfg, RngStream &rng) {
  if (cfg.d_model < 1 || cfg.num_classes < 1 || cfg.num_rows < 1)
    throw ConfigError("init_probe: configuration is not resolved against a store");
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto K = static_cast<std::size_t>(cfg.num_classes);
  Probe probe;
  probe.config = cfg;
  if (!is_attentive(cfg.kind)) {
    LinearProbe w{Tensor({static_cast<std::size_t>(cfg.num_rows) * d, K}), Tensor({K})};
    fill_normal(w.w_clf, rng);
    probe.weights = std::move(w);
    return probe;
  }
  if (cfg.heads < 1 || (2 * cfg.d_model) % cfg.heads != 0)
    throw ConfigError("init_probe: 2d = " + std::to_string(2 * cfg.d_model) +
                      " is not divisible by " + std::to_string(cfg.heads) + " heads");
  AttentiveProbe w{Tensor({1, d}),     Tensor({d, 2 * d}), Tensor({2 * d}), Tensor({d, 2 * d}),
                   Tensor({2 * d}),    Tensor({d, 2 * d}), Tensor({2 * d}), Tensor({2 * d, d}),
                   Tensor({d}),        Tensor({d}, 1.0),   Tensor({d}),     Tensor({d, K}),
                   Tensor({K})};
  for (Tensor *t : {&w.query, &w.w_key, &w.w_val, &w.w_query, &w.w_out, &w.w_clf})
    fill_normal(*t, rng);
  probe.weights = std::move(w);
  return probe;
}

ForwardResult fusion_forward(const Probe &probe, const store::StackedBatch &batch, bool train,
                             RngStream &rng) {
  const auto &w = attentive(probe);
  const auto &cfg = probe.config;
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto M = static_cast<std::size_t>(cfg.heads);
  const auto dh = static_cast<std::size_t>(cfg.head_dim());
  if (batch.h.rank() != 3 || batch.num_rows() != static_cast<std::size_t>(cfg.num_rows) ||
      batch.width() != d)
    throw ShapeError("fusion_forward: batch " + shape_string(batch.h.shape()) +
                     " does not match probe (R = " + std::to_string(cfg.num_rows) +
                     ", d = " + std::to_string(d) + ")");
  const auto B = batch.batch();
  const auto R = batch.num_rows();

  FusionCache cache;
  cache.h_flat = batch.h.reshaped({B * R, d});
  const Tensor keys = core::linear_forward(cache.h_flat, w.w_key, w.b_key);
  const Tensor vals = core::linear_forward(cache.h_flat, w.w_val, w.b_val);
  cache.query_proj = core::linear_forward(w.query, w.w_query, w.b_query);

  ForwardResult result;
  result.attn = Tensor({B, M, R});
  result.score_entries = B * M * R;
  cache.concat = Tensor({B, 2 * d});
  cache.heads.reserve(M);
  for (std::size_t m = 0; m < M; ++m) {
    const std::size_t col = m * dh;
    Tensor qh({B, 1, dh}), kh({B, R, dh}), vh({B, R, dh});
    for (std::size_t b = 0; b < B; ++b) {
      std::copy_n(cache.query_proj.data() + col, dh, &qh.at(b, 0, 0));
      for (std::size_t r = 0; r < R; ++r) {
        const std::size_t src = (b * R + r) * 2 * d + col;
        std::copy_n(keys.data() + src, dh, &kh.at(b, r, 0));
        std::copy_n(vals.data() + src, dh, &vh.at(b, r, 0));
      }
    }
    auto head = core::attention_forward(qh, kh, vh, cfg.attn_dropout, train, rng);
    for (std::size_t b = 0; b < B; ++b) {
      std::copy_n(&head.out.at(b, 0, 0), dh, &cache.concat.at(b, col));
      std::copy_n(&head.attn.at(b, 0), R, &result.attn.at(b, m, 0));
    }
    cache.heads.push_back(std::move(head.cache));
  }

  const Tensor pre_norm = core::linear_forward(cache.concat, w.w_out, w.b_out);
  cache.fused = core::standardize_forward(pre_norm, w.norm_gain, w.norm_bias, cache.norm);
  result.logits = core::linear_forward(cache.fused, w.w_clf, w.b_clf);
  result.cache = std::move(cache);
  return result;
}

Probe fusion_backward(const Probe &probe, const FusionCache &cache, const Tensor &d_logits) {
  const auto &w = attentive(probe);
  const auto &cfg = probe.config;
  Probe grads = zeros_like(probe);
  auto &g = std::get<AttentiveProbe>(grads.weights);
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto dh = static_cast<std::size_t>(cfg.head_dim());
  const auto B = cache.concat.dim(0);
  const auto R = B ? cache.h_flat.dim(0) / B : static_cast<std::size_t>(cfg.num_rows);
  if (d_logits.rank() != 2 || d_logits.dim(0) != B)
    throw ShapeError("fusion_backward: dLogits does not match cached batch");

  Tensor d_fused;
  core::linear_backward(cache.fused, w.w_clf, d_logits, g.w_clf, g.b_clf, &d_fused);
  const Tensor d_pre = core::standardize_backward(cache.norm, w.norm_gain, d_fused, g.norm_gain,
                                                  g.norm_bias);
  Tensor d_concat;
  core::linear_backward(cache.concat, w.w_out, d_pre, g.w_out, g.b_out, &d_concat);

  Tensor d_keys({B * R, 2 * d}), d_vals({B * R, 2 * d}), d_qproj({1, 2 * d});
  for (std::size_t m = 0; m < cache.heads.size(); ++m) {
    const std::size_t col = m * dh;
    Tensor d_out({B, 1, dh});
    for (std::size_t b = 0; b < B; ++b)
      std::copy_n(&d_concat.at(b, col), dh, &d_out.at(b, 0, 0));
    const auto hg = core::attention_backward(cache.heads[m], d_out);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t c = 0; c < dh; ++c)
        d_qproj[col + c] += hg.dq.at(b, 0, c);
      for (std::size_t r = 0; r < R; ++r) {
        const std::size_t dst = (b * R + r) * 2 * d + col;
        std::copy_n(&hg.dk.at(b, r, 0), dh, d_keys.data() + dst);
        std::copy_n(&hg.dv.at(b, r, 0), dh, d_vals.data() + dst);
      }
    }
  }
  core::linear_backward(cache.h_flat, w.w_key, d_keys, g.w_key, g.b_key);
  core::linear_backward(cache.h_flat, w.w_val, d_vals, g.w_val, g.b_val);
  Tensor d_query;
  core::linear_backward(w.query, w.w_query, d_qproj, g.w_query, g.b_query, &d_query);
  g.query = std::move(d_query);
  return grads;
}

ForwardResult linear_forward_probe(const Probe &probe, const store::StackedBatch &batch) {
  const auto &w = linear(probe);
  const auto &cfg = probe.config;
  const auto d = static_cast<std::size_t>(cfg.d_model);
  if (batch.h.rank() != 3 || batch.num_rows() != static_cast<std::size_t>(cfg.num_rows) ||
      batch.width() != d)
    throw ShapeError("linear probe: batch " + shape_string(batch.h.shape()) +
                     " does not match probe (R = " + std::to_string(cfg.num_rows) +
                     ", d = " + std::to_string(d) + ")");
  const auto B = batch.batch();
  LinearCache cache{batch.h.reshaped({B, batch.num_rows() * d})};
  ForwardResult result;
  result.logits = core::linear_forward(cache.x, w.w_clf, w.b_clf);
  result.cache = std::move(cache);
  return result;
}

Probe linear_backward_probe(const Probe &probe, const LinearCache &cache, const Tensor &d_logits) {
  const auto &w = linear(probe);
  Probe grads = zeros_like(probe);
  auto &g = std::get<LinearProbe>(grads.weights);
  core::linear_backward(cache.x, w.w_clf, d_logits, g.w_clf, g.b_clf);
  return grads;
}

ForwardResult probe_forward(const Probe &probe, const store::StackedBatch &batch, bool train,
                            RngStream &rng) {
  if (is_attentive(probe.config.kind))
    return fusion_forward(probe, batch, train, rng);
  return linear_forward_probe(probe, batch);
}

Probe probe_backward(const Probe &probe, const ForwardResult &fwd, const Tensor &d_logits) {
  if (const auto *c = std::get_if<FusionCache>(&fwd.cache))
    return fusion_backward(probe, *c, d_logits);
  return linear_backward_probe(probe, std::get<LinearCache>(fwd.cache), d_logits);
}

} // namespace layerfuse::probes
