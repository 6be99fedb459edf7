// SPDX-License-Identifier: Apache-2.0
//
// Probe architectures over stacked frozen features:
//   LINEAR_CLS        last-layer CLS linear baseline
//   LINEAR_CONCAT     linear classifier on the concatenated stack
//   ATTENTIVE_FUSION  learned-query multi-head cross-attention over summary tokens
//   ATTENTIVE_TOKENS  the same attention block over patch tokens (AAT / hybrid)
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "layerfuse/core.hpp"
#include "layerfuse/reprstore.hpp"

namespace layerfuse::probes {

enum class ProbeKind { LinearCls, LinearConcat, AttentiveFusion, AttentiveTokens };

std::string_view to_string(ProbeKind kind);
/// Accepts linear, linear-cls, linear-concat, attentive-fusion, attentive-tokens, aat, hybrid.
ProbeKind parse_probe_kind(std::string_view text);
bool is_attentive(ProbeKind kind);

inline constexpr int kAatHeads = 8;
inline constexpr int kHybridHeads = 24;
inline constexpr double kHybridDropout = 0.5;
inline constexpr double kAatWeightDecay = 0.1;
inline constexpr double kInitStd = 0.02;

struct ProbeConfig {
  ProbeKind kind = ProbeKind::AttentiveFusion;
  store::LayerScheme layers = store::LayerScheme::all();
  store::TokenSet tokens{true, true, false};
  std::optional<int> num_heads; // nullopt = AUTO
  double attn_dropout = 0.0;
  int d_model = 0;
  int num_classes = 0;
  /// Weight decay forced during grid search (AAT), if any.
  std::optional<double> pinned_weight_decay;

  // Resolved against a store's geometry.
  std::vector<int> layer_indices;
  int num_rows = 0;
  int heads = 0;
  bool heads_fallback = false;
  int num_patches = 0;

  int head_dim() const { return heads > 0 ? 2 * d_model / heads : 0; }
  /// "[layers] ([tokens], [fusion type])" label.
  std::string label() const;
};

/// Head count rule: explicit value (must divide 2d), or AUTO = R, falling back
/// to the largest divisor of 2d not exceeding R when R does not divide 2d.
struct HeadChoice {
  int heads;
  bool fallback;
};
HeadChoice resolve_heads(std::optional<int> requested, int num_rows, int d_model);

/// Fill the resolved fields (layer indices, d_model, rows, heads) from store geometry.
ProbeConfig resolve_config(ProbeConfig cfg, const store::StoreMeta &meta);

/// Attention over the last layer's P patch tokens plus its CLS token, M = 8,
/// weight decay pinned to 0.1 for grid search.
ProbeConfig make_aat_config(int num_layers, int num_patches, int d_model, int num_classes);
/// Attention over all tokens (CLS + patches) of the quarterly layers, dropout 0.5, M = 24.
ProbeConfig make_hybrid_config(int num_layers, int num_patches, int d_model, int num_classes);

/// Same-kind geometry validation against a store: token kinds and patch layers present.
void check_store_compatible(const ProbeConfig &cfg, const store::FeatureStore &store,
                            const std::string &split);

struct LinearProbe {
  Tensor w_clf; // [(R*d) x K]
  Tensor b_clf; // [K]
};

/// Head m uses columns [m*dh, (m+1)*dh) of the key/value/query projections.
struct AttentiveProbe {
  Tensor query;     // [1 x d]
  Tensor w_key;     // [d x 2d]
  Tensor b_key;     // [2d]
  Tensor w_val;     // [d x 2d]
  Tensor b_val;     // [2d]
  Tensor w_query;   // [d x 2d]
  Tensor b_query;   // [2d]
  Tensor w_out;     // [2d x d]
  Tensor b_out;     // [d]
  Tensor norm_gain; // [d]
  Tensor norm_bias; // [d]
  Tensor w_clf;     // [d x K]
  Tensor b_clf;     // [K]
};

struct Probe {
  ProbeConfig config;
  std::variant<LinearProbe, AttentiveProbe> weights;
};

/// Parameters in declared (serialization) order.
std::vector<ParamRef> parameters(Probe &probe);
std::vector<ConstParamRef> parameters(const Probe &probe);
/// Sum of all parameter array sizes.
std::size_t enumerate_param_count(const Probe &probe);
/// A probe of identical structure with all arrays zeroed (gradient container).
Probe zeros_like(const Probe &probe);

/// Closed-form parameter budget:
///   LINEAR_CONCAT      2 * |layers| * d * K + K
///   LINEAR_CLS         d * K + K
///   ATTENTIVE_*        8 d^2 + 10 d + d K + K
std::int64_t count_params(ProbeKind kind, std::int64_t d, std::int64_t num_layers,
                          std::int64_t num_classes);

/// Weights ~ N(0, 0.02^2), biases 0, normalization gain 1 / bias 0.
Probe init_probe(const ProbeConfig &cfg, RngStream &rng);

struct FusionCache {
  Tensor h_flat;                           // [B*R x d]
  Tensor query_proj;                       // [1 x 2d]
  std::vector<core::AttentionCache> heads; // one per head
  Tensor concat;                           // [B x 2d]
  core::StandardizeCache norm;
  Tensor fused; // [B x d] after normalization
};

struct LinearCache {
  Tensor x; // [B x R*d]
};

struct ForwardResult {
  Tensor logits; // [B x K]
  Tensor attn;   // [B x M x R] pre-dropout weights; empty for linear probes
  /// Attention score entries computed (B * M * R); 0 for linear probes.
  std::size_t score_entries = 0;
  std::variant<LinearCache, FusionCache> cache;
};

ForwardResult fusion_forward(const Probe &probe, const store::StackedBatch &batch, bool train,
                             RngStream &rng);
Probe fusion_backward(const Probe &probe, const FusionCache &cache, const Tensor &d_logits);

ForwardResult linear_forward_probe(const Probe &probe, const store::StackedBatch &batch);
Probe linear_backward_probe(const Probe &probe, const LinearCache &cache, const Tensor &d_logits);

/// Dispatch on probe kind.
ForwardResult probe_forward(const Probe &probe, const store::StackedBatch &batch, bool train,
                            RngStream &rng);
Probe probe_backward(const Probe &probe, const ForwardResult &fwd, const Tensor &d_logits);

} // namespace layerfuse::probes
