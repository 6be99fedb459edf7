// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "layerfuse/reprstore.hpp"
#include "layerfuse/tensor.hpp"

namespace layerfuse::analysis {

/// Mean per-class recall. Throws ConfigError when a class in [0, K) has no samples.
double balanced_accuracy(std::span<const std::int32_t> preds, std::span<const std::int32_t> labels,
                         int num_classes);

/// Mean recall over the classes that occur in `labels`; equals balanced_accuracy
/// when every class occurs. Used for validation subsets that may miss a class.
double mean_present_recall(std::span<const std::int32_t> preds,
                           std::span<const std::int32_t> labels, int num_classes);

/// Accuracy gain over a baseline in percentage points: 100 * (method - baseline).
double accuracy_gain(double method_acc, double baseline_acc);

struct GainRecord {
  std::string method;
  double method_acc;
  double baseline_acc;
  double delta_pp;
};
GainRecord make_gain(std::string method, double method_acc, double baseline_acc);

/// Attention mass per (token kind, layer), averaged over samples and heads.
/// Rows follow kinds (CLS, AP, PATCH); columns are layers 1..L.
struct HeatmapMatrix {
  std::vector<store::TokenKind> kinds;
  int num_layers = 0;
  Tensor values; // [kinds x L]
  std::size_t samples = 0;
  std::size_t heads = 0;

  double at(store::TokenKind kind, int layer) const;
  double total() const;
  /// (kind, layer) of the largest cell.
  std::pair<store::TokenKind, int> argmax() const;
};

/// Streaming reduction over eval-mode attention batches [B x M x R].
class HeatmapAccumulator {
public:
  HeatmapAccumulator(std::vector<store::RowTag> rows, int num_layers);
  void add(const Tensor &attn);
  HeatmapMatrix finish() const;

private:
  std::vector<store::RowTag> rows_;
  int num_layers_;
  std::vector<double> sums_; // [3 x L]
  std::size_t samples_ = 0;
  std::size_t heads_ = 0;
};

HeatmapMatrix aggregate_attention(std::span<const Tensor> attn_batches,
                                  const std::vector<store::RowTag> &rows, int num_layers);

struct CkaOptions {
  /// When true the RBF bandwidth is sigma * median pairwise distance; otherwise sigma is absolute.
  bool median_fraction = true;
  double sigma = 0.2;
};

double median_pairwise_distance(const Tensor &x);

/// CKA with an RBF kernel between paired representations X [N x p] and Y [N x q].
double cka_rbf(const Tensor &x, const Tensor &y, const CkaOptions &options = {});

inline constexpr std::size_t kCkaMaxRows = 2000;

/// CKA of each layer's representation of `kind` against `reference_layer`
/// (default: last layer), on a seeded subsample of at most 2000 rows.
std::vector<double> layer_similarity_curve(const store::FeatureStore &store,
                                           const std::string &split, store::TokenKind kind,
                                           std::optional<int> reference_layer = std::nullopt,
                                           const CkaOptions &options = {},
                                           std::uint64_t seed = 0,
                                           std::size_t max_rows = kCkaMaxRows);

} // namespace layerfuse::analysis
