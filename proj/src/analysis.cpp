// SPDX-License-Identifier: Apache-2.0
#include "layerfuse/analysis.hpp"

#include <algorithm>
#include <cmath>

#include "layerfuse/rng.hpp"

namespace layerfuse::analysis {

using store::TokenKind;

namespace {

struct RecallCounts {
  std::vector<std::size_t> seen;
  std::vector<std::size_t> hit;
};

RecallCounts count_recall(std::span<const std::int32_t> preds, std::span<const std::int32_t> labels,
                          int num_classes) {
  if (preds.size() != labels.size())
    throw ShapeError("balanced_accuracy: prediction and label counts differ");
  if (num_classes < 1)
    throw ConfigError("balanced_accuracy: num_classes must be >= 1");
  RecallCounts c{std::vector<std::size_t>(static_cast<std::size_t>(num_classes)),
                 std::vector<std::size_t>(static_cast<std::size_t>(num_classes))};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = labels[i];
    if (y < 0 || y >= num_classes)
      throw ConfigError("balanced_accuracy: label " + std::to_string(y) + " out of range");
    ++c.seen[static_cast<std::size_t>(y)];
    if (preds[i] == y)
      ++c.hit[static_cast<std::size_t>(y)];
  }
  return c;
}

std::size_t kind_row(TokenKind kind) { return static_cast<std::size_t>(kind); }

} // namespace

double balanced_accuracy(std::span<const std::int32_t> preds, std::span<const std::int32_t> labels,
                         int num_classes) {
  const auto c = count_recall(preds, labels, num_classes);
  double total = 0.0;
  for (std::size_t k = 0; k < c.seen.size(); ++k) {
    if (c.seen[k] == 0)
      throw ConfigError("balanced accuracy undefined: class " + std::to_string(k) +
                        " has no samples");
    total += static_cast<double>(c.hit[k]) / static_cast<double>(c.seen[k]);
  }
  return total / static_cast<double>(c.seen.size());
}

double mean_present_recall(std::span<const std::int32_t> preds,
                           std::span<const std::int32_t> labels, int num_classes) {
  const auto c = count_recall(preds, labels, num_classes);
  double total = 0.0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < c.seen.size(); ++k) {
    if (c.seen[k] == 0)
      continue;
    total += static_cast<double>(c.hit[k]) / static_cast<double>(c.seen[k]);
    ++present;
  }
  if (present == 0)
    throw ConfigError("balanced accuracy undefined on an empty label set");
  return total / static_cast<double>(present);
}

double accuracy_gain(double method_acc, double baseline_acc) {
  return 100.0 * (method_acc - baseline_acc);
}

GainRecord make_gain(std::string method, double method_acc, double baseline_acc) {
  return {std::move(method), method_acc, baseline_acc, accuracy_gain(method_acc, baseline_acc)};
}

double HeatmapMatrix::at(TokenKind kind, int layer) const {
  const auto it = std::find(kinds.begin(), kinds.end(), kind);
  if (it == kinds.end() || layer < 1 || layer > num_layers)
    return 0.0;
  return values.at(static_cast<std::size_t>(it - kinds.begin()), static_cast<std::size_t>(layer - 1));
}

double HeatmapMatrix::total() const {
  double s = 0.0;
  for (double v : values.values())
    s += v;
  return s;
}

std::pair<TokenKind, int> HeatmapMatrix::argmax() const {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best])
      best = i;
  const auto L = static_cast<std::size_t>(num_layers);
  return {kinds.at(best / L), static_cast<int>(best % L) + 1};
}

HeatmapAccumulator::HeatmapAccumulator(std::vector<store::RowTag> rows, int num_layers)
    : rows_(std::move(rows)), num_layers_(num_layers),
      sums_(3 * static_cast<std::size_t>(num_layers), 0.0) {
  if (num_layers < 1)
    throw ConfigError("heatmap needs at least one layer");
  for (const auto &tag : rows_)
    if (tag.layer < 1 || tag.layer > num_layers)
      throw ShapeError("heatmap row tag " + tag.str() + " outside the layer range");
}

void HeatmapAccumulator::add(const Tensor &attn) {
  if (attn.rank() != 3 || attn.dim(2) != rows_.size())
    throw ShapeError("aggregate_attention: attention " + shape_string(attn.shape()) +
                     " does not match " + std::to_string(rows_.size()) + " row tags");
  if (heads_ != 0 && attn.dim(1) != heads_)
    throw ShapeError("aggregate_attention: head count changed between batches");
  heads_ = attn.dim(1);
  const auto L = static_cast<std::size_t>(num_layers_);
  for (std::size_t b = 0; b < attn.dim(0); ++b)
    for (std::size_t m = 0; m < attn.dim(1); ++m)
      for (std::size_t r = 0; r < rows_.size(); ++r)
        sums_[kind_row(rows_[r].kind) * L + static_cast<std::size_t>(rows_[r].layer - 1)] +=
            attn.at(b, m, r);
  samples_ += attn.dim(0);
}

HeatmapMatrix HeatmapAccumulator::finish() const {
  HeatmapMatrix hm;
  hm.num_layers = num_layers_;
  hm.samples = samples_;
  hm.heads = heads_;
  for (auto kind : {TokenKind::Cls, TokenKind::Ap, TokenKind::Patch}) {
    const bool used = std::any_of(rows_.begin(), rows_.end(),
                                  [&](const store::RowTag &t) { return t.kind == kind; });
    if (used || kind != TokenKind::Patch)
      hm.kinds.push_back(kind);
  }
  const auto L = static_cast<std::size_t>(num_layers_);
  hm.values = Tensor({hm.kinds.size(), L});
  const double denom = static_cast<double>(samples_ * heads_);
  if (denom == 0.0)
    return hm;
  for (std::size_t i = 0; i < hm.kinds.size(); ++i)
    for (std::size_t l = 0; l < L; ++l)
      hm.values.at(i, l) = sums_[kind_row(hm.kinds[i]) * L + l] / denom;
  return hm;
}

HeatmapMatrix aggregate_attention(std::span<const Tensor> attn_batches,
                                  const std::vector<store::RowTag> &rows, int num_layers) {
  HeatmapAccumulator acc(rows, num_layers);
  for (const auto &a : attn_batches)
    acc.add(a);
  return acc.finish();
}

namespace {

Tensor squared_distances(const Tensor &x) {
  const auto n = x.dim(0), p = x.dim(1);
  Tensor d2({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < p; ++k) {
        const double diff = x.at(i, k) - x.at(j, k);
        s += diff * diff;
      }
      d2.at(i, j) = d2.at(j, i) = s;
    }
  return d2;
}

double median_of_upper(const Tensor &d2) {
  const auto n = d2.dim(0);
  std::vector<double> dist;
  dist.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      dist.push_back(std::sqrt(d2.at(i, j)));
  if (dist.empty())
    return 0.0;
  const auto mid = dist.size() / 2;
  std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid), dist.end());
  const double upper = dist[mid];
  if (dist.size() % 2 == 1)
    return upper;
  const double lower = *std::max_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

/// Doubly centered RBF Gram matrix.
Tensor centered_rbf_gram(const Tensor &x, const CkaOptions &options) {
  const auto n = x.dim(0);
  const Tensor d2 = squared_distances(x);
  double sigma = options.sigma;
  if (options.median_fraction)
    sigma = options.sigma * std::max(median_of_upper(d2), 1e-12);
  if (!(sigma > 0.0))
    throw ConfigError("cka_rbf: bandwidth must be positive");
  const double inv = 1.0 / (2.0 * sigma * sigma);
  Tensor k({n, n});
  for (std::size_t i = 0; i < k.size(); ++i)
    k[i] = std::exp(-d2[i] * inv);
  std::vector<double> row_mean(n, 0.0);
  double grand = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j)
      row_mean[i] += k.at(i, j);
    grand += row_mean[i];
    row_mean[i] /= static_cast<double>(n);
  }
  grand /= static_cast<double>(n * n);
  // K is symmetric so column means equal row means.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      k.at(i, j) += grand - row_mean[i] - row_mean[j];
  return k;
}

} // namespace

double median_pairwise_distance(const Tensor &x) {
  if (x.rank() != 2)
    throw ShapeError("median_pairwise_distance: expected a matrix");
  return median_of_upper(squared_distances(x));
}

double cka_rbf(const Tensor &x, const Tensor &y, const CkaOptions &options) {
  if (x.rank() != 2 || y.rank() != 2 || x.dim(0) != y.dim(0))
    throw ShapeError("cka_rbf: representations must be matrices with paired rows");
  if (x.dim(0) < 3)
    throw ConfigError("cka_rbf: need at least 3 samples");
  const Tensor kc = centered_rbf_gram(x, options);
  const Tensor lc = centered_rbf_gram(y, options);
  double kl = 0.0, kk = 0.0, ll = 0.0;
  for (std::size_t i = 0; i < kc.size(); ++i) {
    kl += kc[i] * lc[i];
    kk += kc[i] * kc[i];
    ll += lc[i] * lc[i];
  }
  const double denom = std::sqrt(kk * ll);
  if (!(denom > 0.0) || kk < 1e-300 || ll < 1e-300)
    throw NumericError("cka_rbf: zero-variance representation");
  return kl / denom;
}

std::vector<double> layer_similarity_curve(const store::FeatureStore &store,
                                           const std::string &split, TokenKind kind,
                                           std::optional<int> reference_layer,
                                           const CkaOptions &options, std::uint64_t seed,
                                           std::size_t max_rows) {
  if (kind == TokenKind::Patch)
    throw ConfigError("layer similarity is defined on CLS or AP tokens");
  const auto &meta = store.meta;
  if (!meta.token_kinds.contains(kind))
    throw ConfigError("store '" + meta.model_id + "' has no " + std::string(store::to_string(kind)) +
                      " tokens");
  const int L = meta.num_layers;
  const int ref = reference_layer.value_or(L);
  if (ref < 1 || ref > L)
    throw ConfigError("reference layer " + std::to_string(ref) + " outside [1, " +
                      std::to_string(L) + "]");
  const auto n = store.split_size(split);
  std::vector<std::size_t> rows(n);
  for (std::size_t i = 0; i < n; ++i)
    rows[i] = i;
  if (n > max_rows) {
    RngStream rng(seed, "cka-subsample");
    rng.shuffle(std::span(rows));
    rows.resize(max_rows);
    std::sort(rows.begin(), rows.end());
  }
  auto gather = [&](int layer) {
    const auto d = static_cast<std::size_t>(meta.hidden_dim(layer));
    const auto &src = store.tensor(split, kind, layer);
    Tensor x({rows.size(), d});
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t k = 0; k < d; ++k)
        x.at(i, k) = src[rows[i] * d + k];
    return x;
  };
  const Tensor reference = gather(ref);
  std::vector<double> curve;
  for (int l = 1; l <= L; ++l)
    curve.push_back(l == ref ? 1.0 : cka_rbf(gather(l), reference, options));
  return curve;
}

} // namespace layerfuse::analysis
