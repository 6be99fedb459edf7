// SPDX-License-Identifier: Apache-2.0
//
// Feature-store container (.lfr) and feature preparation: normalization,
// zero-padding, layer-subset selection, stratified splitting and assembly of
// the stacked per-layer representation matrix fed to the probes.
//
// File layout:
//   "LFR1" | u64 little-endian JSON length | JSON meta | raw float32 LE payloads
// Payload offsets in the meta's "tensors" table are relative to the first byte
// after the JSON. Tensors are laid out split by split (sorted by name), then by
// token kind (CLS, AP, PATCH), then by ascending layer.
#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "layerfuse/tensor.hpp"

namespace layerfuse::store {

inline constexpr int kFormatVersion = 1;
inline constexpr double kNormEpsilon = 1e-12;

enum class TokenKind { Cls = 0, Ap = 1, Patch = 2 };

std::string_view to_string(TokenKind kind);
TokenKind parse_token_kind(std::string_view text);

/// Subset of {CLS, AP, PATCH}.
struct TokenSet {
  bool cls = false;
  bool ap = false;
  bool patch = false;

  bool contains(TokenKind kind) const;
  /// Number of selected summary kinds (CLS/AP).
  int summary_count() const { return int(cls) + int(ap); }
  /// "cls+ap" style, lower case, canonical order.
  std::string str() const;
  static TokenSet parse(std::string_view text);
  bool operator==(const TokenSet &) const = default;
};

struct LayerScheme {
  enum class Kind { Last, MidPlusLast, Quarterly, All, Custom };
  Kind kind = Kind::All;
  std::vector<int> custom; // 1-based, only for Custom

  static LayerScheme last() { return {Kind::Last, {}}; }
  static LayerScheme mid_plus_last() { return {Kind::MidPlusLast, {}}; }
  static LayerScheme quarterly() { return {Kind::Quarterly, {}}; }
  static LayerScheme all() { return {Kind::All, {}}; }
  static LayerScheme of(std::vector<int> layers) { return {Kind::Custom, std::move(layers)}; }

  /// "last", "mid+last", "quarterly", "all", or a comma list such as "3,6,9".
  static LayerScheme parse(std::string_view text);
  std::string str() const;
  bool operator==(const LayerScheme &) const = default;
};

struct StoreMeta {
  int format_version = kFormatVersion;
  std::string model_id;
  int num_layers = 0;
  std::vector<int> hidden_dims;
  int num_patches = 0;
  TokenSet token_kinds;
  int num_classes = 0;
  std::vector<std::string> class_names;
  std::map<std::string, std::size_t> split_sizes;
  std::string extraction_point = "after the second layer normalization";

  int hidden_dim(int layer) const { return hidden_dims.at(static_cast<std::size_t>(layer - 1)); }
  bool operator==(const StoreMeta &) const = default;
};

struct TensorKey {
  std::string split;
  TokenKind kind;
  int layer; // 1-based

  auto operator<=>(const TensorKey &) const = default;
};

/// Per-layer, per-token-kind features plus labels for one model/dataset pair.
/// CLS/AP tensors are [N x d_l]; PATCH tensors are [N x P x d_l] and may be
/// present for a subset of layers only.
struct FeatureStore {
  StoreMeta meta;
  std::map<std::string, std::vector<std::int32_t>> labels;
  std::map<TensorKey, std::vector<float>> tensors;

  std::size_t split_size(const std::string &split) const;
  bool has_tensor(const std::string &split, TokenKind kind, int layer) const;
  const std::vector<float> &tensor(const std::string &split, TokenKind kind, int layer) const;
  /// Layers (ascending) that carry PATCH tensors for the given split.
  std::vector<int> patch_layers(const std::string &split) const;
  /// Throws FormatError describing the first violated invariant.
  void validate() const;

  bool operator==(const FeatureStore &) const = default;
};

/// Bytes a (split, kind, layer) tensor occupies on disk.
std::size_t tensor_nbytes(const StoreMeta &meta, const TensorKey &key);

void write_store(const FeatureStore &store, const std::filesystem::path &path);
FeatureStore read_store(const std::filesystem::path &path);

/// Normalize a vector to unit Euclidean norm; vectors with norm <= 1e-12 are returned unchanged.
std::vector<double> l2_normalize(std::span<const double> v);
/// In-place float variant used on stored tensors.
void l2_normalize_inplace(std::span<float> v);
/// L2-normalize every token vector of every tensor in the store.
void normalize_store(FeatureStore &store);

/// Append zeros up to width; the first v.size() entries are preserved.
std::vector<double> pad_to_width(std::span<const double> v, std::size_t width);

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Class-stratified split; per class, round(n_c * val_fraction) samples go to
/// validation, clamped to [1, n_c - 1] for n_c >= 2 (singletons stay in train).
SplitIndices stratified_split(std::span<const std::int32_t> labels, double val_fraction,
                              std::uint64_t seed);

std::vector<int> resolve_layers(int num_layers, const LayerScheme &scheme);

struct RowTag {
  int layer;
  TokenKind kind;
  int patch = -1; // patch index for PATCH rows

  std::string str() const;
  bool operator==(const RowTag &) const = default;
};

/// Stacked representations for a batch: h is [B x R x d_max].
struct StackedBatch {
  Tensor h;
  std::vector<RowTag> rows;
  std::vector<std::int32_t> labels;

  std::size_t batch() const { return h.dim(0); }
  std::size_t num_rows() const { return h.dim(1); }
  std::size_t width() const { return h.dim(2); }
};

/// Row layout a probe expects; computed without touching feature data.
std::vector<RowTag> row_layout(const StoreMeta &meta, std::span<const int> layers, TokenSet tokens);

/// Assemble the stacked matrix for the given samples. With PATCH in `tokens`,
/// each selected layer contributes its CLS row (if requested) followed by all
/// of its patch rows. Otherwise all CLS rows come first in ascending layer
/// order, then all AP rows. Each row is L2-normalized at native width, then
/// zero-padded to the widest selected layer.
StackedBatch assemble_batch(const FeatureStore &store, const std::string &split,
                            std::span<const std::size_t> indices, std::span<const int> layers,
                            TokenSet tokens);

/// Widest hidden dimension among the given layers.
int max_width(const StoreMeta &meta, std::span<const int> layers);

} // namespace layerfuse::store
