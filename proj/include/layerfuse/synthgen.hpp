// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic feature stores. Class means are the first K standard
// basis vectors scaled by signal_strength; noise is i.i.d. Gaussian. Stored
// token vectors are L2-normalized.
#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <json.hpp>

#include "layerfuse/reprstore.hpp"

namespace layerfuse::synth {

struct SynthSpec {
  std::size_t n_train = 200;
  std::size_t n_val = 0;
  std::size_t n_test = 100;
  int num_layers = 4;
  std::vector<int> dims{16}; // one entry (shared) or one per layer
  int num_patches = 0;       // > 0 adds PATCH tensors for every layer
  int num_classes = 2;
  std::optional<int> planted_layer;
  std::optional<store::TokenKind> planted_kind;
  double signal_strength = 1.0;
  double noise_std = 0.1;
  double imbalance_ratio = 1.0; // majority / minority class size
  std::uint64_t seed = 0;
  std::string model_id = "synthetic";

  int dim(int layer) const;
  /// Throws ConfigError naming the offending field.
  void validate() const;
};

nlohmann::json spec_to_json(const SynthSpec &spec);
SynthSpec spec_from_json(const nlohmann::json &j);

/// Every (layer, kind) slot carries the class signal.
store::FeatureStore generate_separable(const SynthSpec &spec);
/// Only the planted (layer, kind) slot carries class signal; every other slot is
/// class-independent isotropic noise.
store::FeatureStore generate_planted(const SynthSpec &spec);
/// generate_separable with per-layer widths (spec.dims must list every layer).
store::FeatureStore generate_mixed_width(const SynthSpec &spec);

/// Per-class sample counts of one split after imbalance truncation.
std::vector<std::size_t> class_counts(std::size_t n, int num_classes, double imbalance_ratio);

} // namespace layerfuse::synth
