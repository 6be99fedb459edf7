// SPDX-License-Identifier: Apache-2.0
#include "layerfuse/synthgen.hpp"

#include <algorithm>
#include <cmath>

#include "layerfuse/rng.hpp"

namespace layerfuse::synth {

using store::TokenKind;

int SynthSpec::dim(int layer) const {
  return dims.size() == 1 ? dims.front() : dims.at(static_cast<std::size_t>(layer - 1));
}

void SynthSpec::validate() const {
  if (num_layers < 1)
    throw ConfigError("num_layers must be >= 1");
  if (dims.empty() || (dims.size() != 1 && static_cast<int>(dims.size()) != num_layers))
    throw ConfigError("dims must hold one shared width or one width per layer (" +
                      std::to_string(num_layers) + ")");
  for (int d : dims)
    if (d < 1)
      throw ConfigError("dims entries must be >= 1");
  if (num_patches < 0)
    throw ConfigError("num_patches must be >= 0");
  if (num_classes < 1)
    throw ConfigError("num_classes must be >= 1");
  for (int l = 1; l <= num_layers; ++l)
    if (num_classes > dim(l))
      throw ConfigError("num_classes (" + std::to_string(num_classes) +
                        ") exceeds the width of layer " + std::to_string(l) + " (" +
                        std::to_string(dim(l)) + "); class means need K <= d");
  if (planted_layer && (*planted_layer < 1 || *planted_layer > num_layers))
    throw ConfigError("planted_layer " + std::to_string(*planted_layer) + " outside [1, " +
                      std::to_string(num_layers) + "]");
  if (planted_kind && *planted_kind == TokenKind::Patch && num_patches < 1)
    throw ConfigError("planted_kind patch requires num_patches > 0");
  if (signal_strength < 0.0 || noise_std < 0.0)
    throw ConfigError("signal_strength and noise_std must be non-negative");
  if (!(imbalance_ratio >= 1.0))
    throw ConfigError("imbalance_ratio must be >= 1");
  if (n_train < 1)
    throw ConfigError("n_train must be >= 1");
  for (auto n : {n_train, n_val, n_test})
    if (n > 0 && n < static_cast<std::size_t>(num_classes))
      throw ConfigError("every non-empty split needs at least num_classes samples");
}

nlohmann::json spec_to_json(const SynthSpec &spec) {
  nlohmann::json j{{"n_train", spec.n_train},
                   {"n_val", spec.n_val},
                   {"n_test", spec.n_test},
                   {"num_layers", spec.num_layers},
                   {"dims", spec.dims},
                   {"num_patches", spec.num_patches},
                   {"num_classes", spec.num_classes},
                   {"signal_strength", spec.signal_strength},
                   {"noise_std", spec.noise_std},
                   {"imbalance_ratio", spec.imbalance_ratio},
                   {"seed", spec.seed},
                   {"model_id", spec.model_id}};
  j["planted_layer"] = spec.planted_layer ? nlohmann::json(*spec.planted_layer) : nlohmann::json();
  j["planted_kind"] = spec.planted_kind ? nlohmann::json(std::string(store::to_string(*spec.planted_kind)))
                                        : nlohmann::json();
  return j;
}

SynthSpec spec_from_json(const nlohmann::json &j) {
  SynthSpec s;
  try {
    s.n_train = j.value("n_train", s.n_train);
    s.n_val = j.value("n_val", s.n_val);
    s.n_test = j.value("n_test", s.n_test);
    s.num_layers = j.value("num_layers", s.num_layers);
    s.dims = j.value("dims", s.dims);
    s.num_patches = j.value("num_patches", s.num_patches);
    s.num_classes = j.value("num_classes", s.num_classes);
    s.signal_strength = j.value("signal_strength", s.signal_strength);
    s.noise_std = j.value("noise_std", s.noise_std);
    s.imbalance_ratio = j.value("imbalance_ratio", s.imbalance_ratio);
    s.seed = j.value("seed", s.seed);
    s.model_id = j.value("model_id", s.model_id);
    if (j.contains("planted_layer") && !j["planted_layer"].is_null())
      s.planted_layer = j["planted_layer"].get<int>();
    if (j.contains("planted_kind") && !j["planted_kind"].is_null())
      s.planted_kind = store::parse_token_kind(j["planted_kind"].get<std::string>());
  } catch (const nlohmann::json::exception &e) {
    throw ConfigError(std::string("invalid synth spec: ") + e.what());
  }
  return s;
}

std::vector<std::size_t> class_counts(std::size_t n, int num_classes, double imbalance_ratio) {
  const auto K = static_cast<std::size_t>(num_classes);
  std::vector<std::size_t> counts(K);
  for (std::size_t c = 0; c < K; ++c) {
    const std::size_t base = n / K + (c < n % K ? 1 : 0);
    const double frac = K > 1 ? static_cast<double>(c) / static_cast<double>(K - 1) : 0.0;
    const auto kept = static_cast<std::size_t>(
        std::llround(static_cast<double>(base) * std::pow(imbalance_ratio, -frac)));
    counts[c] = std::clamp<std::size_t>(kept, base > 0 ? 1 : 0, base);
  }
  return counts;
}

namespace {

enum class Mode { Separable, Planted };

struct SlotWriter {
  const SynthSpec &spec;
  Mode mode;

  bool carries_signal(int layer, TokenKind kind) const {
    if (mode == Mode::Separable)
      return true;
    return *spec.planted_layer == layer && *spec.planted_kind == kind;
  }

  void draw(std::vector<float> &dst, std::size_t offset, int d, int label, bool signal,
            RngStream &rng) const {
    std::vector<double> v(static_cast<std::size_t>(d));
    for (int k = 0; k < d; ++k) {
      if (signal)
        v[static_cast<std::size_t>(k)] =
            (k == label ? spec.signal_strength : 0.0) + spec.noise_std * rng.normal();
      else
        v[static_cast<std::size_t>(k)] = rng.normal();
    }
    const auto unit = store::l2_normalize(v);
    for (int k = 0; k < d; ++k)
      dst[offset + static_cast<std::size_t>(k)] = static_cast<float>(unit[static_cast<std::size_t>(k)]);
  }
};

store::FeatureStore generate(const SynthSpec &spec, Mode mode) {
  spec.validate();
  if (mode == Mode::Planted && (!spec.planted_layer || !spec.planted_kind))
    throw ConfigError("planted generator needs planted_layer and planted_kind");

  store::FeatureStore fs;
  auto &meta = fs.meta;
  meta.model_id = spec.model_id;
  meta.num_layers = spec.num_layers;
  for (int l = 1; l <= spec.num_layers; ++l)
    meta.hidden_dims.push_back(spec.dim(l));
  meta.num_patches = spec.num_patches;
  meta.token_kinds = {true, true, spec.num_patches > 0};
  meta.num_classes = spec.num_classes;
  for (int c = 0; c < spec.num_classes; ++c)
    meta.class_names.push_back("class_" + std::to_string(c));

  const SlotWriter writer{spec, mode};
  const RngStream root(spec.seed, mode == Mode::Separable ? "synth-separable" : "synth-planted");
  const std::pair<const char *, std::size_t> splits[] = {
      {"train", spec.n_train}, {"val", spec.n_val}, {"test", spec.n_test}};
  for (const auto &[name, n] : splits) {
    if (n == 0)
      continue;
    const auto counts = class_counts(n, spec.num_classes, spec.imbalance_ratio);
    std::vector<std::int32_t> labels;
    std::vector<std::size_t> seen(counts.size(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = i % counts.size();
      if (seen[c]++ < counts[c])
        labels.push_back(static_cast<std::int32_t>(c));
    }
    const auto N = labels.size();
    meta.split_sizes[name] = N;
    fs.labels[name] = labels;

    RngStream rng = root.fork(name);
    std::vector<TokenKind> kinds{TokenKind::Cls, TokenKind::Ap};
    if (spec.num_patches > 0)
      kinds.push_back(TokenKind::Patch);
    for (auto kind : kinds) {
      for (int l = 1; l <= spec.num_layers; ++l) {
        const int d = spec.dim(l);
        const std::size_t per_sample =
            static_cast<std::size_t>(d) * (kind == TokenKind::Patch ? static_cast<std::size_t>(spec.num_patches) : 1);
        std::vector<float> values(N * per_sample);
        RngStream slot = rng.fork(std::string(store::to_string(kind)) + "@" + std::to_string(l));
        const bool signal = writer.carries_signal(l, kind);
        for (std::size_t i = 0; i < N; ++i)
          for (std::size_t off = 0; off < per_sample; off += static_cast<std::size_t>(d))
            writer.draw(values, i * per_sample + off, d, labels[i], signal, slot);
        fs.tensors[{name, kind, l}] = std::move(values);
      }
    }
  }
  fs.validate();
  return fs;
}

} // namespace

store::FeatureStore generate_separable(const SynthSpec &spec) { return generate(spec, Mode::Separable); }

store::FeatureStore generate_planted(const SynthSpec &spec) { return generate(spec, Mode::Planted); }

store::FeatureStore generate_mixed_width(const SynthSpec &spec) {
  if (static_cast<int>(spec.dims.size()) != spec.num_layers)
    throw ConfigError("mixed-width generator needs one width per layer (got " +
                      std::to_string(spec.dims.size()) + " for " +
                      std::to_string(spec.num_layers) + " layers)");
  return generate(spec, Mode::Separable);
}

} // namespace layerfuse::synth
