// SPDX-License-Identifier: Apache-2.0
#include "layerfuse/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace layerfuse::probes {

using nlohmann::json;

namespace {
constexpr char kMagic[4] = {'L', 'F', 'P', 'B'};
}

json config_to_json(const ProbeConfig &cfg) {
  json j;
  j["kind"] = to_string(cfg.kind);
  j["layers"] = cfg.layers.str();
  j["tokens"] = cfg.tokens.str();
  j["num_heads"] = cfg.num_heads ? json(*cfg.num_heads) : json("auto");
  j["attn_dropout"] = cfg.attn_dropout;
  j["d_model"] = cfg.d_model;
  j["num_classes"] = cfg.num_classes;
  j["pinned_weight_decay"] = cfg.pinned_weight_decay ? json(*cfg.pinned_weight_decay) : json(nullptr);
  j["layer_indices"] = cfg.layer_indices;
  j["num_rows"] = cfg.num_rows;
  j["heads"] = cfg.heads;
  j["heads_fallback"] = cfg.heads_fallback;
  j["num_patches"] = cfg.num_patches;
  j["label"] = cfg.label();
  return j;
}

ProbeConfig config_from_json(const json &j) {
  try {
    ProbeConfig cfg;
    cfg.kind = parse_probe_kind(j.at("kind").get<std::string>());
    cfg.layers = store::LayerScheme::parse(j.at("layers").get<std::string>());
    cfg.tokens = store::TokenSet::parse(j.at("tokens").get<std::string>());
    const auto &heads = j.at("num_heads");
    if (heads.is_number_integer())
      cfg.num_heads = heads.get<int>();
    cfg.attn_dropout = j.at("attn_dropout").get<double>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.num_classes = j.at("num_classes").get<int>();
    if (j.contains("pinned_weight_decay") && !j["pinned_weight_decay"].is_null())
      cfg.pinned_weight_decay = j["pinned_weight_decay"].get<double>();
    cfg.layer_indices = j.at("layer_indices").get<std::vector<int>>();
    cfg.num_rows = j.at("num_rows").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.heads_fallback = j.at("heads_fallback").get<bool>();
    cfg.num_patches = j.at("num_patches").get<int>();
    return cfg;
  } catch (const json::exception &e) {
    throw FormatError(std::string("malformed probe config: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path &path, const Probe &probe,
                     const json &provenance) {
  json header;
  header["config"] = config_to_json(probe.config);
  json shapes = json::array();
  for (const auto &p : parameters(probe))
    shapes.push_back({{"name", p.name}, {"shape", p.tensor->shape()}});
  header["parameters"] = std::move(shapes);
  header["param_count"] = enumerate_param_count(probe);
  header["provenance"] = provenance;
  const auto text = header.dump();

  std::string bytes(kMagic, 4);
  for (int i = 0; i < 8; ++i)
    bytes.push_back(static_cast<char>((static_cast<std::uint64_t>(text.size()) >> (8 * i)) & 0xFF));
  bytes += text;
  for (const auto &p : parameters(probe)) {
    for (double v : p.tensor->values()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i)
        bytes.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw Error("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out)
    throw Error("failed writing '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw FormatError("cannot open checkpoint '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto *raw = reinterpret_cast<const unsigned char *>(bytes.data());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError("'" + path.string() + "' is not a probe checkpoint (bad magic)");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i)
    len |= static_cast<std::uint64_t>(raw[4 + i]) << (8 * i);
  if (len > bytes.size() - 12)
    throw FormatError("'" + path.string() + "': header length exceeds file size");

  json header;
  try {
    header = json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(len));
  } catch (const json::exception &e) {
    throw FormatError("'" + path.string() + "': malformed header: " + e.what());
  }

  Checkpoint ckpt;
  ckpt.probe.config = config_from_json(header.at("config"));
  if (is_attentive(ckpt.probe.config.kind))
    ckpt.probe.weights = AttentiveProbe{};
  else
    ckpt.probe.weights = LinearProbe{};
  ckpt.provenance = header.value("provenance", json::object());

  auto params = parameters(ckpt.probe);
  const auto &declared = header.at("parameters");
  if (declared.size() != params.size())
    throw FormatError("'" + path.string() + "': parameter table does not match probe kind");
  std::size_t pos = 12 + len;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (declared[i].at("name").get<std::string>() != params[i].name)
      throw FormatError("'" + path.string() + "': unexpected parameter '" +
                        declared[i].at("name").get<std::string>() + "'");
    auto shape = declared[i].at("shape").get<std::vector<std::size_t>>();
    const auto count = Tensor::element_count(shape);
    if (bytes.size() < pos || (bytes.size() - pos) / 8 < count)
      throw FormatError("'" + path.string() + "': payload length mismatch");
    std::vector<double> values(count);
    for (std::size_t k = 0; k < count; ++k) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b)
        bits |= static_cast<std::uint64_t>(raw[pos + 8 * k + b]) << (8 * b);
      values[k] = std::bit_cast<double>(bits);
    }
    pos += 8 * count;
    *params[i].tensor = Tensor(std::move(shape), std::move(values));
  }
  if (pos != bytes.size())
    throw FormatError("'" + path.string() + "': payload length mismatch");
  return ckpt;
}

} // namespace layerfuse::probes
