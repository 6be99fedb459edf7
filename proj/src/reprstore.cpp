// SPDX-License-Identifier: Apache-2.0
#include "layerfuse/reprstore.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>

#include "layerfuse/rng.hpp"

namespace layerfuse::store {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'L', 'F', 'R', '1'};

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

void put_u64_le(std::string &out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i)
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64_le(const unsigned char *p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void append_floats_le(std::string &out, const std::vector<float> &values) {
  const std::size_t start = out.size();
  out.resize(start + values.size() * sizeof(float));
  if constexpr (std::endian::native == std::endian::little) {
    if (!values.empty())
      std::memcpy(out.data() + start, values.data(), values.size() * sizeof(float));
  } else {
    for (std::size_t i = 0; i < values.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(values[i]);
      for (int b = 0; b < 4; ++b)
        out[start + 4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
    }
  }
}

std::vector<float> floats_from_le(const unsigned char *p, std::size_t count) {
  std::vector<float> values(count);
  if constexpr (std::endian::native == std::endian::little) {
    if (count)
      std::memcpy(values.data(), p, count * sizeof(float));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b)
        bits |= static_cast<std::uint32_t>(p[4 * i + b]) << (8 * b);
      values[i] = std::bit_cast<float>(bits);
    }
  }
  return values;
}

std::vector<std::string> token_kind_names(const TokenSet &kinds) {
  std::vector<std::string> names;
  for (auto kind : {TokenKind::Cls, TokenKind::Ap, TokenKind::Patch})
    if (kinds.contains(kind))
      names.emplace_back(to_string(kind));
  return names;
}

std::vector<std::size_t> tensor_shape(const StoreMeta &meta, const TensorKey &key) {
  const auto n = meta.split_sizes.at(key.split);
  const auto d = static_cast<std::size_t>(meta.hidden_dim(key.layer));
  if (key.kind == TokenKind::Patch)
    return {n, static_cast<std::size_t>(meta.num_patches), d};
  return {n, d};
}

json meta_to_json(const FeatureStore &store) {
  const auto &meta = store.meta;
  json j;
  j["format_version"] = meta.format_version;
  j["model_id"] = meta.model_id;
  j["num_layers"] = meta.num_layers;
  j["hidden_dims"] = meta.hidden_dims;
  j["num_patches"] = meta.num_patches;
  j["token_kinds"] = token_kind_names(meta.token_kinds);
  j["num_classes"] = meta.num_classes;
  j["class_names"] = meta.class_names;
  j["extraction_point"] = meta.extraction_point;
  j["endianness"] = "little";
  j["dtype"] = "float32";
  json splits = json::array();
  for (const auto &[name, size] : meta.split_sizes) {
    const auto it = store.labels.find(name);
    splits.push_back({{"name", name},
                      {"size", size},
                      {"labels", it == store.labels.end() ? std::vector<std::int32_t>{} : it->second}});
  }
  j["splits"] = std::move(splits);
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const auto &[key, values] : store.tensors) {
    const auto nbytes = tensor_nbytes(meta, key);
    tensors.push_back({{"split", key.split},
                       {"layer", key.layer},
                       {"kind", to_string(key.kind)},
                       {"shape", tensor_shape(meta, key)},
                       {"offset", offset},
                       {"nbytes", nbytes}});
    offset += nbytes;
  }
  j["tensors"] = std::move(tensors);
  return j;
}

} // namespace

std::string_view to_string(TokenKind kind) {
  switch (kind) {
  case TokenKind::Cls:
    return "CLS";
  case TokenKind::Ap:
    return "AP";
  case TokenKind::Patch:
    return "PATCH";
  }
  return "?";
}

TokenKind parse_token_kind(std::string_view text) {
  const auto t = lower(text);
  if (t == "cls")
    return TokenKind::Cls;
  if (t == "ap" || t == "avg")
    return TokenKind::Ap;
  if (t == "patch")
    return TokenKind::Patch;
  throw ConfigError("unknown token kind '" + std::string(text) + "' (expected cls, ap or patch)");
}

bool TokenSet::contains(TokenKind kind) const {
  switch (kind) {
  case TokenKind::Cls:
    return cls;
  case TokenKind::Ap:
    return ap;
  case TokenKind::Patch:
    return patch;
  }
  return false;
}

std::string TokenSet::str() const {
  std::string out;
  for (auto kind : {TokenKind::Cls, TokenKind::Ap, TokenKind::Patch}) {
    if (!contains(kind))
      continue;
    if (!out.empty())
      out += "+";
    out += lower(to_string(kind));
  }
  return out;
}

TokenSet TokenSet::parse(std::string_view text) {
  TokenSet set;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = text.find_first_of("+,", start);
    const auto part = text.substr(start, end == std::string_view::npos ? text.npos : end - start);
    if (!part.empty()) {
      switch (parse_token_kind(part)) {
      case TokenKind::Cls:
        set.cls = true;
        break;
      case TokenKind::Ap:
        set.ap = true;
        break;
      case TokenKind::Patch:
        set.patch = true;
        break;
      }
    }
    if (end == std::string_view::npos)
      break;
    start = end + 1;
  }
  if (!set.cls && !set.ap && !set.patch)
    throw ConfigError("empty token set '" + std::string(text) + "'");
  return set;
}

LayerScheme LayerScheme::parse(std::string_view text) {
  const auto t = lower(text);
  if (t == "last")
    return last();
  if (t == "mid+last" || t == "mid_plus_last")
    return mid_plus_last();
  if (t == "quarterly")
    return quarterly();
  if (t == "all")
    return all();
  std::vector<int> layers;
  std::size_t start = 0;
  while (start < t.size()) {
    auto end = t.find(',', start);
    if (end == std::string::npos)
      end = t.size();
    int value = 0;
    const auto *first = t.data() + start;
    const auto *last = t.data() + end;
    const auto res = std::from_chars(first, last, value);
    if (res.ec != std::errc() || res.ptr != last)
      throw ConfigError("invalid layer scheme '" + std::string(text) +
                        "' (expected last, mid+last, quarterly, all or a comma list)");
    layers.push_back(value);
    start = end + 1;
  }
  if (layers.empty())
    throw ConfigError("empty layer list");
  return of(std::move(layers));
}

std::string LayerScheme::str() const {
  switch (kind) {
  case Kind::Last:
    return "last";
  case Kind::MidPlusLast:
    return "mid+last";
  case Kind::Quarterly:
    return "quarterly";
  case Kind::All:
    return "all";
  case Kind::Custom: {
    std::string out;
    for (std::size_t i = 0; i < custom.size(); ++i) {
      if (i)
        out += ",";
      out += std::to_string(custom[i]);
    }
    return out;
  }
  }
  return "?";
}

std::string RowTag::str() const {
  std::string out(to_string(kind));
  if (kind == TokenKind::Patch)
    out += "[" + std::to_string(patch) + "]";
  return out + "@" + std::to_string(layer);
}

std::size_t FeatureStore::split_size(const std::string &split) const {
  const auto it = meta.split_sizes.find(split);
  if (it == meta.split_sizes.end())
    throw ConfigError("store '" + meta.model_id + "' has no split '" + split + "'");
  return it->second;
}

bool FeatureStore::has_tensor(const std::string &split, TokenKind kind, int layer) const {
  return tensors.contains(TensorKey{split, kind, layer});
}

const std::vector<float> &FeatureStore::tensor(const std::string &split, TokenKind kind,
                                               int layer) const {
  const auto it = tensors.find(TensorKey{split, kind, layer});
  if (it == tensors.end())
    throw ConfigError("store '" + meta.model_id + "' has no " + std::string(to_string(kind)) +
                      " tensor for layer " + std::to_string(layer) + " in split '" + split + "'");
  return it->second;
}

std::vector<int> FeatureStore::patch_layers(const std::string &split) const {
  std::vector<int> layers;
  for (const auto &[key, values] : tensors)
    if (key.split == split && key.kind == TokenKind::Patch)
      layers.push_back(key.layer);
  return layers;
}

std::size_t tensor_nbytes(const StoreMeta &meta, const TensorKey &key) {
  return Tensor::element_count(tensor_shape(meta, key)) * sizeof(float);
}

void FeatureStore::validate() const {
  const int L = meta.num_layers;
  if (L < 1)
    throw FormatError("num_layers must be >= 1, got " + std::to_string(L));
  if (static_cast<int>(meta.hidden_dims.size()) != L)
    throw FormatError("hidden_dims has " + std::to_string(meta.hidden_dims.size()) +
                      " entries but num_layers is " + std::to_string(L));
  for (int d : meta.hidden_dims)
    if (d < 1)
      throw FormatError("every hidden dimension must be >= 1");
  if (meta.token_kinds.patch && meta.num_patches < 1)
    throw FormatError("PATCH tokens declared but num_patches is " +
                      std::to_string(meta.num_patches));
  if (meta.num_patches < 0)
    throw FormatError("num_patches must be >= 0");
  if (meta.num_classes < 1)
    throw FormatError("num_classes must be >= 1");
  if (static_cast<int>(meta.class_names.size()) != meta.num_classes)
    throw FormatError("class_names has " + std::to_string(meta.class_names.size()) +
                      " entries but num_classes is " + std::to_string(meta.num_classes));

  for (const auto &[split, size] : meta.split_sizes) {
    const auto it = labels.find(split);
    if (it == labels.end())
      throw FormatError("split '" + split + "' has no labels");
    if (it->second.size() != size)
      throw FormatError("split '" + split + "' declares " + std::to_string(size) +
                        " samples but has " + std::to_string(it->second.size()) + " labels");
    for (std::size_t i = 0; i < it->second.size(); ++i) {
      const auto y = it->second[i];
      if (y < 0 || y >= meta.num_classes)
        throw FormatError("label " + std::to_string(y) + " out of range [0, " +
                          std::to_string(meta.num_classes) + ") in split '" + split +
                          "' at index " + std::to_string(i));
    }
    for (auto kind : {TokenKind::Cls, TokenKind::Ap}) {
      if (!meta.token_kinds.contains(kind))
        continue;
      for (int layer = 1; layer <= L; ++layer)
        if (!has_tensor(split, kind, layer))
          throw FormatError("missing " + std::string(to_string(kind)) + " tensor for layer " +
                            std::to_string(layer) + " in split '" + split + "'");
    }
  }
  for (const auto &[split, _] : labels)
    if (!meta.split_sizes.contains(split))
      throw FormatError("labels given for undeclared split '" + split + "'");

  for (const auto &[key, values] : tensors) {
    if (!meta.split_sizes.contains(key.split))
      throw FormatError("tensor for undeclared split '" + key.split + "'");
    if (key.layer < 1 || key.layer > L)
      throw FormatError("tensor layer " + std::to_string(key.layer) + " outside [1, " +
                        std::to_string(L) + "]");
    if (!meta.token_kinds.contains(key.kind))
      throw FormatError("tensor of undeclared kind " + std::string(to_string(key.kind)));
    const auto expected = tensor_nbytes(meta, key) / sizeof(float);
    if (values.size() != expected)
      throw FormatError("tensor " + std::string(to_string(key.kind)) + "@" +
                        std::to_string(key.layer) + " in split '" + key.split + "' has " +
                        std::to_string(values.size()) + " values, expected " +
                        std::to_string(expected));
  }
}

void write_store(const FeatureStore &store, const std::filesystem::path &path) {
  store.validate();
  const auto meta_text = meta_to_json(store).dump();
  std::string bytes(kMagic, 4);
  put_u64_le(bytes, meta_text.size());
  bytes += meta_text;
  for (const auto &[key, values] : store.tensors)
    append_floats_le(bytes, values);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw Error("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out)
    throw Error("failed writing '" + path.string() + "'");
}

FeatureStore read_store(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw FormatError("cannot open feature store '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto *raw = reinterpret_cast<const unsigned char *>(bytes.data());

  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw FormatError("'" + path.string() + "' is not a feature store (bad magic)");
  const auto meta_len = get_u64_le(raw + 4);
  if (meta_len > bytes.size() - 12)
    throw FormatError("'" + path.string() + "': header length exceeds file size");

  json j;
  try {
    j = json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(meta_len));
  } catch (const json::exception &e) {
    throw FormatError("'" + path.string() + "': malformed metadata: " + e.what());
  }

  FeatureStore store;
  auto &meta = store.meta;
  try {
    meta.format_version = j.at("format_version").get<int>();
    if (meta.format_version != kFormatVersion)
      throw FormatError("'" + path.string() + "': version mismatch (file has " +
                        std::to_string(meta.format_version) + ", reader supports " +
                        std::to_string(kFormatVersion) + ")");
    meta.model_id = j.at("model_id").get<std::string>();
    meta.num_layers = j.at("num_layers").get<int>();
    meta.hidden_dims = j.at("hidden_dims").get<std::vector<int>>();
    meta.num_patches = j.at("num_patches").get<int>();
    for (const auto &name : j.at("token_kinds")) {
      switch (parse_token_kind(name.get<std::string>())) {
      case TokenKind::Cls:
        meta.token_kinds.cls = true;
        break;
      case TokenKind::Ap:
        meta.token_kinds.ap = true;
        break;
      case TokenKind::Patch:
        meta.token_kinds.patch = true;
        break;
      }
    }
    meta.num_classes = j.at("num_classes").get<int>();
    meta.class_names = j.at("class_names").get<std::vector<std::string>>();
    if (j.contains("extraction_point"))
      meta.extraction_point = j["extraction_point"].get<std::string>();
    for (const auto &split : j.at("splits")) {
      const auto name = split.at("name").get<std::string>();
      meta.split_sizes[name] = split.at("size").get<std::size_t>();
      store.labels[name] = split.at("labels").get<std::vector<std::int32_t>>();
    }

    const std::size_t payload_start = 12 + meta_len;
    const std::size_t payload_size = bytes.size() - payload_start;
    std::size_t declared = 0;
    for (const auto &t : j.at("tensors")) {
      TensorKey key{t.at("split").get<std::string>(),
                    parse_token_kind(t.at("kind").get<std::string>()), t.at("layer").get<int>()};
      if (!meta.split_sizes.contains(key.split) || key.layer < 1 || key.layer > meta.num_layers ||
          static_cast<int>(meta.hidden_dims.size()) != meta.num_layers)
        throw FormatError("'" + path.string() + "': tensor table entry does not match meta");
      const auto offset = t.at("offset").get<std::size_t>();
      const auto nbytes = t.at("nbytes").get<std::size_t>();
      if (nbytes != tensor_nbytes(meta, key) || offset > payload_size ||
          nbytes > payload_size - offset)
        throw FormatError("'" + path.string() + "': payload length mismatch for " +
                          std::string(to_string(key.kind)) + "@" + std::to_string(key.layer) +
                          " in split '" + key.split + "'");
      store.tensors[key] = floats_from_le(raw + payload_start + offset, nbytes / sizeof(float));
      declared += nbytes;
    }
    if (declared != payload_size)
      throw FormatError("'" + path.string() + "': payload length mismatch (declared " +
                        std::to_string(declared) + " bytes, found " +
                        std::to_string(payload_size) + ")");
  } catch (const json::exception &e) {
    throw FormatError("'" + path.string() + "': malformed metadata: " + e.what());
  } catch (const ConfigError &e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }

  store.validate();
  return store;
}

std::vector<double> l2_normalize(std::span<const double> v) {
  double sq = 0.0;
  for (double x : v) {
    if (!std::isfinite(x))
      throw NumericError("l2_normalize: non-finite entry");
    sq += x * x;
  }
  std::vector<double> out(v.begin(), v.end());
  const double norm = std::sqrt(sq);
  if (norm > kNormEpsilon)
    for (double &x : out)
      x /= norm;
  return out;
}

void l2_normalize_inplace(std::span<float> v) {
  double sq = 0.0;
  for (float x : v) {
    if (!std::isfinite(x))
      throw NumericError("l2_normalize: non-finite entry");
    sq += double(x) * double(x);
  }
  const double norm = std::sqrt(sq);
  if (norm > kNormEpsilon)
    for (float &x : v)
      x = static_cast<float>(double(x) / norm);
}

void normalize_store(FeatureStore &store) {
  for (auto &[key, values] : store.tensors) {
    const auto d = static_cast<std::size_t>(store.meta.hidden_dim(key.layer));
    for (std::size_t off = 0; off + d <= values.size(); off += d)
      l2_normalize_inplace(std::span<float>(values).subspan(off, d));
  }
}

std::vector<double> pad_to_width(std::span<const double> v, std::size_t width) {
  if (v.size() > width)
    throw ShapeError("pad_to_width: vector of length " + std::to_string(v.size()) +
                     " exceeds target width " + std::to_string(width));
  std::vector<double> out(width, 0.0);
  std::copy(v.begin(), v.end(), out.begin());
  return out;
}

SplitIndices stratified_split(std::span<const std::int32_t> labels, double val_fraction,
                              std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0))
    throw ConfigError("val_fraction must lie in (0, 1)");
  std::map<std::int32_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i)
    by_class[labels[i]].push_back(i);

  RngStream rng(seed, "stratified-split");
  SplitIndices out;
  for (auto &[label, members] : by_class) {
    auto stream = rng.fork("class-" + std::to_string(label));
    stream.shuffle(std::span<std::size_t>(members));
    const auto n = members.size();
    std::size_t n_val = 0;
    if (n >= 2) {
      n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * val_fraction));
      n_val = std::clamp<std::size_t>(n_val, 1, n - 1);
    }
    out.val.insert(out.val.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(n_val));
    out.train.insert(out.train.end(), members.begin() + static_cast<std::ptrdiff_t>(n_val), members.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  return out;
}

std::vector<int> resolve_layers(int num_layers, const LayerScheme &scheme) {
  if (num_layers < 1)
    throw ConfigError("resolve_layers: num_layers must be >= 1");
  const int L = num_layers;
  std::set<int> chosen;
  switch (scheme.kind) {
  case LayerScheme::Kind::Last:
    chosen = {L};
    break;
  case LayerScheme::Kind::MidPlusLast:
    chosen = {(L + 1) / 2, L};
    break;
  case LayerScheme::Kind::Quarterly:
    // round(L * q / 4) with halves rounded up; clamped to layer 1 for tiny L.
    for (int q = 1; q <= 4; ++q)
      chosen.insert(std::max(1, (2 * L * q + 4) / 8));
    break;
  case LayerScheme::Kind::All:
    for (int l = 1; l <= L; ++l)
      chosen.insert(l);
    break;
  case LayerScheme::Kind::Custom:
    if (scheme.custom.empty())
      throw ConfigError("custom layer list is empty");
    for (int l : scheme.custom) {
      if (l < 1 || l > L)
        throw ConfigError("layer index " + std::to_string(l) + " outside [1, " +
                          std::to_string(L) + "]");
      chosen.insert(l);
    }
    break;
  }
  return {chosen.begin(), chosen.end()};
}

int max_width(const StoreMeta &meta, std::span<const int> layers) {
  int width = 0;
  for (int l : layers)
    width = std::max(width, meta.hidden_dim(l));
  return width;
}

std::vector<RowTag> row_layout(const StoreMeta &meta, std::span<const int> layers, TokenSet tokens) {
  std::vector<RowTag> rows;
  if (tokens.patch) {
    for (int l : layers) {
      if (tokens.cls)
        rows.push_back({l, TokenKind::Cls});
      for (int p = 0; p < meta.num_patches; ++p)
        rows.push_back({l, TokenKind::Patch, p});
    }
    return rows;
  }
  for (auto kind : {TokenKind::Cls, TokenKind::Ap}) {
    if (!tokens.contains(kind))
      continue;
    for (int l : layers)
      rows.push_back({l, kind});
  }
  return rows;
}

StackedBatch assemble_batch(const FeatureStore &store, const std::string &split,
                            std::span<const std::size_t> indices, std::span<const int> layers,
                            TokenSet tokens) {
  const auto &meta = store.meta;
  const auto n_split = store.split_size(split);
  if (layers.empty())
    throw ConfigError("assemble_batch: no layers selected");
  for (auto kind : {TokenKind::Cls, TokenKind::Ap, TokenKind::Patch})
    if (tokens.contains(kind) && !meta.token_kinds.contains(kind))
      throw ConfigError("store '" + meta.model_id + "' has no " + std::string(to_string(kind)) +
                        " tokens");
  if (tokens.patch)
    for (int l : layers)
      if (!store.has_tensor(split, TokenKind::Patch, l))
        throw ConfigError("store '" + meta.model_id + "' has no PATCH tensor for layer " +
                          std::to_string(l) + " in split '" + split + "'");
  for (auto i : indices)
    if (i >= n_split)
      throw ConfigError("sample index " + std::to_string(i) + " outside split '" + split +
                        "' of size " + std::to_string(n_split));

  const auto rows = row_layout(meta, layers, tokens);
  const auto width = static_cast<std::size_t>(max_width(meta, layers));
  const auto B = indices.size();
  const auto R = rows.size();

  StackedBatch batch;
  batch.h = Tensor({B, R, width});
  batch.rows = rows;
  batch.labels.reserve(B);
  const auto &split_labels = store.labels.at(split);

  std::vector<double> buffer;
  for (std::size_t b = 0; b < B; ++b) {
    const auto sample = indices[b];
    batch.labels.push_back(split_labels[sample]);
    for (std::size_t r = 0; r < R; ++r) {
      const auto &tag = rows[r];
      const auto d = static_cast<std::size_t>(meta.hidden_dim(tag.layer));
      const auto &src = store.tensor(split, tag.kind, tag.layer);
      const std::size_t offset =
          tag.kind == TokenKind::Patch
              ? (sample * static_cast<std::size_t>(meta.num_patches) + static_cast<std::size_t>(tag.patch)) * d
              : sample * d;
      buffer.assign(src.begin() + static_cast<std::ptrdiff_t>(offset),
                    src.begin() + static_cast<std::ptrdiff_t>(offset + d));
      const auto unit = pad_to_width(l2_normalize(buffer), width);
      std::copy(unit.begin(), unit.end(), &batch.h.at(b, r, 0));
    }
  }
  return batch;
}

} // namespace layerfuse::store
