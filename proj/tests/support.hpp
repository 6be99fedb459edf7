// SPDX-License-Identifier: Apache-2.0
// Shared test fixtures.
#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <unistd.h>

#include "layerfuse/rng.hpp"
#include "layerfuse/tensor.hpp"

namespace testing {

/// Fresh per-process scratch directory, removed on destruction.
class ScratchDir {
public:
  explicit ScratchDir(const std::string &name)
      : path_(std::filesystem::temp_directory_path() /
              ("layerfuse_" + name + "_" + std::to_string(::getpid()))) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir &) = delete;
  ScratchDir &operator=(const ScratchDir &) = delete;

  const std::filesystem::path &path() const { return path_; }
  std::filesystem::path operator/(const std::string &child) const { return path_ / child; }

private:
  std::filesystem::path path_;
};

inline std::vector<char> read_bytes(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path &path, const std::vector<char> &bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::string read_text(const std::filesystem::path &path) {
  const auto b = read_bytes(path);
  return {b.begin(), b.end()};
}

inline layerfuse::Tensor random_tensor(std::vector<std::size_t> shape, layerfuse::RngStream &rng,
                                       double scale = 1.0) {
  layerfuse::Tensor t(std::move(shape));
  for (auto &v : t.values())
    v = scale * rng.normal();
  return t;
}

inline double max_abs_diff(const layerfuse::Tensor &a, const layerfuse::Tensor &b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

} // namespace testing
