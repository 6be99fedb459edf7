// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string_view>

namespace layerfuse {

/// Deterministic counter-based random stream.
///
/// Every draw is a pure function of (key, counter): the key is derived from the
/// run seed and a purpose label (FNV-1a 64 of the label mixed with the seed), and
/// draw n returns splitmix64(key + n * 0x9E3779B97F4A7C15). Normals use the
/// Box-Muller cosine branch on two consecutive uniforms. No standard-library
/// distribution is involved, so draws are identical across platforms and
/// standard-library implementations (up to libm's log/cos/sqrt).
///
/// A stream is a small value; copying it snapshots its position, which is how
/// callers replay identical dropout masks.
class RngStream {
public:
  RngStream(std::uint64_t seed, std::string_view purpose);

  /// Independent child stream; does not advance this one.
  RngStream fork(std::string_view label) const;

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Standard normal.
  double normal();
  bool bernoulli(double p) { return uniform() < p; }
  /// Uniform integer in [0, n), rejection-sampled so it is unbiased.
  std::uint64_t below(std::uint64_t n);

  template <typename T> void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

private:
  RngStream(std::uint64_t key, std::uint64_t counter, int) : key_(key), counter_(counter) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64(std::uint64_t z);
std::uint64_t fnv1a64(std::string_view text);

} // namespace layerfuse
