// SPDX-License-Identifier: Apache-2.0
#include "layerfuse/rng.hpp"

#include <cmath>
#include <numbers>

namespace layerfuse {

namespace {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
}

std::uint64_t splitmix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

RngStream::RngStream(std::uint64_t seed, std::string_view purpose)
    : key_(splitmix64(splitmix64(seed + kGolden) ^ fnv1a64(purpose))) {}

RngStream RngStream::fork(std::string_view label) const {
  return RngStream(splitmix64(key_ ^ fnv1a64(label)), 0, 0);
}

std::uint64_t RngStream::next_u64() {
  ++counter_;
  return splitmix64(key_ + counter_ * kGolden);
}

double RngStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::normal() {
  // u1 in (0, 1] keeps the log finite.
  const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t RngStream::below(std::uint64_t n) {
  if (n <= 1)
    return 0;
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

} // namespace layerfuse
