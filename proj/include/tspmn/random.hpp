// SPDX-License-Identifier: Apache-2.0
#pragma once

// Portable seeded randomness. std::mt19937_64 output is fixed by the standard,
// but the std distributions are not, so the few we need are written out here.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string_view>
#include <utility>

namespace tspmn {

using Rng = std::mt19937_64;

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

/// Named sub-seed: one global seed fans out to independent component streams.
constexpr std::uint64_t sub_seed(std::uint64_t seed, std::string_view name) {
  return splitmix64(seed ^ splitmix64(fnv1a(name)));
}

/// Sub-seed keyed by a name plus integer coordinates (epoch, example index, ...).
template <typename... Ints>
constexpr std::uint64_t sub_seed(std::uint64_t seed, std::string_view name, Ints... coords) {
  std::uint64_t h = sub_seed(seed, name);
  ((h = splitmix64(h ^ static_cast<std::uint64_t>(coords))), ...);
  return h;
}

/// Uniform integer in [0, n). Lemire's multiply-shift with rejection.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  if (n <= 1) return 0;
  const std::uint64_t threshold = (0 - n) % n;
  for (;;) {
    const std::uint64_t x = rng();
    const __uint128_t m = static_cast<__uint128_t>(x) * n;
    if (static_cast<std::uint64_t>(m) >= threshold) return static_cast<std::uint64_t>(m >> 64);
  }
}

/// Uniform integer in [lo, hi].
inline long uniform_int(Rng& rng, long lo, long hi) {
  return lo + static_cast<long>(uniform_index(rng, static_cast<std::uint64_t>(hi - lo + 1)));
}

/// Uniform double in [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double standard_normal(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/// Normal(0, sigma) resampled until |z| <= 2 sigma.
inline double truncated_normal(Rng& rng, double sigma) {
  for (;;) {
    const double z = standard_normal(rng);
    if (std::abs(z) <= 2.0) return z * sigma;
  }
}

template <typename T>
void shuffle(std::span<T> items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = uniform_index(rng, i);
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace tspmn
