#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace flmkt::rng {

// All randomness flows through mt19937_64 plus the hand-rolled distributions
// below. std::*_distribution is avoided on purpose: its output is not pinned
// by the standard, and the simulator promises byte-identical reruns.

using Engine = std::mt19937_64;

// SplitMix64 finalizer; good avalanche, used only for seed derivation.
inline std::uint64_t mix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Named sub-stream tags so independent consumers never share a stream.
enum Stream : std::uint64_t {
  kWorld = 1,
  kPretrain = 2,
  kAuthorize = 3,
  kBids = 4,
  kEpsilon = 5,
  kLocalUpdate = 6,
  kRandomAlloc = 7,
  kNetInit = 8,
  kPartition = 9,
  kRepeat = 10,
  kUtility = 11,
};

inline std::uint64_t derive(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = mix(seed);
  for (std::uint64_t p : path) s = mix(s ^ mix(p));
  return s;
}

inline Engine child(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  return Engine(derive(seed, path));
}

// Uniform in [0, 1), 53-bit resolution.
inline double uniform01(Engine& eng) {
  return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

// Standard normal via Box-Muller. Consumes exactly two engine draws per call;
// the sine branch is discarded to keep the call/draw mapping fixed.
inline double normal(Engine& eng) {
  const double u1 = 1.0 - uniform01(eng);  // (0, 1]
  const double u2 = uniform01(eng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

// Gamma(shape, scale) via Marsaglia-Tsang; shape < 1 boosted through the
// Gamma(shape + 1) identity.
inline double gamma(Engine& eng, double shape, double scale = 1.0) {
  if (shape < 1.0) {
    const double u = uniform01(eng);
    return gamma(eng, shape + 1.0, scale) * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = normal(eng);
    double v = 1.0 + c * x;
    if (v <= 0.0) continue;
    v = v * v * v;
    const double u = uniform01(eng);
    const double x2 = x * x;
    if (u < 1.0 - 0.0331 * x2 * x2) return scale * d * v;
    if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return scale * d * v;
  }
}

// Uniform m-subset of {0..n-1} via partial Fisher-Yates; result sorted.
inline std::vector<int> sample_subset(Engine& eng, int n, int m) {
  std::vector<int> pool(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
  for (int i = 0; i < m; ++i) {
    const int j = i + static_cast<int>(eng() % static_cast<std::uint64_t>(n - i));
    std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
  }
  std::vector<int> out(pool.begin(), pool.begin() + m);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace flmkt::rng
