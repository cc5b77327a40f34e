#pragma once

// RNG helpers with stable cross-platform behavior (the std distributions are
// implementation-defined, so draws are derived from raw engine output), plus
// the content hash used by run manifests.

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace sdpl {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

/// Independent stream for a named component of a seeded run.
inline std::mt19937_64 seeded_rng(uint64_t seed, std::string_view label) {
  return std::mt19937_64(splitmix64(seed ^ fnv1a64(label)));
}

inline double rng_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double rng_uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * rng_uniform(rng);
}

/// Box-Muller; draws two uniforms per call.
inline double rng_normal(std::mt19937_64& rng) {
  double u1 = rng_uniform(rng);
  while (u1 <= 0.0) u1 = rng_uniform(rng);
  const double u2 = rng_uniform(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

inline uint64_t rng_below(std::mt19937_64& rng, uint64_t n) { return rng() % n; }

template <typename T>
void rng_shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (size_t i = v.size(); i > 1; --i)
    std::swap(v[i - 1], v[rng_below(rng, i)]);
}

/// SHA-1 hex digest of the git blob encoding of `content`.
std::string git_blob_sha1(std::string_view content);

std::string iso8601_now();

}  // namespace sdpl
