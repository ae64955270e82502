#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace uvap {

// FNV-1a 64-bit, used for stream derivation and file/config hashing.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a64(s.data(), s.size(), h);
}

// SplitMix64. The project's only randomness source: identical output on every
// platform, no stdlib distributions involved.
struct Rng {
  uint64_t state = 0;

  Rng() = default;
  explicit Rng(uint64_t seed) : state(seed) {}

  uint64_t next() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Independent stream derived from this rng's current state and a tag.
  // Does not advance this rng.
  Rng fork(std::string_view tag) const {
    uint64_t h = fnv1a64(&state, sizeof(state));
    h = fnv1a64(tag, h);
    return Rng(h);
  }

  Rng fork(std::string_view tag, uint64_t index) const {
    uint64_t h = fnv1a64(&state, sizeof(state));
    h = fnv1a64(tag, h);
    h = fnv1a64(&index, sizeof(index), h);
    return Rng(h);
  }

  // Uniform in [0,1) with 53 bits of mantissa.
  double real01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0,n). n must be > 0. Plain modulo; the tiny bias is
  // irrelevant here and the result is platform-stable.
  uint64_t below(uint64_t n) { return next() % n; }

  double range(double lo, double hi) { return lo + real01() * (hi - lo); }

  // Uniform in [-a, a].
  double pm(double a) { return range(-a, a); }

  bool coin() { return (next() & 1u) != 0; }
};

}  // namespace uvap
