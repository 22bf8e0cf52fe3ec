#pragma once

// Portable seeded randomness. Everything random in the engine flows through
// RngStream, a SplitMix64 generator with named derived streams, so that e.g.
// changing the augmentation seed never shifts split membership. No
// std::<distribution> types are used anywhere: their output is
// implementation-defined and would break cross-platform reproducibility.

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace signseq {

namespace detail {

inline std::uint64_t splitmix64_next(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  std::uint64_t s = a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2));
  return splitmix64_next(s);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace detail

// Derive a child seed from a root seed plus a purpose tag and optional
// integer coordinates ("split", class_id, ...).
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag) {
  return detail::mix64(seed, detail::fnv1a(tag));
}

template <typename... Ids>
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag, Ids... ids) {
  std::uint64_t s = derive_seed(seed, tag);
  ((s = detail::mix64(s, static_cast<std::uint64_t>(ids))), ...);
  return s;
}

class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() { return detail::splitmix64_next(state_); }

  // uniform in [0, 1), 53-bit resolution
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // uniform in [lo, hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n) via Lemire's multiply-shift
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<__uint128_t>(next_u64()) * static_cast<__uint128_t>(n)) >> 64);
  }

  // integer in [lo, hi] inclusive
  std::int64_t range(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  bool bernoulli(double p) { return uniform() < p; }

  // standard normal, Box-Muller (cosine form); one draw consumes two uniforms
  double normal() {
    double u1 = uniform();
    // keep u1 away from 0 so log stays finite
    if (u1 <= 0x1.0p-53) u1 = 0x1.0p-53;
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  // Fisher-Yates; deterministic for a given stream state
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

}  // namespace signseq
