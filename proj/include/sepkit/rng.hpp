// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace sepkit {

// splitmix64; used to derive well-separated child seeds from a master seed.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Child seed for stream `stream`, element `index`, under `master`.
/// Stable across platforms and releases; manifests depend on it.
inline uint64_t derive_seed(uint64_t master, uint64_t stream, uint64_t index) {
  uint64_t s = master;
  uint64_t a = splitmix64(s);
  s = a ^ (stream * 0xd6e8feb86659fd93ull);
  uint64_t b = splitmix64(s);
  s = b ^ (index * 0xa0761d6478bd642full);
  return splitmix64(s);
}

/// Deterministic RNG with portable draw semantics. std::mt19937_64 has a
/// standardized sequence; the distributions below avoid the
/// implementation-defined std::uniform_* wrappers so that identical seeds
/// give identical draws on every platform.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection sampling, unbiased.
  int64_t uniform_int(int64_t n) {
    if (n <= 0) throw std::invalid_argument("uniform_int: empty range");
    const uint64_t bound = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    uint64_t x;
    do {
      x = gen_();
    } while (x >= limit);
    return static_cast<int64_t>(x % bound);
  }

  /// Fisher-Yates shuffle driven by uniform_int.
  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(static_cast<int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

}  // namespace sepkit
