#pragma once

#include <cstdint>
#include <cmath>
#include <vector>

namespace lapo {

// Deterministic, platform-independent RNG (splitmix64-seeded xoshiro256**).
// std::mt19937 engines are portable but the standard distributions are not,
// so all sampling goes through this class to keep runs bit-reproducible.
class Rng {
 public:
  explicit Rng(uint64_t seed) { reseed(seed); }

  void reseed(uint64_t seed) {
    uint64_t x = seed;
    for (auto& word : state_) {
      x += 0x9E3779B97F4A7C15ull;
      uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
      z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
      word = z ^ (z >> 31);
    }
    has_gauss_ = false;
  }

  uint64_t next_u64() {
    const uint64_t result = rotl_(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl_(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller with a cached spare.
  double gauss() {
    if (has_gauss_) {
      has_gauss_ = false;
      return spare_;
    }
    const double u = 1.0 - uniform();  // avoid log(0)
    const double v = uniform();
    const double r = std::sqrt(-2.0 * std::log(u));
    const double a = 6.283185307179586 * v;
    spare_ = r * std::sin(a);
    has_gauss_ = true;
    return r * std::cos(a);
  }

  double gauss(double mu, double sigma) { return mu + sigma * gauss(); }

  // Index sampled from unnormalized non-negative weights.
  size_t categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    const double r = uniform() * total;
    double c = 0.0;
    for (size_t i = 0; i + 1 < weights.size(); ++i) {
      c += weights[i];
      if (r < c) return i;
    }
    return weights.empty() ? 0 : weights.size() - 1;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static uint64_t rotl_(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t state_[4] = {};
  bool has_gauss_ = false;
  double spare_ = 0.0;
};

// Stable substream derivation: hash the parent seed with a stream tag so
// independent consumers (workers, episodes, init groups) never share state.
inline uint64_t derive_seed(uint64_t seed, uint64_t tag) {
  uint64_t z = seed ^ (0x9E3779B97F4A7C15ull + (tag << 1));
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t tag_a, uint64_t tag_b) {
  return derive_seed(derive_seed(seed, tag_a), tag_b);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b, uint64_t c) {
  return derive_seed(derive_seed(seed, a, b), c);
}

// FNV-1a over bytes; used for config digests and determinism checks.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xCBF29CE484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace lapo
