#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "lfm/errors.hpp"

namespace lfm {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace detail

// Deterministic, platform-stable random stream (splitmix64 core, hand-rolled
// Box-Muller). Every consumer derives a named substream from the experiment
// seed so artifacts are reproducible independent of evaluation order.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), state_(seed) {
    // decorrelate trivially related seeds
    detail::splitmix64(state_);
  }

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return detail::splitmix64(state_); }

  // [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  // standard normal, Box-Muller with cached spare
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // low bit forced so u1 is never exactly zero
    double u1 = static_cast<double>((next_u64() >> 11) | 1ull) * 0x1.0p-53;
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Knuth sampler; rates in this codebase stay small
  long poisson(double rate) {
    if (rate < 0.0 || !std::isfinite(rate))
      throw NumericalError("poisson rate must be finite and non-negative");
    if (rate > 5000.0) throw NumericalError("poisson rate too large to sample");
    double l = std::exp(-rate);
    long k = 0;
    double p = 1.0;
    do {
      ++k;
      p *= uniform();
    } while (p > l);
    return k - 1;
  }

  Rng substream(std::string_view label) const {
    std::uint64_t h = detail::fnv1a(label);
    std::uint64_t mixed = seed_ ^ (h + 0x9e3779b97f4a7c15ull + (seed_ << 6) + (seed_ >> 2));
    return Rng(mixed);
  }

  Rng substream(std::uint64_t index) const {
    std::uint64_t s = seed_ + 0x632be59bd9b4e019ull * (index + 1);
    return Rng(s);
  }

 private:
  std::uint64_t seed_;
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace lfm
