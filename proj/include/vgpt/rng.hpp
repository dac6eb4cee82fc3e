#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace vgpt {

// Seeded splittable PRNG. Core generator is SplitMix64 (Steele et al.,
// "Fast splittable pseudorandom number generators"): 64-bit state advanced
// by the golden-gamma constant, output mixed by two xor-shift-multiply
// rounds. split() derives an independent child stream from the next parent
// output. The algorithm is fixed; see docs/formats.md.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Independent child stream; advances this stream by one draw.
  Rng split() { return Rng(next_u64()); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return next_u64() % n; }

  // Standard normal via Box-Muller; consumes two uniform draws per sample.
  double gaussian() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  uint64_t state() const { return state_; }

 private:
  uint64_t state_;
};

// Deterministic substream derivation from a label, for keying independent
// streams off one run seed (e.g. per stage, per epoch, per record).
inline uint64_t derive_seed(uint64_t seed, std::string_view label, uint64_t index = 0) {
  uint64_t h = seed ^ 0x9E3779B97F4A7C15ULL;
  for (char c : label) {
    h ^= static_cast<uint64_t>(static_cast<unsigned char>(c));
    h *= 0x100000001B3ULL;
  }
  h ^= index + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
  Rng mix(h);
  return mix.next_u64();
}

}  // namespace vgpt
