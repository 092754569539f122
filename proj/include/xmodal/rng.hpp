#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string_view>

// Self-contained deterministic RNG. All randomness in the project flows
// through these types so results are pinned by our own code, not by the
// standard library's unspecified distribution algorithms.

namespace xmodal {

struct SplitMix64 {
  std::uint64_t state;

  explicit SplitMix64(std::uint64_t seed) : state(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }
};

// Sub-seed derivation: master seed mixed with an FNV-1a hash of the tag,
// passed through one splitmix round. Stable across platforms.
std::uint64_t derive_seed(std::uint64_t master, std::string_view tag);

// xoshiro256** with splitmix-expanded seeding.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  // [0, 1) with 53 random bits
  double next_double();
  // [0, n), rejection-free unbiased via 128-bit multiply
  std::uint64_t uniform_u64(std::uint64_t n);
  // [lo, hi] inclusive
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  // index ~ weights (need not be normalized; negative weights invalid)
  std::size_t categorical(std::span<const double> weights);
  // gaussian via Box-Muller, one value per call
  double normal(double mean, double stddev);

  std::array<std::uint64_t, 4> state() const { return s_; }
  void set_state(const std::array<std::uint64_t, 4>& s) { s_ = s; }

  template <typename T>
  void shuffle(std::span<T> v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = uniform_u64(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::array<std::uint64_t, 4> s_;
};

}  // namespace xmodal
