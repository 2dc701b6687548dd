#pragma once

#include <cstdint>

namespace lv {

// Counter-based 64-bit generator. Output i of a stream is a pure function of
// (seed, stream, i), so datasets and parameter draws are reproducible across
// platforms and independent of call interleaving. The mixer is the SplitMix64
// finalizer; successive outputs come from mixing key + (i+1)*GOLDEN.
class CounterRng {
 public:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  static CounterRng keyed(std::uint64_t seed, std::uint64_t stream) {
    CounterRng r;
    r.key_ = mix(seed ^ mix(stream * kGolden + 1));
    r.counter_ = 0;
    return r;
  }

  std::uint64_t next_u64() { return mix(key_ + (++counter_) * kGolden); }

  // Uniform double in [0, 1) with 53 random mantissa bits.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double next_range(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  // Box-Muller; consumes exactly two counters per call.
  double next_normal();

  // Unbiased integer in [0, n) by rejection.
  std::uint64_t uniform_below(std::uint64_t n);

  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace lv
