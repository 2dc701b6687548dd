#include "lv/rng.hpp"

#include <cmath>

namespace lv {

double CounterRng::next_normal() {
  // u1 is kept away from zero so the log stays finite.
  double u1 = next_unit();
  double u2 = next_unit();
  if (u1 <= 0x1.0p-53) u1 = 0x1.0p-53;
  constexpr double two_pi = 6.283185307179586476925286766559;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
}

std::uint64_t CounterRng::uniform_below(std::uint64_t n) {
  if (n == 0) return 0;
  const std::uint64_t zone = n * (~0ull / n);
  std::uint64_t x = next_u64();
  while (x >= zone) x = next_u64();
  return x % n;
}

}  // namespace lv
