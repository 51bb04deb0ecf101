#pragma once

#include <cstdint>
#include <random>

namespace vmoba {

// Deterministic random source for fixtures and synthetic data. Wraps mt19937
// and maps its output to floats with explicit bit arithmetic, because the
// standard distribution objects are not pinned down across implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu),
                      static_cast<std::uint32_t>(seed >> 32)};
    gen_.seed(seq);
  }

  std::uint32_t next_u32() { return gen_(); }

  std::uint64_t next_u64() {
    std::uint64_t hi = gen_();
    return (hi << 32) | gen_();
  }

  // Uniform in [0, 1) with 24 random mantissa bits.
  float unit_float() {
    return static_cast<float>(next_u32() >> 8) * 0x1.0p-24f;
  }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double unit_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  float uniform_float(float lo, float hi) {
    return lo + (hi - lo) * unit_float();
  }

  double uniform_double(double lo, double hi) {
    return lo + (hi - lo) * unit_double();
  }

  // Uniform integer in [0, n). n must be positive.
  std::size_t uniform_index(std::size_t n) {
    return static_cast<std::size_t>(next_u64() % n);
  }

 private:
  std::mt19937 gen_;
};

}  // namespace vmoba
