#pragma once

#include <cstdint>
#include <random>

namespace apattack {

// Seeded generator with platform-independent real-valued draws. The standard
// distributions are implementation-defined, so golden checksums would differ
// between standard libraries; these derive every value from raw 64-bit words.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  std::uint64_t below(std::uint64_t n);

  double normal();

  // Independent stream for a sub-component, stable under reordering of
  // sibling derivations.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace apattack
