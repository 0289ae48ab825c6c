#pragma once

// Input-transformation defenses applied to images before a victim encodes
// them.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "apattack/image.hpp"

namespace apattack {

// JPEG encode/decode round trip (baseline, 4:2:0).
Image jpeg_defense(const Image& image, int quality);

// Bilinear resize to a uniformly drawn fraction of the original size, then
// zero-pad at uniformly drawn offsets back to the original size.
Image randomization_defense(const Image& image, double low, double high, std::uint64_t seed);

struct Defense {
  enum class Kind { kJpeg, kRandomization };
  Kind kind = Kind::kJpeg;
  int quality = 60;
  double low = 0.875, high = 1.0;

  // Seed only affects randomization.
  Image apply(const Image& image, std::uint64_t seed) const;
  // "jpeg:60", "randomization:0.875-1.0"
  std::string token() const;
};

using DefenseChain = std::vector<Defense>;

// Comma-separated tokens; "" or "none" is the empty chain. A bare
// "randomization" uses the default range (0.875, 1.0).
DefenseChain parse_defense_chain(std::string_view text);
std::string defense_chain_string(const DefenseChain& chain);

// Sequential application; element i draws from an independent seed stream.
Image apply_defense_chain(const Image& image, const DefenseChain& chain, std::uint64_t seed = 0);

}  // namespace apattack
