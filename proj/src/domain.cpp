#include "apattack/domain.hpp"

#include <cmath>

#include "apattack/errors.hpp"

namespace apattack::domain {

const std::array<GridBox, kSlots>& region_grid_boxes() {
  static const std::array<GridBox, kSlots> boxes{{
      {2, 4, 1, 3},  // top: torso
      {4, 7, 1, 3},  // underneath: legs
      {0, 2, 1, 3},  // hairstyle: head
      {7, 8, 1, 3},  // shoes: feet
      {3, 5, 3, 4},  // carrying: side blob
  }};
  return boxes;
}

std::vector<ag::PixelBox> region_pixel_boxes(std::size_t height, std::size_t width) {
  if (height % kGridRows != 0 || width % kGridCols != 0 || height == 0 || width == 0) {
    throw ConfigError("image size " + std::to_string(height) + "x" + std::to_string(width) +
                      " must be a positive multiple of the " + std::to_string(kGridRows) + "x" +
                      std::to_string(kGridCols) + " layout grid");
  }
  const std::size_t ch = height / kGridRows, cw = width / kGridCols;
  std::vector<ag::PixelBox> out;
  for (const auto& b : region_grid_boxes()) out.push_back({b.row0 * ch, b.row1 * ch, b.col0 * cw, b.col1 * cw});
  return out;
}

const std::array<Rgb, 3>& opponent_basis() {
  static const std::array<Rgb, 3> basis = [] {
    const double s3 = std::sqrt(3.0), s2 = std::sqrt(2.0), s6 = std::sqrt(6.0);
    return std::array<Rgb, 3>{{{1 / s3, 1 / s3, 1 / s3}, {1 / s2, -1 / s2, 0.0}, {1 / s6, 1 / s6, -2 / s6}}};
  }();
  return basis;
}

const std::vector<std::string>& hue_words() {
  static const std::vector<std::string> words{"red", "yellow", "green", "cyan", "blue", "magenta"};
  return words;
}

ColorWord hue_color(const std::string& word) {
  // Zero-sum directions 60 degrees apart so every hue has the body luminance.
  static const std::vector<Rgb> dirs{{2, -1, -1}, {1, 1, -2}, {-1, 2, -1}, {-2, 1, 1}, {-1, -1, 2}, {1, -2, 1}};
  const auto& words = hue_words();
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (words[i] != word) continue;
    const double s6 = std::sqrt(6.0);
    Rgb rgb{};
    for (std::size_t c = 0; c < 3; ++c) rgb[c] = kBodyGray + kChromaRadius * dirs[i][c] / s6;
    return {word, rgb, false};
  }
  throw InputError("unknown hue word '" + word + "'");
}

Rgb background_rgb() { return {kBackgroundGray, kBackgroundGray, kBackgroundGray}; }

const std::vector<ColorWord>& slot_palette(std::size_t slot) {
  static const std::vector<ColorWord> body = [] {
    std::vector<ColorWord> v;
    for (const auto& w : hue_words()) v.push_back(hue_color(w));
    return v;
  }();
  static const std::vector<ColorWord> carried = [] {
    std::vector<ColorWord> v{{"nothing", background_rgb(), true}};
    for (const auto& w : {"red", "yellow", "green", "cyan", "blue"}) v.push_back(hue_color(w));
    return v;
  }();
  if (slot >= kSlots) throw InputError("slot index " + std::to_string(slot) + " out of range");
  return slot == 4 ? carried : body;
}

std::vector<std::string> slot_palette_words(std::size_t slot) {
  std::vector<std::string> out;
  for (const auto& c : slot_palette(slot)) out.push_back(c.word);
  return out;
}

std::array<double, 3> color_signature(const Rgb& rgb) {
  const auto& basis = opponent_basis();
  const std::array<double, 3> gains{kLuminanceGain, kChromaGain, kChromaGain};
  std::array<double, 3> out{};
  for (std::size_t j = 0; j < 3; ++j) {
    double acc = 0.0;
    for (std::size_t c = 0; c < 3; ++c) acc += basis[j][c] * (rgb[c] - kBodyGray);
    out[j] = std::tanh(gains[j] * acc);
  }
  return out;
}

}  // namespace apattack::domain
