#pragma once

// The shipped synthetic pedestrian domain: body-region layout, per-slot
// color palettes and the color-word vocabulary that ties rendered pixels to
// prompt words. Shared by the dataset renderer, the handcrafted extractor and
// the reference joint space so all three agree on what "red top" means.

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "apattack/autograd.hpp"

namespace apattack::domain {

inline constexpr std::size_t kSlots = 5;

// Coarse layout grid; every region is a union of whole grid cells so patch
// averaging over the grid reads region colors exactly.
inline constexpr std::size_t kGridRows = 8;
inline constexpr std::size_t kGridCols = 4;

struct GridBox {
  std::size_t row0, row1, col0, col1;  // half-open, in grid cells
};

// Slot order matches the prompt template: top, underneath, hairstyle,
// shoes, carrying.
const std::array<GridBox, kSlots>& region_grid_boxes();
std::vector<ag::PixelBox> region_pixel_boxes(std::size_t height, std::size_t width);

using Rgb = std::array<double, 3>;

struct ColorWord {
  std::string word;
  Rgb rgb;
  bool is_absence = false;  // "nothing": region shows the background
};

// Hue offset magnitude around mid gray; all hues share one luminance.
inline constexpr double kChromaRadius = 0.03;
inline constexpr double kBodyGray = 0.5;
inline constexpr double kBackgroundGray = 0.3;

ColorWord hue_color(const std::string& word);
const std::vector<std::string>& hue_words();  // red yellow green cyan blue magenta
// Candidate values of each slot, in vocabulary order.
const std::vector<ColorWord>& slot_palette(std::size_t slot);
std::vector<std::string> slot_palette_words(std::size_t slot);

Rgb background_rgb();

// Luminance / two opponent-chroma axes.
const std::array<Rgb, 3>& opponent_basis();
// Signature used by the reference joint space: tanh of gained opponent
// coordinates of (rgb - mid gray).
std::array<double, 3> color_signature(const Rgb& rgb);
inline constexpr double kLuminanceGain = 2.0;
inline constexpr double kChromaGain = 1.0 / kChromaRadius;

}  // namespace apattack::domain
