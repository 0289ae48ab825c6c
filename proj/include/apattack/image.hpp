#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "apattack/autograd.hpp"

namespace apattack {

// H x W x 3 pixels in [0,1], row-major with interleaved channels.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> data;

  Image() = default;
  Image(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), data(h * w * 3, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t c) { return data[(y * width + x) * 3 + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const { return data[(y * width + x) * 3 + c]; }

  bool operator==(const Image&) const = default;
};

// Throws InputError on non-finite pixels or values outside [0,1].
void validate_pixels(const Image& image);

// [N,3,H,W]; all images must share one size.
ag::Tensor images_to_tensor(std::span<const Image> images);
std::vector<Image> tensor_to_images(const ag::Tensor& batch);

// 8-bit RGB PNG. Reading converts to [0,1] by /255.
Image read_png(const std::filesystem::path& path);
void write_png(const Image& image, const std::filesystem::path& path);

// Baseline sequential JPEG with 4:2:0 chroma subsampling.
std::vector<unsigned char> encode_jpeg(const Image& image, int quality);
Image decode_jpeg(const std::vector<unsigned char>& bytes);

// PNG or JPEG by file extension.
Image read_image(const std::filesystem::path& path);

// Quantise to the 8-bit grid used by PNG storage (round half away from zero).
Image quantize_8bit(const Image& image);

// Half-pixel-centred bilinear resampling; same-size resize is exact identity.
Image resize_bilinear(const Image& image, std::size_t height, std::size_t width);

double max_abs_difference(const Image& a, const Image& b);
double mean_abs_difference(const Image& a, const Image& b);

}  // namespace apattack
