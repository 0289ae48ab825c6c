#include "apattack/image.hpp"

#include <png.h>
// jpeglib.h needs FILE and size_t declared first.
#include <cstdio>
#include <jpeglib.h>

#include <csetjmp>
#include <fstream>
#include <iterator>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "apattack/errors.hpp"

namespace apattack {

void validate_pixels(const Image& image) {
  if (image.data.size() != image.height * image.width * 3) {
    throw InputError("image buffer does not match its " + std::to_string(image.height) + "x" +
                     std::to_string(image.width) + " size");
  }
  for (std::size_t i = 0; i < image.data.size(); ++i) {
    const double v = image.data[i];
    if (!std::isfinite(v)) throw InputError("non-finite pixel at flat index " + std::to_string(i));
    if (v < 0.0 || v > 1.0) {
      throw InputError("pixel " + std::to_string(i) + " outside [0,1]: " + std::to_string(v));
    }
  }
}

ag::Tensor images_to_tensor(std::span<const Image> images) {
  if (images.empty()) throw InputError("empty image batch");
  const std::size_t h = images[0].height, w = images[0].width;
  ag::Tensor t({images.size(), 3, h, w});
  for (std::size_t n = 0; n < images.size(); ++n) {
    const auto& img = images[n];
    if (img.height != h || img.width != w) {
      throw InputError("image batch mixes sizes " + std::to_string(h) + "x" + std::to_string(w) + " and " +
                       std::to_string(img.height) + "x" + std::to_string(img.width));
    }
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) t.data[((n * 3 + c) * h + y) * w + x] = img.at(y, x, c);
  }
  return t;
}

std::vector<Image> tensor_to_images(const ag::Tensor& batch) {
  if (batch.rank() != 4 || batch.shape[1] != 3) {
    throw InputError("expected [N,3,H,W] batch, got " + ag::shape_string(batch.shape));
  }
  const std::size_t n = batch.shape[0], h = batch.shape[2], w = batch.shape[3];
  std::vector<Image> out;
  out.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    Image img(h, w);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) img.at(y, x, c) = batch.data[((s * 3 + c) * h + y) * w + x];
    out.push_back(std::move(img));
  }
  return out;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

unsigned char to_byte(double v) {
  const double s = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
  return static_cast<unsigned char>(s);
}

}  // namespace

Image read_png(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw LoadError("cannot read PNG '" + path.string() + "': " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw LoadError("cannot decode PNG '" + path.string() + "': " + img.message);
  }
  Image out(img.height, img.width);
  for (std::size_t i = 0; i < buf.size(); ++i) out.data[i] = static_cast<double>(buf[i]) / 255.0;
  return out;
}

void write_png(const Image& image, const std::filesystem::path& path) {
  std::vector<unsigned char> buf(image.data.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = to_byte(image.data[i]);
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw Error("cannot open '" + path.string() + "' for writing");
  if (!png_image_write_to_stdio(&img, f.get(), 0, buf.data(), 0, nullptr)) {
    throw Error("cannot write PNG '" + path.string() + "': " + img.message);
  }
}

namespace {

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

}  // namespace

std::vector<unsigned char> encode_jpeg(const Image& image, int quality) {
  if (quality < 1 || quality > 100) throw InputError("JPEG quality " + std::to_string(quality) + " outside 1..100");
  std::vector<unsigned char> rgb(image.data.size());
  for (std::size_t i = 0; i < rgb.size(); ++i) rgb[i] = to_byte(image.data[i]);
  jpeg_compress_struct cinfo{};
  JpegError err{};
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  unsigned char* out = nullptr;
  unsigned long out_size = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    std::free(out);
    throw Error(std::string("JPEG encode failed: ") + err.message);
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &out, &out_size);
  cinfo.image_width = static_cast<JDIMENSION>(image.width);
  cinfo.image_height = static_cast<JDIMENSION>(image.height);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  cinfo.comp_info[0].h_samp_factor = 2;
  cinfo.comp_info[0].v_samp_factor = 2;
  cinfo.comp_info[1].h_samp_factor = cinfo.comp_info[1].v_samp_factor = 1;
  cinfo.comp_info[2].h_samp_factor = cinfo.comp_info[2].v_samp_factor = 1;
  cinfo.dct_method = JDCT_ISLOW;
  jpeg_start_compress(&cinfo, TRUE);
  const std::size_t stride = image.width * 3;
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = rgb.data() + static_cast<std::size_t>(cinfo.next_scanline) * stride;
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  std::vector<unsigned char> bytes(out, out + out_size);
  std::free(out);
  return bytes;
}

Image decode_jpeg(const std::vector<unsigned char>& bytes) {
  jpeg_decompress_struct cinfo{};
  JpegError err{};
  // Declared before setjmp so the error jump skips no constructions.
  Image img;
  std::vector<unsigned char> row;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw LoadError(std::string("JPEG decode failed: ") + err.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  cinfo.dct_method = JDCT_ISLOW;
  jpeg_start_decompress(&cinfo);
  img = Image(cinfo.output_height, cinfo.output_width);
  row.assign(static_cast<std::size_t>(cinfo.output_width) * 3, 0);
  while (cinfo.output_scanline < cinfo.output_height) {
    const std::size_t y = cinfo.output_scanline;
    JSAMPROW ptr = row.data();
    jpeg_read_scanlines(&cinfo, &ptr, 1);
    for (std::size_t i = 0; i < row.size(); ++i) img.data[y * row.size() + i] = static_cast<double>(row[i]) / 255.0;
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}

Image read_image(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext == ".png") return read_png(path);
  if (ext == ".jpg" || ext == ".jpeg") {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LoadError("cannot open '" + path.string() + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
      return decode_jpeg(bytes);
    } catch (const LoadError& e) {
      throw LoadError("'" + path.string() + "': " + e.what());
    }
  }
  throw LoadError("unsupported image format '" + path.string() + "'");
}

Image quantize_8bit(const Image& image) {
  Image out = image;
  for (auto& v : out.data) v = static_cast<double>(to_byte(v)) / 255.0;
  return out;
}

Image resize_bilinear(const Image& image, std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) throw InputError("resize to empty size");
  if (height == image.height && width == image.width) return image;
  Image out(height, width);
  const double sy = static_cast<double>(image.height) / static_cast<double>(height);
  const double sx = static_cast<double>(image.width) / static_cast<double>(width);
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0,
                                 static_cast<double>(image.height - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0,
                                   static_cast<double>(image.width - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double top = image.at(y0, x0, c) * (1.0 - wx) + image.at(y0, x1, c) * wx;
        const double bot = image.at(y1, x0, c) * (1.0 - wx) + image.at(y1, x1, c) * wx;
        out.at(y, x, c) = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  return out;
}

double max_abs_difference(const Image& a, const Image& b) {
  if (a.data.size() != b.data.size()) throw InputError("image size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

double mean_abs_difference(const Image& a, const Image& b) {
  if (a.data.size() != b.data.size()) throw InputError("image size mismatch");
  if (a.data.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += std::abs(a.data[i] - b.data[i]);
  return s / static_cast<double>(a.data.size());
}

}  // namespace apattack
