#include "raproscope/image_io.hpp"

#include <png.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

#include "raproscope/errors.hpp"

namespace raproscope {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

void write_png(const std::filesystem::path& path, const RgbImage& image) {
  if (image.width == 0 || image.height == 0 || image.pixels.size() != image.width * image.height * 3) {
    throw DimensionError("write_png: pixel buffer does not match image size");
  }
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw IoError("cannot write '" + path.string() + "'");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing PNG '" + path.string() + "'");
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, png_uint_32(image.width), png_uint_32(image.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < image.height; ++y) {
    png_write_row(png, image.pixels.data() + y * image.width * 3);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

namespace {

// Returns 8-bit pixels with `channels` = 1 (gray) or 3 (RGB).
std::vector<std::uint8_t> decode_png(const std::filesystem::path& path, std::size_t& width,
                                     std::size_t& height, std::size_t& channels) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw IoError("cannot open '" + path.string() + "'");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw IoError("'" + path.string() + "' is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialisation failed");
  }
  std::vector<std::uint8_t> pixels;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("failed reading PNG '" + path.string() + "'");
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  width = png_get_image_width(png, info);
  height = png_get_image_height(png, info);
  channels = png_get_channels(png, info);
  pixels.resize(width * height * channels);
  std::vector<png_bytep> rows(height);
  for (std::size_t y = 0; y < height; ++y) rows[y] = pixels.data() + y * width * channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return pixels;
}

}  // namespace

RgbImage read_png_rgb(const std::filesystem::path& path) {
  std::size_t w = 0, h = 0, c = 0;
  std::vector<std::uint8_t> px = decode_png(path, w, h, c);
  RgbImage img{w, h, {}};
  img.pixels.resize(w * h * 3);
  for (std::size_t p = 0; p < w * h; ++p) {
    for (std::size_t k = 0; k < 3; ++k) img.pixels[p * 3 + k] = px[p * c + (c == 3 ? k : 0)];
  }
  return img;
}

Tensor read_png_tensor(const std::filesystem::path& path) {
  std::size_t w = 0, h = 0, c = 0;
  std::vector<std::uint8_t> px = decode_png(path, w, h, c);
  Tensor t({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t p = 0; p < w * h; ++p) t[ch * w * h + p] = px[p * c + ch] / 255.0f;
  }
  return t;
}

Tensor read_raw_tensor(const std::filesystem::path& path, const Shape& shape) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  const std::vector<char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  if (bytes.size() != shape_size(shape) * sizeof(float)) {
    throw DimensionError("'" + path.string() + "' holds " + std::to_string(bytes.size()) +
                         " bytes, expected " + std::to_string(shape_size(shape) * sizeof(float)) +
                         " for shape " + shape_string(shape));
  }
  std::vector<float> data(shape_size(shape));
  std::memcpy(data.data(), bytes.data(), bytes.size());
  return Tensor(shape, std::move(data));
}

Tensor read_image(const std::filesystem::path& path, const Shape& shape) {
  if (path.extension() != ".png") return read_raw_tensor(path, shape);
  Tensor t = read_png_tensor(path);
  if (shape.size() != 3 || t.dim(1) != shape[1] || t.dim(2) != shape[2]) {
    throw DimensionError("image '" + path.string() + "' is " + shape_string(t.shape()) +
                         ", model expects " + shape_string(shape));
  }
  if (t.dim(0) == shape[0]) return t;
  const std::size_t hw = shape[1] * shape[2];
  Tensor out(shape);
  if (shape[0] == 1 && t.dim(0) == 3) {
    for (std::size_t p = 0; p < hw; ++p) out[p] = (t[p] + t[hw + p] + t[2 * hw + p]) / 3.0f;
  } else if (shape[0] == 3 && t.dim(0) == 1) {
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t p = 0; p < hw; ++p) out[c * hw + p] = t[p];
    }
  } else {
    throw DimensionError("image '" + path.string() + "' has " + std::to_string(t.dim(0)) + " channels");
  }
  return out;
}

}  // namespace raproscope
