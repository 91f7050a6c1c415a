#pragma once
// RGB pixel grids in [0,1] and PNG encoding via libpng.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvp {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// H x W x 3 pixel grid, row-major with interleaved channels.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), pixels(h * w * 3, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  [[nodiscard]] double at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }
  [[nodiscard]] std::size_t size() const { return pixels.size(); }
  bool operator==(const Image&) const = default;
};

namespace detail {

struct PngBuffer {
  std::vector<std::uint8_t> bytes;
};

inline void png_write_to_buffer(png_structp png, png_bytep data, png_size_t length) {
  auto* buf = static_cast<PngBuffer*>(png_get_io_ptr(png));
  buf->bytes.insert(buf->bytes.end(), data, data + length);
}

inline void png_flush_noop(png_structp) {}

struct PngReader {
  const std::uint8_t* data;
  std::size_t size;
  std::size_t offset = 0;
};

inline void png_read_from_buffer(png_structp png, png_bytep out, png_size_t length) {
  auto* r = static_cast<PngReader*>(png_get_io_ptr(png));
  if (r->offset + length > r->size) png_error(png, "truncated PNG data");
  std::copy_n(r->data + r->offset, length, out);
  r->offset += length;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_png(const Image& img) {
  if (img.height == 0 || img.width == 0) throw ImageError("encode_png: empty image");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw ImageError("encode_png: png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  detail::PngBuffer buf;
  std::vector<std::uint8_t> rowbuf(img.width * 3);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageError("encode_png: libpng error");
  }
  png_set_write_fn(png, &buf, detail::png_write_to_buffer, detail::png_flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t i = 0; i < img.width * 3; ++i) {
      const double v = std::clamp(img.pixels[y * img.width * 3 + i], 0.0, 1.0);
      rowbuf[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    png_write_row(png, rowbuf.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return std::move(buf.bytes);
}

inline Image decode_png(const std::uint8_t* data, std::size_t size, const std::string& name = "<memory>") {
  if (size < 8 || png_sig_cmp(data, 0, 8) != 0) throw ImageError("not a PNG file: " + name);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw ImageError("decode_png: png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  detail::PngReader reader{data, size};
  Image img;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("failed to decode PNG: " + name);
  }
  png_set_read_fn(png, &reader, detail::png_read_from_buffer);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
    if (depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
  }
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const std::size_t w = png_get_image_width(png, info);
  const std::size_t h = png_get_image_height(png, info);
  if (png_get_channels(png, info) != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("PNG does not decode to 3 channels: " + name);
  }
  img = Image(h, w);
  std::vector<std::uint8_t> rowbuf(png_get_rowbytes(png, info));
  for (std::size_t y = 0; y < h; ++y) {
    png_read_row(png, rowbuf.data(), nullptr);
    for (std::size_t i = 0; i < w * 3; ++i) img.pixels[y * w * 3 + i] = rowbuf[i] / 255.0;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

inline Image read_png(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open image file: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_png(bytes.data(), bytes.size(), path.string());
}

inline void write_png(const std::filesystem::path& path, const Image& img) {
  const auto bytes = encode_png(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError("cannot write image file: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// Quantize to 8 bits per channel, the precision PNG round trips preserve.
inline Image quantize8(Image img) {
  for (auto& v : img.pixels) v = std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return img;
}

}  // namespace mvp
