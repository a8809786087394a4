#pragma once

// PNG and raw float32 image I/O.

#include "sketch3d/common.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <csetjmp>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace sketch3d {

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

namespace detail {

inline void png_append(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(data), len);
}

inline void png_noop_flush(png_structp) {}

/// Low-level writer; `rows` are packed at the given bit depth.
inline std::string write_png(int width, int height, int color_type, int bit_depth,
                             const std::vector<std::vector<std::uint8_t>>& rows) {
  std::string out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png: cannot create write struct");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png: cannot create info struct");
  }
  std::vector<png_bytep> ptrs(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) ptrs[i] = const_cast<png_bytep>(rows[i].data());
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png: encode failed");
  }
  png_set_write_fn(png, &out, png_append, png_noop_flush);
  png_set_IHDR(png, info, width, height, bit_depth, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, ptrs.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

}  // namespace detail

/// 8-bit PNG of a 1- or 3-channel image; values are clamped to [0, 1] and rounded.
inline std::string encode_png(const Image& img) {
  require(img.channels == 1 || img.channels == 3, "encode_png: need 1 or 3 channels");
  require(img.width >= 1 && img.height >= 1, "encode_png: empty image");
  std::vector<std::vector<std::uint8_t>> rows(img.height);
  for (int y = 0; y < img.height; ++y) {
    rows[y].resize(static_cast<std::size_t>(img.width) * img.channels);
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c) rows[y][x * img.channels + c] = to_byte(img.at(y, x, c));
  }
  return detail::write_png(img.width, img.height,
                           img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, 8, rows);
}

/// 1-bit grayscale PNG; strokes (1) are white.
inline std::string encode_mask_png(const Mask& m) {
  require(m.width >= 1 && m.height >= 1, "encode_mask_png: empty mask");
  std::vector<std::vector<std::uint8_t>> rows(m.height);
  for (int y = 0; y < m.height; ++y) {
    rows[y].assign((m.width + 7) / 8, 0);
    for (int x = 0; x < m.width; ++x)
      if (m.at(y, x)) rows[y][x / 8] |= static_cast<std::uint8_t>(0x80 >> (x % 8));
  }
  return detail::write_png(m.width, m.height, PNG_COLOR_TYPE_GRAY, 1, rows);
}

/// Decodes any PNG to 8-bit gray (1 channel) or RGB (3 channels) scaled to [0, 1].
/// Alpha is composited away; palette images become RGB.
inline Image decode_png(const std::string& bytes) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw IoError(std::string("png: ") + image.message);
  const bool gray = (image.format & PNG_FORMAT_FLAG_COLOR) == 0;
  image.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
  png_color black{0, 0, 0};
  if (!png_image_finish_read(&image, &black, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError(std::string("png: ") + image.message);
  }
  Image out(static_cast<int>(image.width), static_cast<int>(image.height), gray ? 1 : 3);
  for (std::size_t i = 0; i < buf.size(); ++i) out.data[i] = buf[i] / 255.0;
  return out;
}

/// Binarizes a decoded image: luminance >= threshold is a stroke.
inline Mask image_to_mask(const Image& img, double threshold = 0.5) {
  Mask m(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double v = img.at(y, x, 0);
      if (img.channels == 3) v = 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
      m.at(y, x) = v >= threshold ? 1 : 0;
    }
  return m;
}

inline Image mask_to_image(const Mask& m) {
  Image img(m.width, m.height, 1);
  for (std::size_t i = 0; i < m.data.size(); ++i) img.data[i] = m.data[i] ? 1.0 : 0.0;
  return img;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline void write_png_file(const std::filesystem::path& path, const Image& img) {
  write_file(path, encode_png(img));
}

inline Image read_png_file(const std::filesystem::path& path) { return decode_png(read_file(path)); }

/// Little-endian float32 values in row-major H x W x C order.
inline std::string encode_raw_f32(const Image& img) {
  std::string out;
  out.reserve(img.data.size() * 4);
  for (double v : img.data) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
  }
  return out;
}

inline Image decode_raw_f32(const std::string& bytes, int width, int height, int channels) {
  Image img(width, height, channels);
  if (bytes.size() != img.data.size() * 4) throw IoError("raw f32: size does not match shape");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(p[i * 4 + k]) << (8 * k);
    img.data[i] = std::bit_cast<float>(bits);
  }
  return img;
}

/// Normal buffer visualized as (n + 1) / 2.
inline Image normal_to_rgb(const Image& normal) {
  Image img(normal.width, normal.height, 3);
  for (std::size_t i = 0; i < normal.data.size(); ++i) img.data[i] = 0.5 * (normal.data[i] + 1.0);
  return img;
}

}  // namespace sketch3d
