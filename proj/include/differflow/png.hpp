#pragma once

// 8-bit PNG decode/encode through libpng's simplified API. Link with PNG::PNG.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "differflow/image.hpp"

namespace differflow {

inline Image load_png(const std::string& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw FormatError("cannot read PNG '" + path + "': " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw FormatError("cannot decode PNG '" + path + "': " + msg);
  }
  Image img(png.height, png.width);
  for (std::size_t i = 0; i < buf.size(); ++i) img.data[i] = buf[i] / 255.0f;
  return img;
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline void save_png(const std::string& path, const Image& img) {
  std::vector<std::uint8_t> buf(img.data.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = to_byte(img.data[i]);
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width);
  png.height = static_cast<png_uint_32>(img.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw FormatError("cannot write PNG '" + path + "': " + png.message);
  }
}

// Single-channel 8-bit PNG from bytes in row-major order.
inline void save_png_gray(const std::string& path, std::size_t height,
                          std::size_t width, const std::vector<std::uint8_t>& pixels) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(width);
  png.height = static_cast<png_uint_32>(height);
  png.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.c_str(), 0, pixels.data(), 0, nullptr)) {
    throw FormatError("cannot write PNG '" + path + "': " + png.message);
  }
}

inline std::vector<std::uint8_t> load_png_gray(const std::string& path,
                                               std::size_t& height,
                                               std::size_t& width) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw FormatError("cannot read PNG '" + path + "': " + png.message);
  }
  png.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = png.message;
    png_image_free(&png);
    throw FormatError("cannot decode PNG '" + path + "': " + msg);
  }
  height = png.height;
  width = png.width;
  return buf;
}

}  // namespace differflow
