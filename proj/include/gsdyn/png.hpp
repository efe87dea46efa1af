#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <vector>

#include "gsdyn/renderer.hpp"

namespace gsdyn {

namespace detail {

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline void write_png_rows(const std::filesystem::path& path, int width, int height, int color_type, int channels,
                           const std::vector<std::uint8_t>& pixels) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw Error("cannot open '" + path.string() + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng failed while writing '" + path.string() + "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int v = 0; v < height; ++v)
    png_write_row(png, pixels.data() + static_cast<std::size_t>(v) * width * channels);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

/// 8-bit RGBA PNG of a rendered frame (alpha channel = silhouette).
inline void write_png(const std::filesystem::path& path, const RenderedFrame& frame) {
  std::vector<std::uint8_t> px(static_cast<std::size_t>(frame.width) * frame.height * 4);
  for (std::size_t p = 0; p < frame.alpha.size(); ++p) {
    for (int c = 0; c < 3; ++c) px[4 * p + c] = detail::to_byte(frame.rgb[3 * p + c]);
    px[4 * p + 3] = detail::to_byte(frame.alpha[p]);
  }
  detail::write_png_rows(path, frame.width, frame.height, PNG_COLOR_TYPE_RGB_ALPHA, 4, px);
}

/// 8-bit grayscale silhouette.
inline void write_alpha_png(const std::filesystem::path& path, const RenderedFrame& frame) {
  std::vector<std::uint8_t> px(frame.alpha.size());
  std::transform(frame.alpha.begin(), frame.alpha.end(), px.begin(), detail::to_byte);
  detail::write_png_rows(path, frame.width, frame.height, PNG_COLOR_TYPE_GRAY, 1, px);
}

}  // namespace gsdyn
