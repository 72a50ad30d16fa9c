#pragma once

// Grayscale planes, label maps and 8-bit PNG input/output.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "cmeseg/error.hpp"
#include "cmeseg/tensor.hpp"

namespace cmeseg {

/// Single-channel image with intensities nominally in [0, 1].
struct Plane {
  std::size_t height = 0, width = 0;
  std::vector<double> px;

  Plane() = default;
  Plane(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), px(h * w, fill) {}

  double& at(std::size_t y, std::size_t x) { return px[y * width + x]; }
  double at(std::size_t y, std::size_t x) const { return px[y * width + x]; }
  bool operator==(const Plane&) const = default;
};

/// Per-pixel label indices. As a SegMask the values are {0 = background, 1 = CME}.
struct LabelMap {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), labels(h * w, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  std::size_t size() const { return labels.size(); }
  bool operator==(const LabelMap&) const = default;
};

using SegMask = LabelMap;
using Labeling = LabelMap;

/// Copies a plane into each of three channels of a (1, 3, H, W) tensor.
template <typename T>
Tensor<T> gray_to_rgb(const Plane& p) {
  Tensor<T> t(Dims{1, 3, p.height, p.width});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < p.px.size(); ++i) t[c * p.px.size() + i] = static_cast<T>(p.px[i]);
  return t;
}

/// Per-pixel argmax over channels of a (1, K, H, W) tensor; first max wins.
template <typename T>
LabelMap argmax_labels(const Tensor<T>& t) {
  const Dims& d = t.dims();
  LabelMap m(d.h, d.w);
  for (std::size_t i = 0; i < d.plane(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < d.c; ++c)
      if (t[c * d.plane() + i] > t[best * d.plane() + i]) best = c;
    m.labels[i] = static_cast<std::uint8_t>(best);
  }
  return m;
}

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

/// 8-bit PNG raster; channels is 1 (gray) or 3 (RGB).
struct Raster8 {
  std::size_t height = 0, width = 0, channels = 1;
  std::vector<std::uint8_t> bytes;
};

inline Raster8 read_png(const std::filesystem::path& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw ImageIoError("cannot open " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw ImageIoError("not a PNG file: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("libpng initialisation failed");
  }
  Raster8 r;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageIoError("corrupt PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (bit_depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  r.width = png_get_image_width(png, info);
  r.height = png_get_image_height(png, info);
  r.channels = png_get_channels(png, info);
  r.bytes.resize(r.height * r.width * r.channels);
  rows.resize(r.height);
  for (std::size_t y = 0; y < r.height; ++y) rows[y] = r.bytes.data() + y * r.width * r.channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return r;
}

inline void write_png(const std::filesystem::path& path, const Raster8& r) {
  if (r.channels != 1 && r.channels != 3) throw ImageIoError("PNG writer supports 1 or 3 channels");
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw ImageIoError("cannot create " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("libpng initialisation failed");
  }
  std::vector<png_bytep> rows(r.height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageIoError("failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(r.width), static_cast<png_uint_32>(r.height), 8,
               r.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < r.height; ++y)
    rows[y] = const_cast<png_bytep>(r.bytes.data() + y * r.width * r.channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Reads a grayscale plane scaled to [0,1] by bit depth. RGB input must have
/// identical channels (as written by the pre-processing step); channel 0 is used.
inline Plane read_gray_png(const std::filesystem::path& path) {
  const Raster8 r = read_png(path);
  Plane p(r.height, r.width);
  for (std::size_t i = 0; i < p.px.size(); ++i) p.px[i] = r.bytes[i * r.channels] / 255.0;
  return p;
}

inline void write_gray_png(const std::filesystem::path& path, const Plane& p) {
  Raster8 r{p.height, p.width, 1, std::vector<std::uint8_t>(p.px.size())};
  for (std::size_t i = 0; i < p.px.size(); ++i) r.bytes[i] = to_byte(p.px[i]);
  write_png(path, r);
}

inline void write_rgb_png(const std::filesystem::path& path, const Plane& p) {
  Raster8 r{p.height, p.width, 3, std::vector<std::uint8_t>(p.px.size() * 3)};
  for (std::size_t i = 0; i < p.px.size(); ++i) r.bytes[3 * i] = r.bytes[3 * i + 1] = r.bytes[3 * i + 2] = to_byte(p.px[i]);
  write_png(path, r);
}

/// Reads a {0,255} mask into {0,1}. Any non-zero byte counts as foreground.
inline SegMask read_mask_png(const std::filesystem::path& path) {
  const Raster8 r = read_png(path);
  SegMask m(r.height, r.width);
  for (std::size_t i = 0; i < m.labels.size(); ++i) m.labels[i] = r.bytes[i * r.channels] != 0 ? 1 : 0;
  return m;
}

inline void write_mask_png(const std::filesystem::path& path, const SegMask& m) {
  Raster8 r{m.height, m.width, 1, std::vector<std::uint8_t>(m.labels.size())};
  for (std::size_t i = 0; i < m.labels.size(); ++i) r.bytes[i] = m.labels[i] ? 255 : 0;
  write_png(path, r);
}

}  // namespace cmeseg
