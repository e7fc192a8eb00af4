#pragma once

// 8-bit PNG <-> [0,1] images, and the resampling used to bring inputs to the
// processing resolution. Link with libpng.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "painterly/errors.hpp"
#include "painterly/tensor.hpp"

namespace painterly {

namespace detail {

/// Decodes a PNG as interleaved 8-bit samples in `format`.
inline std::vector<std::uint8_t> read_png(const std::string& path, png_uint_32 format, int& height, int& width) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw IoError("cannot read PNG '" + path + "': " + image.message);
  }
  if (image.format & PNG_FORMAT_FLAG_LINEAR) {
    png_image_free(&image);
    throw IoError("'" + path + "' is a 16-bit PNG; only 8-bit PNG is supported");
  }
  if (image.format & PNG_FORMAT_FLAG_ALPHA) {
    png_image_free(&image);
    throw IoError("'" + path + "' has an alpha channel; only RGB or gray PNG is supported");
  }
  image.format = format;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw IoError("cannot decode PNG '" + path + "': " + msg);
  }
  height = static_cast<int>(image.height);
  width = static_cast<int>(image.width);
  return buffer;
}

}  // namespace detail

inline Image load_image(const std::string& path) {
  int h = 0, w = 0;
  const auto buf = detail::read_png(path, PNG_FORMAT_RGB, h, w);
  Image img(3, h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) img(c, y, x) = buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0;
    }
  }
  return img;
}

/// Nonzero gray level = inside.
inline Mask load_mask(const std::string& path) {
  int h = 0, w = 0;
  const auto buf = detail::read_png(path, PNG_FORMAT_GRAY, h, w);
  Mask m = make_mask(h, w);
  for (std::size_t i = 0; i < buf.size(); ++i) m.data()[i] = buf[i] != 0;
  return m;
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Interleaved 8-bit RGB samples as they would be written to disk.
inline std::vector<std::uint8_t> quantize(const Image& img) {
  std::vector<std::uint8_t> buf(img.plane_size() * 3);
  for (std::size_t i = 0; i < img.plane_size(); ++i) {
    for (int c = 0; c < 3; ++c) buf[i * 3 + static_cast<std::size_t>(c)] = to_byte(img.plane(c)[i]);
  }
  return buf;
}

inline void save_image(const std::string& path, const Image& img) {
  if (img.channels() != 3) throw ConfigError("save_image: expected 3 channels");
  const auto buf = quantize(img);
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw IoError("cannot write PNG '" + path + "': " + image.message);
  }
}

inline void save_mask(const std::string& path, const Mask& mask) {
  std::vector<std::uint8_t> buf(mask.size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = mask.data()[i] ? 255 : 0;
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(mask.width());
  image.height = static_cast<png_uint_32>(mask.height());
  image.format = PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw IoError("cannot write PNG '" + path + "': " + image.message);
  }
}

// ---------------------------------------------------------------------------
// Resampling.

/// Size with the longer side scaled down to `max_dim` (never enlarged).
inline std::pair<int, int> fit_size(int height, int width, int max_dim) {
  const int longest = std::max(height, width);
  if (longest <= max_dim) return {height, width};
  const double s = static_cast<double>(max_dim) / longest;
  return {std::max(1, static_cast<int>(std::lround(height * s))), std::max(1, static_cast<int>(std::lround(width * s)))};
}

namespace detail {

inline double cubic(double t) {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

// Resamples along one axis; `stride`/`count` select the axis of a plane.
inline void resample_line(const double* src, int src_n, std::ptrdiff_t src_stride, double* dst, int dst_n,
                          std::ptrdiff_t dst_stride) {
  const double scale = static_cast<double>(src_n) / dst_n;
  for (int i = 0; i < dst_n; ++i) {
    const double center = (i + 0.5) * scale - 0.5;
    const int base = static_cast<int>(std::floor(center));
    double acc = 0.0;
    for (int k = -1; k <= 2; ++k) {
      const int j = std::clamp(base + k, 0, src_n - 1);
      acc += cubic(center - (base + k)) * src[j * src_stride];
    }
    dst[i * dst_stride] = acc;
  }
}

}  // namespace detail

/// Separable bicubic (Keys, a = -0.5) resize with clamped borders.
inline Image resize_bicubic(const Image& img, int height, int width) {
  if (img.height() == height && img.width() == width) return img;
  Image tmp(img.channels(), img.height(), width), out(img.channels(), height, width);
  for (int c = 0; c < img.channels(); ++c) {
    for (int y = 0; y < img.height(); ++y) {
      detail::resample_line(&img(c, y, 0), img.width(), 1, &tmp(c, y, 0), width, 1);
    }
    for (int x = 0; x < width; ++x) {
      detail::resample_line(&tmp(c, 0, x), img.height(), width, &out(c, 0, x), height, width);
    }
  }
  return out;
}

/// A destination pixel is inside when at least half of its source footprint
/// (area-weighted) is.
inline Mask resize_mask_coverage(const Mask& mask, int height, int width) {
  if (mask.height() == height && mask.width() == width) return mask;
  const double sy = static_cast<double>(mask.height()) / height;
  const double sx = static_cast<double>(mask.width()) / width;
  Mask out = make_mask(height, width);
  for (int y = 0; y < height; ++y) {
    const double y0 = y * sy, y1 = (y + 1) * sy;
    for (int x = 0; x < width; ++x) {
      const double x0 = x * sx, x1 = (x + 1) * sx;
      double covered = 0.0;
      for (int yy = static_cast<int>(std::floor(y0)); yy < static_cast<int>(std::ceil(y1)) && yy < mask.height(); ++yy) {
        const double wy = std::min(y1, yy + 1.0) - std::max(y0, static_cast<double>(yy));
        for (int xx = static_cast<int>(std::floor(x0)); xx < static_cast<int>(std::ceil(x1)) && xx < mask.width(); ++xx) {
          if (!mask(0, yy, xx)) continue;
          covered += wy * (std::min(x1, xx + 1.0) - std::max(x0, static_cast<double>(xx)));
        }
      }
      out(0, y, x) = covered >= 0.5 * sx * sy ? 1 : 0;
    }
  }
  return out;
}

}  // namespace painterly
