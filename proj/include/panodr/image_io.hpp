/*
Copyright 2026 The panodr Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS-IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
*/

#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "panodr/tensor.hpp"

namespace panodr::io {

// Decoded PNG samples, interleaved, without gamma conversion.
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 0;   // 1 gray, 2 gray+alpha, 3 RGB, 4 RGBA
  int bit_depth = 8;  // 8 or 16
  std::vector<std::uint16_t> samples;

  std::uint16_t at(int x, int y, int c) const {
    return samples[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  double max_value() const { return bit_depth == 16 ? 65535.0 : 255.0; }
};

class PngError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct MemReader {
  std::span<const std::uint8_t> data;
  std::size_t pos = 0;
};

inline void read_from_memory(png_structp png, png_bytep out, png_size_t len) {
  auto* r = static_cast<MemReader*>(png_get_io_ptr(png));
  if (r->pos + len > r->data.size()) png_error(png, "truncated PNG data");
  std::memcpy(out, r->data.data() + r->pos, len);
  r->pos += len;
}

inline void error_fn(png_structp png, png_const_charp msg) {
  auto* buf = static_cast<std::string*>(png_get_error_ptr(png));
  if (buf) *buf = msg;
  png_longjmp(png, 1);
}

inline void warning_fn(png_structp, png_const_charp) {}

}  // namespace detail

inline Raster decode_png(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) {
    throw PngError("not a PNG stream");
  }
  std::string message;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &message,
                                           detail::error_fn, detail::warning_fn);
  if (!png) throw PngError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw PngError("png_create_info_struct failed");
  }
  detail::MemReader reader{bytes, 0};
  Raster r;
  std::vector<png_bytep> rows;
  std::vector<std::uint8_t> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw PngError("PNG decode failed: " + message);
  }
  png_set_read_fn(png, &reader, detail::read_from_memory);
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (depth == 16) png_set_swap(png);  // host little-endian uint16
  png_read_update_info(png, info);
  r.width = static_cast<int>(png_get_image_width(png, info));
  r.height = static_cast<int>(png_get_image_height(png, info));
  r.channels = png_get_channels(png, info);
  r.bit_depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buffer.resize(rowbytes * r.height);
  rows.resize(r.height);
  for (int y = 0; y < r.height; ++y) rows[y] = buffer.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t count = static_cast<std::size_t>(r.width) * r.height * r.channels;
  r.samples.resize(count);
  if (r.bit_depth == 16) {
    for (int y = 0; y < r.height; ++y) {
      const auto* src = reinterpret_cast<const std::uint16_t*>(rows[y]);
      std::copy_n(src, static_cast<std::size_t>(r.width) * r.channels,
                  r.samples.begin() + static_cast<std::size_t>(y) * r.width * r.channels);
    }
  } else {
    for (int y = 0; y < r.height; ++y) {
      std::copy_n(rows[y], static_cast<std::size_t>(r.width) * r.channels,
                  r.samples.begin() + static_cast<std::size_t>(y) * r.width * r.channels);
    }
  }
  return r;
}

// 8-bit gray (channels = 1) or RGB (channels = 3) encode.
inline std::vector<std::uint8_t> encode_png(int width, int height, int channels,
                                            std::span<const std::uint8_t> pixels) {
  if (channels != 1 && channels != 3) {
    throw PngError("encode_png supports 1 or 3 channels");
  }
  if (pixels.size() != static_cast<std::size_t>(width) * height * channels) {
    throw PngError("encode_png: pixel buffer size mismatch");
  }
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, pixels.data(), 0, nullptr)) {
    throw PngError(std::string("PNG encode failed: ") + image.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, pixels.data(), 0,
                                 nullptr)) {
    throw PngError(std::string("PNG encode failed: ") + image.message);
  }
  out.resize(size);
  return out;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path,
                       std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
}

inline Raster read_png(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode_png(bytes);
  } catch (const PngError& e) {
    throw PngError(path.string() + ": " + e.what());
  }
}

inline std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// RGB tensor (1,3,H,W) in [0,1] from any raster; gray is replicated and
// alpha dropped.
inline Tensor<float> to_rgb_tensor(const Raster& r) {
  Tensor<float> t({1, 3, r.height, r.width});
  const double scale = 1.0 / r.max_value();
  for (int y = 0; y < r.height; ++y) {
    for (int x = 0; x < r.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const int src = r.channels >= 3 ? c : 0;
        t.at(0, c, y, x) = static_cast<float>(r.at(x, y, src) * scale);
      }
    }
  }
  return t;
}

// First channel as a single-channel tensor (1,1,H,W) of raw integer values.
inline Tensor<float> to_value_tensor(const Raster& r) {
  Tensor<float> t({1, 1, r.height, r.width});
  for (int y = 0; y < r.height; ++y) {
    for (int x = 0; x < r.width; ++x) t.at(0, 0, y, x) = r.at(x, y, 0);
  }
  return t;
}

// Quantized 8-bit interleaved pixels from a (1,C,H,W) tensor in [0,1].
template <typename T>
std::vector<std::uint8_t> to_bytes(const Tensor<T>& t) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(t.h()) * t.w() * t.c());
  for (int y = 0; y < t.h(); ++y) {
    for (int x = 0; x < t.w(); ++x) {
      for (int c = 0; c < t.c(); ++c) {
        out[(static_cast<std::size_t>(y) * t.w() + x) * t.c() + c] =
            quantize(static_cast<double>(t.at(0, c, y, x)));
      }
    }
  }
  return out;
}

template <typename T>
std::vector<std::uint8_t> encode_tensor_png(const Tensor<T>& t) {
  if (t.n() != 1) throw PngError("encode_tensor_png expects a single image");
  return encode_png(t.w(), t.h(), t.c(), to_bytes(t));
}

template <typename T>
void write_tensor_png(const std::filesystem::path& path, const Tensor<T>& t) {
  write_file(path, encode_tensor_png(t));
}

inline void write_gray_png(const std::filesystem::path& path, int width, int height,
                           std::span<const std::uint8_t> values) {
  write_file(path, encode_png(width, height, 1, values));
}

}  // namespace panodr::io
