#pragma once

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dmalign/core/tensor.hpp"

namespace dmalign {

/// Interleaved 8-bit raster with 1 (mask) or 3 (RGB) channels.
struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<std::uint8_t> pixels;

  Image8() = default;
  Image8(int w, int h, int c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, fill) {}

  std::uint8_t& at(int x, int y, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  [[nodiscard]] std::uint8_t at(int x, int y, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  friend bool operator==(const Image8&, const Image8&) = default;
};

/// Pixel value convention of a float image tensor.
enum class Range { Unit, Signed };  // [0,1] or [-1,1]

inline Tensor to_tensor(const Image8& img, Range range = Range::Unit) {
  Tensor t(Shape{1, img.channels, img.height, img.width});
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        const float u = static_cast<float>(img.at(x, y, c)) / 255.0f;
        t(0, c, y, x) = range == Range::Unit ? u : 2.0f * u - 1.0f;
      }
  return t;
}

/// Quantizes sample `n` of a float tensor to 8 bits (round to nearest, clamped).
inline Image8 to_image8(const Tensor& t, Range range = Range::Unit, int n = 0) {
  const Shape s = t.shape();
  if (s.c != 1 && s.c != 3) throw ShapeError("to_image8 expects 1 or 3 channels, got " + s.str());
  Image8 img(s.w, s.h, s.c);
  for (int c = 0; c < s.c; ++c)
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) {
        float u = t(n, c, y, x);
        if (range == Range::Signed) u = 0.5f * (u + 1.0f);
        const float q = std::round(std::clamp(u, 0.0f, 1.0f) * 255.0f);
        img.at(x, y, c) = static_cast<std::uint8_t>(q);
      }
  return img;
}

inline void write_png(const std::filesystem::path& path, const Image8& img) {
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!png_image_write_to_file(&pi, path.string().c_str(), 0, img.pixels.data(), 0, nullptr)) {
    throw IoError("failed to write PNG " + path.string() + ": " + pi.message);
  }
}

/// Reads a PNG as gray (channels=1) or RGB (channels=3).
inline Image8 read_png(const std::filesystem::path& path, int channels) {
  png_image pi;
  std::memset(&pi, 0, sizeof(pi));
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.string().c_str())) {
    throw IoError("failed to read PNG " + path.string() + ": " + pi.message);
  }
  pi.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image8 img(static_cast<int>(pi.width), static_cast<int>(pi.height), channels);
  if (!png_image_finish_read(&pi, nullptr, img.pixels.data(), 0, nullptr)) {
    png_image_free(&pi);
    throw IoError("failed to decode PNG " + path.string() + ": " + pi.message);
  }
  return img;
}

/// Binary mask tensor (1,1,H,W) in {0,1} to a 0/255 gray image.
inline Image8 mask_to_image8(const Tensor& m) { return to_image8(m, Range::Unit); }

inline Tensor image8_to_mask(const Image8& img) {
  if (img.channels != 1) throw ShapeError("mask image must be single-channel");
  Tensor t(Shape{1, 1, img.height, img.width});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) t[i] = img.pixels[i] >= 128 ? 1.0f : 0.0f;
  return t;
}

// Middlebury .flo: float 202021.25, int32 width, int32 height, then
// height*width interleaved (u, v) float32, row-major, little-endian.

inline constexpr float kFloMagic = 202021.25f;

/// Flow tensor is (1, 2, H, W) with channel 0 = u (x), channel 1 = v (y).
inline void write_flo(const std::filesystem::path& path, const Tensor& flow) {
  const Shape s = flow.shape();
  if (s.n != 1 || s.c != 2) throw ShapeError("flow must be (1,2,H,W), got " + s.str());
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const std::int32_t w = s.w;
  const std::int32_t h = s.h;
  out.write(reinterpret_cast<const char*>(&kFloMagic), 4);
  out.write(reinterpret_cast<const char*>(&w), 4);
  out.write(reinterpret_cast<const char*>(&h), 4);
  std::vector<float> inter(static_cast<std::size_t>(w) * h * 2);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      inter[(static_cast<std::size_t>(y) * w + x) * 2] = flow(0, 0, y, x);
      inter[(static_cast<std::size_t>(y) * w + x) * 2 + 1] = flow(0, 1, y, x);
    }
  out.write(reinterpret_cast<const char*>(inter.data()),
            static_cast<std::streamsize>(inter.size() * sizeof(float)));
  if (!out) throw IoError("short write to " + path.string());
}

inline Tensor read_flo(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open flow file " + path.string());
  float magic = 0.0f;
  std::int32_t w = 0;
  std::int32_t h = 0;
  in.read(reinterpret_cast<char*>(&magic), 4);
  in.read(reinterpret_cast<char*>(&w), 4);
  in.read(reinterpret_cast<char*>(&h), 4);
  if (!in || magic != kFloMagic || w <= 0 || h <= 0 || w > (1 << 15) || h > (1 << 15)) {
    throw IoError("bad .flo header in " + path.string());
  }
  std::vector<float> inter(static_cast<std::size_t>(w) * h * 2);
  in.read(reinterpret_cast<char*>(inter.data()), static_cast<std::streamsize>(inter.size() * sizeof(float)));
  if (!in) throw IoError("truncated .flo data in " + path.string());
  Tensor flow(Shape{1, 2, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      flow(0, 0, y, x) = inter[(static_cast<std::size_t>(y) * w + x) * 2];
      flow(0, 1, y, x) = inter[(static_cast<std::size_t>(y) * w + x) * 2 + 1];
    }
  return flow;
}

}  // namespace dmalign
