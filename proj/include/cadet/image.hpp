#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace cadet {

using Rgb = std::array<std::uint8_t, 3>;

// 8-bit RGB raster, row-major interleaved.
struct ImageU8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // width * height * 3

  ImageU8() = default;
  ImageU8(int w, int h) : width(w), height(h), pixels(static_cast<size_t>(w) * h * 3, 0) {}

  std::uint8_t* at(int x, int y) {
    return &pixels[(static_cast<size_t>(y) * width + x) * 3];
  }
  const std::uint8_t* at(int x, int y) const {
    return &pixels[(static_cast<size_t>(y) * width + x) * 3];
  }
  void set(int x, int y, Rgb c) {
    auto* p = at(x, y);
    p[0] = c[0]; p[1] = c[1]; p[2] = c[2];
  }
};

// Binary PPM (P6), the on-disk dataset format.
void write_ppm(const ImageU8& image, const std::string& path);
ImageU8 read_ppm(const std::string& path);

// Minimal PNG codec (8-bit RGB, non-interlaced) used by the classifier wire
// protocol. Encoding is deterministic.
std::vector<std::uint8_t> encode_png(const ImageU8& image);
ImageU8 decode_png(const std::vector<std::uint8_t>& bytes);

std::string base64_encode(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> base64_decode(const std::string& text);

// Pixel-rect crop, clamped to bounds; always returns at least 1x1.
ImageU8 crop_image(const ImageU8& image, int x0, int y0, int x1, int y1);
ImageU8 resize_nearest(const ImageU8& image, int out_w, int out_h);

}  // namespace cadet
