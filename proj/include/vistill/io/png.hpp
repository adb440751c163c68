#pragma once

// Minimal PNG writer (8-bit RGB / grayscale) on top of zlib. Output bytes are
// deterministic: fixed filter (none) and fixed compression level.

#include <zlib.h>

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "vistill/core/tensor.hpp"
#include "vistill/data/raster.hpp"

namespace vistill::io {

namespace detail {

inline void be32(std::vector<uint8_t>& v, uint32_t x) {
  v.push_back(static_cast<uint8_t>(x >> 24));
  v.push_back(static_cast<uint8_t>(x >> 16));
  v.push_back(static_cast<uint8_t>(x >> 8));
  v.push_back(static_cast<uint8_t>(x));
}

inline void png_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& payload) {
  be32(out, static_cast<uint32_t>(payload.size()));
  const size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), payload.begin(), payload.end());
  const uint32_t crc = crc32(0, out.data() + start, static_cast<uInt>(out.size() - start));
  be32(out, crc);
}

inline std::vector<uint8_t> png_encode(const uint8_t* pixels, int64_t h, int64_t w, int channels) {
  // filter byte 0 per scanline
  std::vector<uint8_t> raw;
  raw.reserve(static_cast<size_t>(h * (w * channels + 1)));
  for (int64_t y = 0; y < h; ++y) {
    raw.push_back(0);
    raw.insert(raw.end(), pixels + y * w * channels, pixels + (y + 1) * w * channels);
  }
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> z(bound);
  if (compress2(z.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw IoError("png: zlib compression failed");
  z.resize(bound);

  std::vector<uint8_t> out = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  std::vector<uint8_t> ihdr;
  be32(ihdr, static_cast<uint32_t>(w));
  be32(ihdr, static_cast<uint32_t>(h));
  ihdr.push_back(8);                                   // bit depth
  ihdr.push_back(channels == 3 ? 2 : 0);               // color type
  ihdr.push_back(0); ihdr.push_back(0); ihdr.push_back(0);
  png_chunk(out, "IHDR", ihdr);
  png_chunk(out, "IDAT", z);
  png_chunk(out, "IEND", {});
  return out;
}

}  // namespace detail

inline void write_png_rgb(const std::string& path, const data::Image& img) {
  std::vector<uint8_t> px(static_cast<size_t>(img.h * img.w * 3));
  for (int64_t y = 0; y < img.h; ++y)
    for (int64_t x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(img.at(c, y, x), 0.f, 1.f);
        px[(y * img.w + x) * 3 + c] = static_cast<uint8_t>(v * 255.f + 0.5f);
      }
  auto bytes = detail::png_encode(px.data(), img.h, img.w, 3);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("png: cannot open " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline void write_png_gray(const std::string& path, const std::vector<float>& values, int64_t h, int64_t w) {
  if (static_cast<int64_t>(values.size()) != h * w) throw IoError("png: size mismatch");
  std::vector<uint8_t> px(static_cast<size_t>(h * w));
  for (size_t i = 0; i < px.size(); ++i)
    px[i] = static_cast<uint8_t>(std::clamp(values[i], 0.f, 1.f) * 255.f + 0.5f);
  auto bytes = detail::png_encode(px.data(), h, w, 1);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("png: cannot open " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// Horizontal strip of frames (episode filmstrip export).
inline void write_png_strip(const std::string& path, const std::vector<data::Image>& frames) {
  if (frames.empty()) throw IoError("png strip: no frames");
  const int64_t h = frames[0].h, w = frames[0].w;
  data::Image strip(h, w * static_cast<int64_t>(frames.size()));
  for (size_t i = 0; i < frames.size(); ++i)
    for (int c = 0; c < 3; ++c)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) strip.at(c, y, static_cast<int64_t>(i) * w + x) = frames[i].at(c, y, x);
  write_png_rgb(path, strip);
}

}  // namespace vistill::io
