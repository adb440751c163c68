#pragma once

// Tiny CPU rasterizer for the synthetic corpus and the simulated tasks.
// Images are CHW float32 in [0,1]. Shapes are drawn with 2x2 supersampled
// coverage, so edges are anti-aliased but fully deterministic.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "vistill/core/rng.hpp"

namespace vistill::data {

struct Rgb {
  float r = 0, g = 0, b = 0;
};

struct Image {
  int64_t h = 0, w = 0;
  std::vector<float> chw;  // [3,h,w]

  Image() = default;
  Image(int64_t hh, int64_t ww) : h(hh), w(ww), chw(static_cast<size_t>(3 * hh * ww), 0.f) {}

  float& at(int64_t c, int64_t y, int64_t x) { return chw[(c * h + y) * w + x]; }
  float at(int64_t c, int64_t y, int64_t x) const { return chw[(c * h + y) * w + x]; }

  void fill(Rgb color) {
    std::fill(chw.begin(), chw.begin() + h * w, color.r);
    std::fill(chw.begin() + h * w, chw.begin() + 2 * h * w, color.g);
    std::fill(chw.begin() + 2 * h * w, chw.end(), color.b);
  }
};

enum class ShapeKind { Circle = 0, Square = 1, Triangle = 2, Ring = 3, Cross = 4 };
inline const char* shape_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::Circle: return "circle";
    case ShapeKind::Square: return "square";
    case ShapeKind::Triangle: return "triangle";
    case ShapeKind::Ring: return "ring";
    default: return "cross";
  }
}

namespace detail {

inline bool inside(ShapeKind kind, float dx, float dy, float r, float cosa, float sina) {
  // rotate the sample into the shape frame
  const float x = dx * cosa + dy * sina;
  const float y = -dx * sina + dy * cosa;
  switch (kind) {
    case ShapeKind::Circle:
      return x * x + y * y <= r * r;
    case ShapeKind::Square:
      return std::abs(x) <= r * 0.9f && std::abs(y) <= r * 0.9f;
    case ShapeKind::Triangle: {
      // equilateral, apex up
      const float yy = y + r * 0.5f;
      return yy >= 0.f && yy <= r * 1.5f && std::abs(x) <= (r * 1.5f - yy) * 0.577350269f;
    }
    case ShapeKind::Ring: {
      const float d2 = x * x + y * y;
      return d2 <= r * r && d2 >= (0.55f * r) * (0.55f * r);
    }
    case ShapeKind::Cross:
      return (std::abs(x) <= 0.3f * r || std::abs(y) <= 0.3f * r) && std::abs(x) <= r && std::abs(y) <= r;
  }
  return false;
}

}  // namespace detail

/// Blends an anti-aliased shape over the image.
inline void draw_shape(Image& img, ShapeKind kind, float cx, float cy, float r, float angle, Rgb color,
                       float opacity = 1.f) {
  const float cosa = std::cos(angle), sina = std::sin(angle);
  const float reach = r * 1.8f;
  const int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(cx - reach)),
                x1 = std::min<int64_t>(img.w - 1, static_cast<int64_t>(cx + reach) + 1);
  const int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(cy - reach)),
                y1 = std::min<int64_t>(img.h - 1, static_cast<int64_t>(cy + reach) + 1);
  for (int64_t y = y0; y <= y1; ++y)
    for (int64_t x = x0; x <= x1; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 2; ++sy)
        for (int sx = 0; sx < 2; ++sx)
          if (detail::inside(kind, static_cast<float>(x) + 0.25f + 0.5f * sx - cx,
                             static_cast<float>(y) + 0.25f + 0.5f * sy - cy, r, cosa, sina))
            ++hits;
      if (!hits) continue;
      const float cov = opacity * static_cast<float>(hits) * 0.25f;
      img.at(0, y, x) = img.at(0, y, x) * (1 - cov) + color.r * cov;
      img.at(1, y, x) = img.at(1, y, x) * (1 - cov) + color.g * cov;
      img.at(2, y, x) = img.at(2, y, x) * (1 - cov) + color.b * cov;
    }
}

/// Smooth value-noise background: a coarse random lattice, bilinearly
/// upsampled, plus faint per-pixel grain.
inline void fill_textured_background(Image& img, RngStream& rng, Rgb base, float lattice_amp = 0.08f,
                                     float grain_amp = 0.02f) {
  constexpr int64_t G = 9;
  float lattice[3][G * G];
  for (int c = 0; c < 3; ++c)
    for (int64_t i = 0; i < G * G; ++i) lattice[c][i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  const uint64_t grain_seed = rng.next_u64();
  for (int64_t y = 0; y < img.h; ++y)
    for (int64_t x = 0; x < img.w; ++x) {
      const float gy = static_cast<float>(y) / static_cast<float>(img.h - 1) * (G - 1);
      const float gx = static_cast<float>(x) / static_cast<float>(img.w - 1) * (G - 1);
      const int64_t iy = std::min<int64_t>(G - 2, static_cast<int64_t>(gy));
      const int64_t ix = std::min<int64_t>(G - 2, static_cast<int64_t>(gx));
      const float fy = gy - iy, fx = gx - ix;
      const float grain =
          (static_cast<float>(splitmix64(grain_seed ^ (static_cast<uint64_t>(y) << 20 ^ x)) >> 40) * 0x1.0p-24f -
           0.5f) *
          2.f;
      const float basec[3] = {base.r, base.g, base.b};
      for (int c = 0; c < 3; ++c) {
        const float v00 = lattice[c][iy * G + ix], v01 = lattice[c][iy * G + ix + 1];
        const float v10 = lattice[c][(iy + 1) * G + ix], v11 = lattice[c][(iy + 1) * G + ix + 1];
        const float v = (v00 * (1 - fx) + v01 * fx) * (1 - fy) + (v10 * (1 - fx) + v11 * fx) * fy;
        img.at(c, y, x) = std::clamp(basec[c] + lattice_amp * v + grain_amp * grain, 0.f, 1.f);
      }
    }
}

/// Bilinear resample of a crop [sy0,sy1)x[sx0,sx1) to the full image size.
inline Image crop_resize(const Image& src, float sy0, float sx0, float sy1, float sx1, int64_t out_h,
                         int64_t out_w) {
  Image out(out_h, out_w);
  const float sh = sy1 - sy0, sw = sx1 - sx0;
  for (int64_t y = 0; y < out_h; ++y)
    for (int64_t x = 0; x < out_w; ++x) {
      const float fy = sy0 + (static_cast<float>(y) + 0.5f) / out_h * sh - 0.5f;
      const float fx = sx0 + (static_cast<float>(x) + 0.5f) / out_w * sw - 0.5f;
      const int64_t iy = std::clamp<int64_t>(static_cast<int64_t>(std::floor(fy)), 0, src.h - 1);
      const int64_t ix = std::clamp<int64_t>(static_cast<int64_t>(std::floor(fx)), 0, src.w - 1);
      const int64_t iy1 = std::min<int64_t>(iy + 1, src.h - 1), ix1 = std::min<int64_t>(ix + 1, src.w - 1);
      const float wy = std::clamp(fy - iy, 0.f, 1.f), wx = std::clamp(fx - ix, 0.f, 1.f);
      for (int c = 0; c < 3; ++c) {
        const float v = (src.at(c, iy, ix) * (1 - wx) + src.at(c, iy, ix1) * wx) * (1 - wy) +
                        (src.at(c, iy1, ix) * (1 - wx) + src.at(c, iy1, ix1) * wx) * wy;
        out.at(c, y, x) = v;
      }
    }
  return out;
}

inline void hflip_inplace(Image& img) {
  for (int c = 0; c < 3; ++c)
    for (int64_t y = 0; y < img.h; ++y)
      for (int64_t x = 0; x < img.w / 2; ++x) std::swap(img.at(c, y, x), img.at(c, y, img.w - 1 - x));
}

}  // namespace vistill::data
