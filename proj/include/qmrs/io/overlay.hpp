#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "qmrs/error.hpp"
#include "qmrs/io/png.hpp"
#include "qmrs/types.hpp"

// Side-by-side comparison: [coarse | separator | refined], each panel the
// box crop with its mask blended at α = 0.5 and the mask outline drawn solid.
namespace qmrs::io {

inline constexpr int kSeparatorWidth = 2;
inline constexpr std::array<std::uint8_t, 3> kFillColour{0, 200, 90};
inline constexpr std::array<std::uint8_t, 3> kContourColour{255, 40, 40};
inline constexpr std::array<std::uint8_t, 3> kSeparatorColour{255, 255, 255};
inline constexpr float kOverlayAlpha = 0.5f;

struct CropRect {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
};

// Integer pixel rectangle covering the box, clipped to the image.
inline CropRect crop_rect(const Box& box, int width, int height) {
  CropRect r{std::clamp(static_cast<int>(std::floor(box.x0)), 0, width), std::clamp(static_cast<int>(std::floor(box.y0)), 0, height),
             std::clamp(static_cast<int>(std::ceil(box.x1)), 0, width), std::clamp(static_cast<int>(std::ceil(box.y1)), 0, height)};
  if (r.width() <= 0 || r.height() <= 0) raise<InputError>("overlay: box does not overlap the image");
  return r;
}

namespace detail {

// Mask value at image pixel (x, y): nearest cell of the RoI grid.
inline bool mask_on(const MaskGrid& m, const Box& box, int x, int y) {
  const int s = m.side();
  const int j = static_cast<int>(std::floor((x + 0.5 - box.x0) / box.width() * s));
  const int i = static_cast<int>(std::floor((y + 0.5 - box.y0) / box.height() * s));
  if (i < 0 || j < 0 || i >= s || j >= s) return false;
  return m.at(i, j) >= 0.5f;
}

inline void draw_panel(Raster& out, int ox, const Image& img, const CropRect& c, const MaskGrid& m, const Box& box) {
  const int w = c.width(), h = c.height();
  std::vector<std::uint8_t> on(static_cast<std::size_t>(w) * h);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) on[static_cast<std::size_t>(y) * w + x] = mask_on(m, box, c.x0 + x, c.y0 + y);
  auto at = [&](int x, int y) { return x >= 0 && y >= 0 && x < w && y < h && on[static_cast<std::size_t>(y) * w + x]; };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      auto* px = &out.bytes[(static_cast<std::size_t>(y) * out.width + ox + x) * 3];
      for (int ch = 0; ch < 3; ++ch) px[ch] = to_byte(img.at(c.x0 + x, c.y0 + y, ch));
      if (!at(x, y)) continue;
      const bool edge = !at(x - 1, y) || !at(x + 1, y) || !at(x, y - 1) || !at(x, y + 1);
      for (int ch = 0; ch < 3; ++ch) {
        if (edge) {
          px[ch] = kContourColour[ch];
        } else {
          const float v = (1 - kOverlayAlpha) * px[ch] + kOverlayAlpha * kFillColour[ch];
          px[ch] = static_cast<std::uint8_t>(std::lround(v));
        }
      }
    }
  }
}

}  // namespace detail

inline Raster render_overlay_raster(const Image& image, const MaskGrid& coarse, const MaskGrid& refined, const Box& box) {
  if (!box.valid()) raise<InputError>("overlay: box must have positive area");
  const auto c = crop_rect(box, image.width, image.height);
  Raster out{2 * c.width() + kSeparatorWidth, c.height(), 3, {}};
  out.bytes.assign(static_cast<std::size_t>(out.width) * out.height * 3, 0);
  detail::draw_panel(out, 0, image, c, coarse, box);
  for (int y = 0; y < out.height; ++y)
    for (int x = c.width(); x < c.width() + kSeparatorWidth; ++x)
      std::copy(kSeparatorColour.begin(), kSeparatorColour.end(), &out.bytes[(static_cast<std::size_t>(y) * out.width + x) * 3]);
  detail::draw_panel(out, c.width() + kSeparatorWidth, image, c, refined, box);
  return out;
}

inline std::vector<std::uint8_t> render_overlay(const Image& image, const MaskGrid& coarse, const MaskGrid& refined, const Box& box) {
  return encode_png(render_overlay_raster(image, coarse, refined, box));
}

}  // namespace qmrs::io
