#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "qmrs/params.hpp"
#include "qmrs/types.hpp"

// Seeded synthetic damage instances: a textured panel with one foreground
// shape whose outline depends on the class. Images are quantized to 8 bits
// so a PNG round trip is exact.
namespace qmrs::synth {

inline constexpr int kDefaultImageSize = 128;
inline constexpr double kBoxMargin = 0.10;

using ShapeFn = std::function<bool(double, double)>;

namespace detail {

inline constexpr double kTau = 6.283185307179586;

// Shape centred at (cx, cy), rotated by theta; `inside` takes local (u, v).
inline ShapeFn placed(double cx, double cy, double theta, std::function<bool(double, double)> inside) {
  const double c = std::cos(theta), s = std::sin(theta);
  return [=](double x, double y) {
    const double dx = x - cx, dy = y - cy;
    return inside(c * dx + s * dy, -s * dx + c * dy);
  };
}

inline std::function<bool(double, double)> radial(double radius, std::vector<std::array<double, 3>> harmonics) {
  return [=](double u, double v) {
    const double phi = std::atan2(v, u);
    double r = 1.0;
    for (const auto& h : harmonics) r += h[1] * std::cos(h[0] * phi + h[2]);
    return std::hypot(u, v) <= radius * r;
  };
}

// Returns the shape and the radius of a disc that contains it.
inline std::pair<std::function<bool(double, double)>, double> class_shape(DamageClass cls, Rng& rng, double scale) {
  switch (cls) {
    case DamageClass::kCrackedPaint: {
      const double r = rng.uniform(0.18, 0.26) * scale;
      std::vector<std::array<double, 3>> h;
      for (int k = 5; k <= 9; ++k) h.push_back({double(k), rng.uniform(0.04, 0.09), rng.uniform(0, kTau)});
      return {radial(r, h), r * 1.5};
    }
    case DamageClass::kDent: {
      const double r = rng.uniform(0.18, 0.28) * scale;
      std::vector<std::array<double, 3>> h{{2.0, rng.uniform(0.05, 0.2), rng.uniform(0, kTau)},
                                           {3.0, rng.uniform(0.0, 0.08), rng.uniform(0, kTau)}};
      return {radial(r, h), r * 1.3};
    }
    case DamageClass::kLoose: {
      const double a = rng.uniform(0.14, 0.26) * scale, b = rng.uniform(0.14, 0.26) * scale;
      auto f = [=](double u, double v) { return std::pow(std::abs(u / a), 4) + std::pow(std::abs(v / b), 4) <= 1.0; };
      return {f, std::hypot(a, b)};
    }
    case DamageClass::kScrape: {
      const double len = rng.uniform(0.25, 0.36) * scale, half = rng.uniform(0.03, 0.06) * scale;
      const double amp = rng.uniform(0.0, 0.06) * scale, omega = rng.uniform(0.5, 1.5) * kTau / (2 * len);
      const double phase = rng.uniform(0, kTau);
      auto f = [=](double u, double v) { return std::abs(u) <= len && std::abs(v - amp * std::sin(omega * u + phase)) <= half; };
      return {f, std::hypot(len, amp + half)};
    }
  }
  raise<ContractError>("unknown damage class");
}

inline float quantize(double v) { return static_cast<float>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)) / 255.0f; }

}  // namespace detail

// GT mask rasterized at level-3 cell centres of the box.
inline MaskGrid rasterize_roi(const ShapeFn& inside, const Box& box) {
  MaskGrid m(kFineLevel, MaskKind::kBinary);
  for (int r = 0; r < 56; ++r)
    for (int c = 0; c < 56; ++c)
      m.at(r, c) = inside(box.x0 + (c + 0.5) * box.width() / 56.0, box.y0 + (r + 0.5) * box.height() / 56.0) ? 1.0f : 0.0f;
  return m;
}

inline InstanceSample make_sample(Rng& rng, int size, const std::string& id) {
  const double scale = size;
  for (;;) {
    const auto cls = static_cast<DamageClass>(rng.below(4));
    auto [local, extent] = detail::class_shape(cls, rng, scale);
    const double lo = extent * (1 + 2 * kBoxMargin) + 1, hi = size - lo;
    if (hi <= lo) continue;
    const ShapeFn inside = detail::placed(rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(0, detail::kTau), local);

    Image img(size, size);
    const double base[3] = {rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75), rng.uniform(0.25, 0.75)};
    const double contrast = rng.uniform(0.18, 0.35);
    const double tint[3] = {rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0)};
    const double fx = rng.uniform(0.02, 0.08), fy = rng.uniform(0.02, 0.08), ph = rng.uniform(0, detail::kTau);
    int x_min = size, y_min = size, x_max = -1, y_max = -1;
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const bool fg = inside(x + 0.5, y + 0.5);
        if (fg) {
          x_min = std::min(x_min, x), x_max = std::max(x_max, x);
          y_min = std::min(y_min, y), y_max = std::max(y_max, y);
        }
        const double shade = 0.06 * std::sin(fx * x + fy * y + ph);
        for (int ch = 0; ch < 3; ++ch) {
          double v = base[ch] + shade + rng.uniform(-0.04, 0.04);
          if (fg) v -= contrast * tint[ch];
          img.at(x, y, ch) = detail::quantize(v);
        }
      }
    }
    if (x_max < 0) continue;
    const double mx = kBoxMargin * (x_max + 1 - x_min), my = kBoxMargin * (y_max + 1 - y_min);
    const Box box{std::max(0.0, std::floor(x_min - mx)), std::max(0.0, std::floor(y_min - my)),
                  std::min(double(size), std::ceil(x_max + 1 + mx)), std::min(double(size), std::ceil(y_max + 1 + my))};
    MaskGrid gt = rasterize_roi(inside, box);
    const auto fg = gt.count_foreground();
    if (fg == 0 || fg == gt.values.size()) continue;
    return InstanceSample{id, std::move(img), box, cls, std::move(gt)};
  }
}

// Split sizes for n samples: round(0.6n) / round(0.2n) / rest.
inline std::array<std::size_t, 3> split_sizes(std::size_t n) {
  const auto tr = static_cast<std::size_t>(std::llround(0.6 * static_cast<double>(n)));
  const auto va = static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(n)));
  return {tr, va, n - tr - va};
}

inline DatasetSplit generate_synthetic_dataset(std::size_t n, std::uint64_t seed, int image_size = kDefaultImageSize) {
  if (n < 10) raise<ConfigError>("synthetic dataset needs at least 10 samples, got ", n);
  if (image_size < 64 || image_size % 32) raise<ConfigError>("image size must be >= 64 and a multiple of 32, got ", image_size);
  Rng rng(seed);
  std::vector<InstanceSample> all;
  all.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::string id = std::to_string(k);
    id.insert(0, id.size() < 5 ? 5 - id.size() : 0, '0');
    all.push_back(make_sample(rng, image_size, "s" + id));
  }
  std::vector<std::size_t> order(n);
  for (std::size_t k = 0; k < n; ++k) order[k] = k;
  rng.shuffle(order);
  const auto sizes = split_sizes(n);
  DatasetSplit split;
  for (std::size_t k = 0; k < n; ++k) {
    auto& dst = k < sizes[0] ? split.train : k < sizes[0] + sizes[1] ? split.val : split.test;
    dst.push_back(std::move(all[order[k]]));
  }
  return split;
}

// Mirror of image, box and RoI-frame mask about the vertical centre line.
inline InstanceSample flip_horizontal(const InstanceSample& s) {
  InstanceSample out = s;
  const int w = s.image.width;
  for (int y = 0; y < s.image.height; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) out.image.at(x, y, c) = s.image.at(w - 1 - x, y, c);
  out.box = Box{w - s.box.x1, s.box.y0, w - s.box.x0, s.box.y1};
  for (int r = 0; r < 56; ++r)
    for (int c = 0; c < 56; ++c) out.gt_fine.at(r, c) = s.gt_fine.at(r, 55 - c);
  return out;
}

// Horizontal flip with probability p.
inline InstanceSample augment(const InstanceSample& s, Rng& rng, double p = 0.5) {
  return rng.coin(p) ? flip_horizontal(s) : s;
}

}  // namespace qmrs::synth
