#pragma once

#include <array>
#include <cmath>
#include <string>

#include "qmrs/numcore/ops.hpp"
#include "qmrs/params.hpp"
#include "qmrs/types.hpp"

// Small trainable conv pyramid standing in for a ResNet-FPN backbone, plus
// bilinear RoI sampling onto the 7/14/28/56 grid ladder. Feature maps are
// stored as [height·width, channels] so a 1×1 convolution is a matmul.
namespace qmrs::features {

using nc::GatherPlan;
using nc::Graph;

template <class T>
struct FeatureMap {
  Tensor<T> data;  // [height*width, C]
  int height = 0;
  int width = 0;
  int stride = 1;  // input pixels per map cell

  std::size_t channels() const { return data.cols(); }
};

// Four maps at strides 4, 8, 16, 32 (index 0 finest).
template <class T>
struct FeaturePyramid {
  std::array<FeatureMap<T>, 4> levels;
};

// Grids of side 7, 14, 28, 56 for one box; index = ladder level.
template <class T>
struct RoIFeatureSet {
  std::array<Tensor<T>, kLevels> grids;  // [side*side, C]
};

inline constexpr std::array<const char*, 4> kStages{"stem2", "down2", "down3", "down4"};

template <class T>
void init_backbone(ParamStore<T>& p, int channels, Rng& rng) {
  const auto c = static_cast<std::size_t>(channels);
  auto conv = [&](const std::string& name, std::size_t cin) {
    p.add_uniform("backbone." + name + ".w", {9 * cin, c}, std::sqrt(6.0 / (9.0 * cin)), rng);
    p.add("backbone." + name + ".b", {c});
  };
  conv("stem1", 3);
  for (const char* s : kStages) conv(s, c);
  for (int l = 1; l <= 4; ++l) {
    const std::string n = "backbone.lat" + std::to_string(l);
    p.add_uniform(n + ".w", {c, c}, std::sqrt(3.0 / c), rng);
    p.add(n + ".b", {c});
  }
}

// im2col taps for a 3×3, pad-1 convolution: output pixel p, tap t reads row
// p·9 + t. Out-of-range taps stay empty (zero padding).
template <class T>
GatherPlan<T> im2col_plan(int h, int w, int stride, int& out_h, int& out_w) {
  out_h = (h - 1) / stride + 1;
  out_w = (w - 1) / stride + 1;
  GatherPlan<T> plan;
  plan.offsets.reserve(static_cast<std::size_t>(out_h * out_w * 9 + 1));
  for (int oy = 0; oy < out_h; ++oy)
    for (int ox = 0; ox < out_w; ++ox)
      for (int t = 0; t < 9; ++t) {
        const int y = oy * stride - 1 + t / 3, x = ox * stride - 1 + t % 3;
        if (y >= 0 && y < h && x >= 0 && x < w) plan.tap(static_cast<std::size_t>(y * w + x), T(1));
        plan.end_row();
      }
  return plan;
}

// 3×3 convolution, padding 1, on a [h·w, Cin] map.
template <class T>
Tensor<T> conv3x3(Graph<T>& g, const Tensor<T>& x, int h, int w, const Tensor<T>& weight, const Tensor<T>& bias,
                  int stride, int& out_h, int& out_w) {
  const std::size_t cin = x.cols();
  if (weight.rows() != 9 * cin) {
    raise<DimensionError>("conv3x3: weight ", nc::shape_str(weight.shape()), " does not fit ", cin, " input channels");
  }
  auto cols = nc::gather(g, x, im2col_plan<T>(h, w, stride, out_h, out_w));
  auto patches = nc::reshape(g, cols, {static_cast<std::size_t>(out_h * out_w), 9 * cin});
  return nc::add_row(g, nc::matmul(g, patches, weight), bias);
}

// Nearest-neighbour 2× upsampling cropped to (out_h, out_w).
template <class T>
Tensor<T> upsample2x(Graph<T>& g, const Tensor<T>& x, int w, int out_h, int out_w) {
  GatherPlan<T> plan;
  for (int y = 0; y < out_h; ++y)
    for (int xx = 0; xx < out_w; ++xx) {
      plan.tap(static_cast<std::size_t>((y / 2) * w + xx / 2), T(1));
      plan.end_row();
    }
  return nc::gather(g, x, std::move(plan));
}

template <class T>
Tensor<T> image_tensor(const Image& img) {
  std::vector<T> v(img.rgb.begin(), img.rgb.end());
  return Tensor<T>::from({static_cast<std::size_t>(img.width) * img.height, 3}, std::move(v));
}

// Bottom-up: two stride-2 convs to stride 4, then one stride-2 conv per
// stage (ReLU after each). Top-down: 1×1 lateral plus the upsampled coarser
// level.
template <class T>
FeaturePyramid<T> extract_pyramid(Graph<T>& g, const ParamStore<T>& p, const Image& img) {
  if (img.width < 64 || img.height < 64 || img.width % 32 || img.height % 32) {
    raise<InputError>("image is ", img.width, "x", img.height,
                      "; width and height must be >= 64 and multiples of 32 (pad the image to the next multiple of 32)");
  }
  auto conv = [&](const Tensor<T>& x, int h, int w, const std::string& name, int& oh, int& ow) {
    return nc::relu(g, conv3x3(g, x, h, w, p["backbone." + name + ".w"], p["backbone." + name + ".b"], 2, oh, ow));
  };
  std::array<Tensor<T>, 4> bottom;
  std::array<int, 4> hs{}, ws{};
  int h0 = 0, w0 = 0;
  auto stem = conv(image_tensor<T>(img), img.height, img.width, "stem1", h0, w0);
  bottom[0] = conv(stem, h0, w0, "stem2", hs[0], ws[0]);
  for (int l = 1; l < 4; ++l) bottom[l] = conv(bottom[l - 1], hs[l - 1], ws[l - 1], kStages[l], hs[l], ws[l]);

  FeaturePyramid<T> pyr;
  for (int l = 3; l >= 0; --l) {
    const std::string n = "backbone.lat" + std::to_string(l + 1);
    auto lat = nc::add_row(g, nc::matmul(g, bottom[l], p[n + ".w"]), p[n + ".b"]);
    if (l < 3) lat = nc::add(g, lat, upsample2x(g, pyr.levels[l + 1].data, ws[l + 1], hs[l], ws[l]));
    pyr.levels[l] = FeatureMap<T>{lat, hs[l], ws[l], 4 << l};
  }
  return pyr;
}

// Bilinear sample positions of an S×S grid over `box`, one per cell centre,
// in feature-map index space (clamped to the border).
template <class T>
GatherPlan<T> roi_plan(const FeatureMap<T>& map, const Box& box, int side) {
  GatherPlan<T> plan;
  const double cw = box.width() / side, ch = box.height() / side;
  const double max_x = map.width - 1, max_y = map.height - 1;
  for (int r = 0; r < side; ++r) {
    const double fy = std::clamp((box.y0 + (r + 0.5) * ch) / map.stride - 0.5, 0.0, max_y);
    const int y_lo = static_cast<int>(std::floor(fy));
    const int y_hi = std::min(y_lo + 1, map.height - 1);
    const double wy = fy - y_lo;
    for (int c = 0; c < side; ++c) {
      const double fx = std::clamp((box.x0 + (c + 0.5) * cw) / map.stride - 0.5, 0.0, max_x);
      const int x_lo = static_cast<int>(std::floor(fx));
      const int x_hi = std::min(x_lo + 1, map.width - 1);
      const double wx = fx - x_lo;
      plan.tap(static_cast<std::size_t>(y_lo * map.width + x_lo), static_cast<T>((1 - wy) * (1 - wx)));
      plan.tap(static_cast<std::size_t>(y_lo * map.width + x_hi), static_cast<T>((1 - wy) * wx));
      plan.tap(static_cast<std::size_t>(y_hi * map.width + x_lo), static_cast<T>(wy * (1 - wx)));
      plan.tap(static_cast<std::size_t>(y_hi * map.width + x_hi), static_cast<T>(wy * wx));
      plan.end_row();
    }
  }
  return plan;
}

// Box is clipped to the image extent (map extent × stride) before sampling.
template <class T>
Tensor<T> roi_align(Graph<T>& g, const FeatureMap<T>& map, const Box& box, int side) {
  const Box b = box.clipped(static_cast<double>(map.width) * map.stride, static_cast<double>(map.height) * map.stride);
  if (!b.valid()) {
    raise<InputError>("roi_align: box (", box.x0, ",", box.y0, ",", box.x1, ",", box.y1, ") has zero area after clipping");
  }
  return nc::gather(g, map.data, roi_plan(map, b, side));
}

// 7×7 from stride 32, 14×14 from stride 16, 28×28 from 8, 56×56 from 4.
template <class T>
RoIFeatureSet<T> roi_ladder(Graph<T>& g, const FeaturePyramid<T>& pyr, const Box& box) {
  RoIFeatureSet<T> set;
  for (int l = 0; l < kLevels; ++l) set.grids[l] = roi_align(g, pyr.levels[3 - l], box, level_side(l));
  return set;
}

}  // namespace qmrs::features
