#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "qmrs/error.hpp"

namespace qmrs {

// Grid ladder of the RoI frame: level l has side 7·2^l (7, 14, 28, 56).
inline constexpr int kLevels = 4;
inline constexpr int kFineLevel = 3;
inline constexpr int level_side(int level) { return 7 << level; }

// Interleaved RGB, row-major, values in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> rgb;

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0.0f) {}

  float& at(int x, int y, int c) { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int x, int y, int c) const { return rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  bool operator==(const Image&) const = default;
};

// Axis-aligned box in image pixels, x1/y1 exclusive.
struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  bool valid() const { return x1 > x0 && y1 > y0; }
  Box clipped(double w, double h) const {
    return {std::clamp(x0, 0.0, w), std::clamp(y0, 0.0, h), std::clamp(x1, 0.0, w), std::clamp(y1, 0.0, h)};
  }
  bool operator==(const Box&) const = default;
};

enum class DamageClass : std::uint8_t { kCrackedPaint = 0, kDent = 1, kLoose = 2, kScrape = 3 };
inline constexpr std::array<std::string_view, 4> kClassNames{"Cracked Paint", "Dent", "Loose", "Scrape"};

inline std::string_view class_name(DamageClass c) { return kClassNames[static_cast<std::size_t>(c)]; }

inline DamageClass parse_class(std::string_view name) {
  for (std::size_t i = 0; i < kClassNames.size(); ++i)
    if (kClassNames[i] == name) return static_cast<DamageClass>(i);
  raise<DataError>("unknown class name '", name, "'; expected one of: Cracked Paint, Dent, Loose, Scrape");
}

enum class MaskKind : std::uint8_t { kProbability, kBinary };

// Square mask on one level of the RoI ladder.
struct MaskGrid {
  int level = 0;
  MaskKind kind = MaskKind::kProbability;
  std::vector<float> values;

  MaskGrid() = default;
  MaskGrid(int lvl, MaskKind k, float fill = 0.0f) : level(lvl), kind(k) {
    if (lvl < 0 || lvl >= kLevels) raise<ContractError>("mask level ", lvl, " outside 0..3");
    values.assign(static_cast<std::size_t>(side() * side()), fill);
  }

  int side() const { return level_side(level); }
  float& at(int i, int j) { return values[static_cast<std::size_t>(i * side() + j)]; }
  float at(int i, int j) const { return values[static_cast<std::size_t>(i * side() + j)]; }

  bool is_binary() const {
    return std::all_of(values.begin(), values.end(), [](float v) { return v == 0.0f || v == 1.0f; });
  }
  std::size_t count_foreground() const {
    return static_cast<std::size_t>(std::count_if(values.begin(), values.end(), [](float v) { return v >= 0.5f; }));
  }
  MaskGrid binarized(float threshold = 0.5f) const {
    MaskGrid m(level, MaskKind::kBinary);
    for (std::size_t k = 0; k < values.size(); ++k) m.values[k] = values[k] >= threshold ? 1.0f : 0.0f;
    return m;
  }
  bool operator==(const MaskGrid&) const = default;
};

// One annotated damage instance: the unit of training and evaluation.
struct InstanceSample {
  std::string id;
  Image image;
  Box box;
  DamageClass cls = DamageClass::kDent;
  MaskGrid gt_fine{kFineLevel, MaskKind::kBinary};

  bool operator==(const InstanceSample&) const = default;
};

struct DatasetSplit {
  std::vector<InstanceSample> train, val, test;

  std::size_t size() const { return train.size() + val.size() + test.size(); }
};

}  // namespace qmrs
