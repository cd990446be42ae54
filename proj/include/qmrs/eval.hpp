#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "qmrs/types.hpp"

// COCO-style mask AP over the four damage classes, RoI-frame IoU helpers,
// and the throughput harness.
namespace qmrs::eval {

struct Bitmask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;  // row-major, 0/1

  Bitmask() = default;
  Bitmask(int w, int h) : width(w), height(h), bits(static_cast<std::size_t>(w) * h, 0) {}

  std::uint8_t& at(int x, int y) { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::size_t area() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
  bool operator==(const Bitmask&) const = default;
};

inline double mask_iou(const Bitmask& a, const Bitmask& b) {
  if (a.width != b.width || a.height != b.height) {
    raise<InputError>("mask_iou: ", a.width, "x", a.height, " vs ", b.width, "x", b.height);
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t k = 0; k < a.bits.size(); ++k) {
    inter += a.bits[k] & b.bits[k];
    uni += a.bits[k] | b.bits[k];
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// IoU of two same-level grids binarized at ½.
inline double grid_iou(const MaskGrid& a, const MaskGrid& b) {
  if (a.level != b.level) raise<InputError>("grid_iou: levels ", a.level, " and ", b.level, " differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t k = 0; k < a.values.size(); ++k) {
    const bool x = a.values[k] >= 0.5f, y = b.values[k] >= 0.5f;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Bilinear resampling of a level-1 grid onto the level-3 grid (cell centres).
inline MaskGrid upsample_bilinear(const MaskGrid& coarse) {
  if (coarse.level != 1) raise<ContractError>("upsample_bilinear: expects a level-1 grid");
  MaskGrid out(kFineLevel, MaskKind::kProbability);
  for (int y = 0; y < 56; ++y) {
    const double fy = std::clamp((y + 0.5) / 4.0 - 0.5, 0.0, 13.0);
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, 13);
    const double wy = fy - y0;
    for (int x = 0; x < 56; ++x) {
      const double fx = std::clamp((x + 0.5) / 4.0 - 0.5, 0.0, 13.0);
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, 13);
      const double wx = fx - x0;
      out.at(y, x) = static_cast<float>((1 - wy) * ((1 - wx) * coarse.at(y0, x0) + wx * coarse.at(y0, x1)) +
                                        wy * ((1 - wx) * coarse.at(y1, x0) + wx * coarse.at(y1, x1)));
    }
  }
  return out;
}

// Pastes a level-3 RoI-frame mask into a width×height image frame: pixels
// whose centres fall inside the box sample the grid bilinearly, threshold ½.
inline Bitmask paste_mask(const MaskGrid& fine, const Box& box, int width, int height) {
  if (fine.level != kFineLevel) raise<ContractError>("paste_mask: expects a level-3 grid");
  Bitmask out(width, height);
  if (!box.valid()) return out;
  const double sx = 56.0 / box.width(), sy = 56.0 / box.height();
  const int xa = std::max(0, static_cast<int>(std::floor(box.x0))), xb = std::min(width, static_cast<int>(std::ceil(box.x1)));
  const int ya = std::max(0, static_cast<int>(std::floor(box.y0))), yb = std::min(height, static_cast<int>(std::ceil(box.y1)));
  for (int y = ya; y < yb; ++y) {
    const double cy = y + 0.5;
    if (cy < box.y0 || cy >= box.y1) continue;
    const double fy = std::clamp((cy - box.y0) * sy - 0.5, 0.0, 55.0);
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, 55);
    const double wy = fy - y0;
    for (int x = xa; x < xb; ++x) {
      const double cx = x + 0.5;
      if (cx < box.x0 || cx >= box.x1) continue;
      const double fx = std::clamp((cx - box.x0) * sx - 0.5, 0.0, 55.0);
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, 55);
      const double wx = fx - x0;
      const double v = (1 - wy) * ((1 - wx) * fine.at(y0, x0) + wx * fine.at(y0, x1)) +
                       wy * ((1 - wx) * fine.at(y1, x0) + wx * fine.at(y1, x1));
      out.at(x, y) = v >= 0.5 ? 1 : 0;
    }
  }
  return out;
}

// Confidence of a refined mask: mean probability over its foreground cells.
inline double mask_score(const MaskGrid& refined) {
  double s = 0;
  std::size_t n = 0;
  for (float v : refined.values)
    if (v >= 0.5f) s += v, ++n;
  return n == 0 ? 0.0 : s / static_cast<double>(n);
}

struct PredictionRecord {
  std::string image_id;
  DamageClass cls = DamageClass::kDent;
  double score = 0;
  Bitmask mask;
};

struct GroundTruthRecord {
  std::string image_id;
  DamageClass cls = DamageClass::kDent;
  Bitmask mask;
};

// Half-open area band [lo, hi) in pixels.
struct AreaBand {
  double lo = 0;
  double hi = std::numeric_limits<double>::infinity();

  bool contains(std::size_t area) const { return static_cast<double>(area) >= lo && static_cast<double>(area) < hi; }
};

inline constexpr AreaBand kAllAreas{};
inline constexpr AreaBand kSmall{0, 32.0 * 32.0};
inline constexpr AreaBand kMedium{32.0 * 32.0, 96.0 * 96.0};
inline constexpr AreaBand kLarge{96.0 * 96.0, std::numeric_limits<double>::infinity()};

// Greedy matching in descending score order (stable, so equal scores keep
// input order); each prediction takes the unmatched same-image, same-class
// GT of highest IoU ≥ thresh, ties to the lower GT index. AP is the
// 101-point interpolated area under the precision-recall curve, or empty
// when there is no GT.
inline std::optional<double> average_precision(const std::vector<PredictionRecord>& preds,
                                               const std::vector<GroundTruthRecord>& gts, double thresh) {
  if (!(thresh > 0.0 && thresh < 1.0)) raise<ContractError>("average_precision: threshold must lie in (0,1)");
  if (gts.empty()) return std::nullopt;
  std::vector<std::size_t> order(preds.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return preds[a].score > preds[b].score; });

  std::vector<bool> taken(gts.size(), false);
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const auto& p = preds[order[rank]];
    std::optional<std::size_t> best;
    double best_iou = thresh;
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
      if (taken[gi] || gts[gi].image_id != p.image_id || gts[gi].cls != p.cls) continue;
      const double iou = mask_iou(p.mask, gts[gi].mask);
      if (iou >= best_iou && (!best || iou > best_iou)) {
        best = gi;
        best_iou = iou;
      }
    }
    if (best) {
      taken[*best] = true;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(rank + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
  }
  for (std::size_t k = precision.size(); k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double total = 0;
  for (int t = 0; t <= 100; ++t) {
    const double r = t / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) total += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return total / 101.0;
}

struct MetricReport {
  std::optional<double> ap, ap50, ap75, aps, apm, apl;  // fractions in [0,1]
  std::optional<double> fps, fps_std;

  // Column name → value, in table order.
  std::vector<std::pair<std::string, std::optional<double>>> columns() const {
    return {{"AP", ap}, {"AP50", ap50}, {"AP75", ap75}, {"APs", aps}, {"APm", apm}, {"APl", apl}};
  }
};

inline constexpr std::array<double, 10> kIouThresholds{0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95};

namespace detail {

// Class-averaged AP for one band over the given thresholds; classes without
// GT in the band are skipped, and the cell is undefined if none remain.
inline std::optional<double> banded_ap(const std::vector<PredictionRecord>& preds, const std::vector<GroundTruthRecord>& gts,
                                       const AreaBand& band, const std::vector<double>& thresholds) {
  double sum = 0;
  int classes = 0;
  for (std::size_t c = 0; c < kClassNames.size(); ++c) {
    const auto cls = static_cast<DamageClass>(c);
    std::vector<PredictionRecord> cp;
    std::vector<GroundTruthRecord> cg;
    for (const auto& p : preds)
      if (p.cls == cls && band.contains(p.mask.area())) cp.push_back(p);
    for (const auto& g : gts)
      if (g.cls == cls && band.contains(g.mask.area())) cg.push_back(g);
    if (cg.empty()) continue;
    double s = 0;
    for (double t : thresholds) s += *average_precision(cp, cg, t);
    sum += s / static_cast<double>(thresholds.size());
    ++classes;
  }
  if (classes == 0) return std::nullopt;
  return sum / classes;
}

}  // namespace detail

inline MetricReport coco_metrics(const std::vector<PredictionRecord>& preds, const std::vector<GroundTruthRecord>& gts) {
  const std::vector<double> all(kIouThresholds.begin(), kIouThresholds.end());
  MetricReport r;
  r.ap = detail::banded_ap(preds, gts, kAllAreas, all);
  r.ap50 = detail::banded_ap(preds, gts, kAllAreas, {0.50});
  r.ap75 = detail::banded_ap(preds, gts, kAllAreas, {0.75});
  r.aps = detail::banded_ap(preds, gts, kSmall, all);
  r.apm = detail::banded_ap(preds, gts, kMedium, all);
  r.apl = detail::banded_ap(preds, gts, kLarge, all);
  return r;
}

struct FpsReport {
  double mean = 0;
  double stddev = 0;
  std::vector<double> repeats;  // frames/second per repeat

  // Half-width of the stability band: three standard deviations, floored at
  // 1% of the mean since three repeats give a noisy spread estimate.
  double band() const { return 3.0 * std::max(stddev, 0.01 * mean); }
};

// Calls fn(k % n) for `warmup` untimed iterations, then times `repeats`
// full passes over the n samples.
template <class Fn>
FpsReport measure_fps(Fn&& fn, std::size_t n, std::size_t warmup, std::size_t repeats = 3) {
  if (n == 0) raise<InputError>("measure_fps: needs at least one sample");
  if (repeats == 0) raise<InputError>("measure_fps: needs at least one repeat");
  for (std::size_t k = 0; k < warmup; ++k) fn(k % n);
  FpsReport r;
  for (std::size_t rep = 0; rep < repeats; ++rep) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t k = 0; k < n; ++k) fn(k);
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
    r.repeats.push_back(static_cast<double>(n) / std::max(dt.count(), 1e-9));
  }
  for (double v : r.repeats) r.mean += v;
  r.mean /= static_cast<double>(repeats);
  if (repeats > 1) {
    double ss = 0;
    for (double v : r.repeats) ss += (v - r.mean) * (v - r.mean);
    r.stddev = std::sqrt(ss / static_cast<double>(repeats - 1));
  }
  return r;
}

// Segmentation quality in the RoI frame, averaged over instances.
struct IouSummary {
  double refined = 0;
  double coarse = 0;      // bilinear-upsampled coarse grid
  double empty_tree = 0;  // nearest-upsampled coarse grid (no refinement)
  std::size_t count = 0;
};

inline std::string format_value(const std::optional<double>& v, double scale = 1.0) {
  if (!v) return "undefined";
  std::ostringstream os;
  os << std::fixed << std::setprecision(9) << *v * scale;
  return os.str();
}

// Structured text report. Everything before the [timing] section is a pure
// function of the checkpoint and data; timing and the table row (which
// carries FPS) come last.
inline std::string format_report(const MetricReport& m, const IouSummary& iou, const std::string& split) {
  std::ostringstream os;
  os << "[report]\nsplit = " << split << "\ninstances = " << iou.count << "\n\n[metrics]\n";
  for (const auto& [name, v] : m.columns()) os << name << " = " << format_value(v, 100.0) << "\n";
  os << "\n[undefined]\n";
  for (const auto& [name, v] : m.columns()) os << name << " = " << (v ? "false" : "true") << "\n";
  os << "\n[segmentation]\n"
     << "refined_iou = " << format_value(iou.refined) << "\n"
     << "coarse_iou = " << format_value(iou.coarse) << "\n"
     << "empty_tree_iou = " << format_value(iou.empty_tree) << "\n\n[timing]\n"
     << "FPS = " << format_value(m.fps) << "\nFPS_std = " << format_value(m.fps_std) << "\n\n[table]\n";
  std::string header, row;
  for (const auto& [name, v] : m.columns()) {
    header += name + ",";
    row += (v ? format_value(v, 100.0) : std::string("nan")) + ",";
  }
  os << header << "FPS\n" << row << (m.fps ? format_value(m.fps) : std::string("nan")) << "\n";
  return os.str();
}

}  // namespace qmrs::eval
