#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <tuple>
#include <vector>

#include "qmrs/types.hpp"

// Tree-shaped pieces of the refiner: per-level ground truth, quadtree
// construction from incoherence scores, node serialization, and assembly of
// the fine mask from refined node labels.
namespace qmrs::qt {

inline constexpr std::size_t kContextEntries = 49;
inline constexpr std::size_t kDefaultNodeCap = 2000;
inline constexpr float kDefaultThreshold = 0.5f;

// Majority pooling of a binary mask onto a coarser level; a block that is
// exactly half foreground resolves to foreground.
inline MaskGrid downsample_mask(const MaskGrid& fine, int to_level) {
  if (to_level >= fine.level || to_level < 0) {
    raise<ContractError>("downsample_mask: target level ", to_level, " must be below source level ", fine.level);
  }
  if (!fine.is_binary()) raise<ContractError>("downsample_mask: source mask must be binary");
  const int f = 1 << (fine.level - to_level);
  MaskGrid out(to_level, MaskKind::kBinary);
  const int s = out.side();
  for (int i = 0; i < s; ++i) {
    for (int j = 0; j < s; ++j) {
      int ones = 0;
      for (int di = 0; di < f; ++di)
        for (int dj = 0; dj < f; ++dj) ones += fine.at(i * f + di, j * f + dj) > 0.5f ? 1 : 0;
      out.at(i, j) = 2 * ones >= f * f ? 1.0f : 0.0f;
    }
  }
  return out;
}

// Binary grid marking cells at `level` whose four children one level finer
// disagree with the cell's own pooled value.
inline MaskGrid gt_incoherence(const MaskGrid& gt_fine, int level) {
  if (gt_fine.level != kFineLevel) raise<ContractError>("gt_incoherence: expects a level-3 mask");
  if (level < 1 || level > 2) raise<ContractError>("gt_incoherence: level must be 1 or 2, got ", level);
  const MaskGrid parent = downsample_mask(gt_fine, level);
  const MaskGrid child = level + 1 == kFineLevel ? gt_fine : downsample_mask(gt_fine, level + 1);
  MaskGrid out(level, MaskKind::kBinary);
  for (int i = 0; i < out.side(); ++i) {
    for (int j = 0; j < out.side(); ++j) {
      const float v = parent.at(i, j);
      bool differs = false;
      for (int d = 0; d < 4; ++d) differs = differs || child.at(2 * i + d / 2, 2 * j + d % 2) != v;
      out.at(i, j) = differs ? 1.0f : 0.0f;
    }
  }
  return out;
}

struct QuadtreeNode {
  int level = 1;  // 1..3
  int i = 0, j = 0;
  std::optional<std::size_t> parent;  // index into Quadtree::nodes
  float incoherence_score = 0.0f;
  std::optional<float> refined_label;
};

struct Quadtree {
  std::vector<QuadtreeNode> nodes;

  std::size_t size() const { return nodes.size(); }
  bool empty() const { return nodes.empty(); }

  std::optional<std::size_t> find(int level, int i, int j) const {
    for (std::size_t k = 0; k < nodes.size(); ++k)
      if (nodes[k].level == level && nodes[k].i == i && nodes[k].j == j) return k;
    return std::nullopt;
  }
};

namespace detail {

struct Candidate {
  float score;
  int i, j;
  std::optional<std::size_t> parent;
};

inline void sort_candidates(std::vector<Candidate>& c) {
  std::stable_sort(c.begin(), c.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::tie(a.i, a.j) < std::tie(b.i, b.j);
  });
}

inline void admit(Quadtree& tree, std::vector<Candidate> cands, int level, std::size_t cap) {
  sort_candidates(cands);
  for (const auto& c : cands) {
    if (tree.size() >= cap) break;
    tree.nodes.push_back(QuadtreeNode{level, c.i, c.j, c.parent, c.score, std::nullopt});
  }
}

}  // namespace detail

// Level-1 cells scoring ≥ threshold become roots and always spawn their four
// level-2 children; a level-2 node scoring ≥ threshold spawns four level-3
// children (which inherit its score). When the cap binds, each level keeps its
// highest-scoring candidates first, ties by (i, j).
inline Quadtree build_quadtree(const MaskGrid& scores_l1, const MaskGrid& scores_l2, float threshold,
                               std::size_t cap = kDefaultNodeCap) {
  if (scores_l1.level != 1 || scores_l2.level != 2) raise<ContractError>("build_quadtree: expects level-1 and level-2 score grids");
  if (!(threshold > 0.0f && threshold < 1.0f)) raise<ContractError>("build_quadtree: threshold must lie in (0,1)");
  Quadtree tree;

  std::vector<detail::Candidate> roots;
  for (int i = 0; i < 14; ++i)
    for (int j = 0; j < 14; ++j)
      if (scores_l1.at(i, j) >= threshold) roots.push_back({scores_l1.at(i, j), i, j, std::nullopt});
  detail::admit(tree, std::move(roots), 1, cap);

  const std::size_t n1 = tree.size();
  std::vector<detail::Candidate> mids;
  for (std::size_t k = 0; k < n1; ++k) {
    const auto& r = tree.nodes[k];
    for (int d = 0; d < 4; ++d) {
      const int ci = 2 * r.i + d / 2, cj = 2 * r.j + d % 2;
      mids.push_back({scores_l2.at(ci, cj), ci, cj, k});
    }
  }
  detail::admit(tree, std::move(mids), 2, cap);

  const std::size_t n2 = tree.size();
  std::vector<detail::Candidate> leaves;
  for (std::size_t k = n1; k < n2; ++k) {
    const auto& m = tree.nodes[k];
    if (m.incoherence_score < threshold) continue;
    for (int d = 0; d < 4; ++d) leaves.push_back({m.incoherence_score, 2 * m.i + d / 2, 2 * m.j + d % 2, k});
  }
  detail::admit(tree, std::move(leaves), 3, cap);
  return tree;
}

enum class EntrySource : std::uint8_t { kContext, kTreeNode };

struct SequenceEntry {
  EntrySource source = EntrySource::kContext;
  int level = 0;
  int i = 0, j = 0;
  std::optional<std::size_t> node;  // tree index for tree-node entries

  // Position on the 56×56 grid of the cell centre: (x, y) = ((j+½)·2^(3−l), (i+½)·2^(3−l)).
  double fine_x() const { return (j + 0.5) * (1 << (kFineLevel - level)); }
  double fine_y() const { return (i + 0.5) * (1 << (kFineLevel - level)); }
};

struct NodeSequence {
  std::vector<SequenceEntry> entries;

  std::size_t size() const { return entries.size(); }
  const SequenceEntry& operator[](std::size_t k) const { return entries[k]; }
};

// The 49 context cells of the 7×7 grid (row-major), then tree nodes ordered
// by (level, i, j).
inline NodeSequence serialize_sequence(const Quadtree& tree) {
  NodeSequence seq;
  seq.entries.reserve(kContextEntries + tree.size());
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 7; ++j) seq.entries.push_back({EntrySource::kContext, 0, i, j, std::nullopt});

  std::vector<std::size_t> order(tree.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  auto key = [&](std::size_t k) {
    const auto& n = tree.nodes[k];
    return std::tie(n.level, n.i, n.j);
  };
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto& n = tree.nodes[order[k]];
    if (k > 0 && key(order[k - 1]) == key(order[k])) {
      raise<ContractError>("serialize_sequence: duplicate node at level ", n.level, " cell (", n.i, ",", n.j, ")");
    }
    if (n.level < 1 || n.level > 3 || n.i < 0 || n.j < 0 || n.i >= level_side(n.level) || n.j >= level_side(n.level)) {
      raise<ContractError>("serialize_sequence: node (", n.level, ",", n.i, ",", n.j, ") outside its grid");
    }
    seq.entries.push_back({EntrySource::kTreeNode, n.level, n.i, n.j, order[k]});
  }
  return seq;
}

// Each level-1 cell fills its 4×4 block of the level-3 grid.
inline MaskGrid upsample_nearest(const MaskGrid& coarse) {
  if (coarse.level != 1) raise<ContractError>("upsample_nearest: expects a level-1 mask");
  MaskGrid out(kFineLevel, coarse.kind);
  for (int y = 0; y < 56; ++y)
    for (int x = 0; x < 56; ++x) out.at(y, x) = coarse.at(y / 4, x / 4);
  return out;
}

namespace detail {

inline float label_of(const QuadtreeNode& n) {
  if (!n.refined_label) {
    raise<ContractError>("node at level ", n.level, " cell (", n.i, ",", n.j, ") has no refined label");
  }
  return *n.refined_label;
}

}  // namespace detail

// Quadtree propagation: nearest-neighbour upsample of the coarse mask, then
// levels 1, 2, 3 in turn overwrite their full level-3 footprints.
inline MaskGrid propagate_labels(const MaskGrid& coarse, const Quadtree& tree) {
  for (const auto& n : tree.nodes) detail::label_of(n);
  MaskGrid out = upsample_nearest(coarse);
  out.kind = MaskKind::kProbability;
  for (int level = 1; level <= kFineLevel; ++level) {
    const int f = 1 << (kFineLevel - level);
    for (const auto& n : tree.nodes) {
      if (n.level != level) continue;
      const float v = *n.refined_label;
      for (int dy = 0; dy < f; ++dy)
        for (int dx = 0; dx < f; ++dx) out.at(n.i * f + dy, n.j * f + dx) = v;
    }
  }
  return out;
}

// Per-pixel reference for propagate_labels: the deepest node whose footprint
// covers the pixel supplies its label, otherwise the coarse cell does.
inline MaskGrid brute_force_assemble(const MaskGrid& coarse, const Quadtree& tree) {
  if (coarse.level != 1) raise<ContractError>("brute_force_assemble: expects a level-1 mask");
  for (const auto& n : tree.nodes) detail::label_of(n);
  MaskGrid out(kFineLevel, MaskKind::kProbability);
  for (int y = 0; y < 56; ++y) {
    for (int x = 0; x < 56; ++x) {
      int best_level = 0;
      float v = coarse.at(y / 4, x / 4);
      for (const auto& n : tree.nodes) {
        const int f = 1 << (kFineLevel - n.level);
        if (y / f == n.i && x / f == n.j && n.level > best_level) {
          best_level = n.level;
          v = *n.refined_label;
        }
      }
      out.at(y, x) = v;
    }
  }
  return out;
}

// Tree built from ground-truth incoherence (scores 0/1 at threshold ½).
inline Quadtree gt_quadtree(const MaskGrid& gt_fine, std::size_t cap = kDefaultNodeCap) {
  return build_quadtree(gt_incoherence(gt_fine, 1), gt_incoherence(gt_fine, 2), kDefaultThreshold, cap);
}

// Ground-truth label of a sequence entry at its own level.
inline float entry_target(const SequenceEntry& e, const std::array<MaskGrid, kLevels>& gt_levels) {
  return gt_levels[static_cast<std::size_t>(e.level)].at(e.i, e.j);
}

inline std::array<MaskGrid, kLevels> gt_pyramid(const MaskGrid& gt_fine) {
  return {downsample_mask(gt_fine, 0), downsample_mask(gt_fine, 1), downsample_mask(gt_fine, 2), gt_fine};
}

}  // namespace qmrs::qt
