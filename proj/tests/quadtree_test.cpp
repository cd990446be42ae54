#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <tuple>

#include "qmrs/params.hpp"
#include "qmrs/quadtree.hpp"

namespace qmrs {
namespace {

using qt::Quadtree;

MaskGrid filled(int level, float v, MaskKind kind = MaskKind::kBinary) {
  MaskGrid m(level, kind);
  for (auto& x : m.values) x = v;
  return m;
}

MaskGrid random_scores(Rng& rng, int level) {
  MaskGrid m(level, MaskKind::kProbability);
  for (auto& x : m.values) x = static_cast<float>(rng.uniform());
  return m;
}

// Sparse scores: mostly low, a few cells high, so trees stay small.
MaskGrid sparse_scores(Rng& rng, int level, double p_high) {
  MaskGrid m(level, MaskKind::kProbability);
  for (auto& x : m.values) x = static_cast<float>(rng.coin(p_high) ? rng.uniform(0.5, 1.0) : rng.uniform(0.0, 0.5));
  return m;
}

MaskGrid disk(double cx, double cy, double r) {
  MaskGrid m(kFineLevel, MaskKind::kBinary);
  for (int y = 0; y < 56; ++y)
    for (int x = 0; x < 56; ++x) m.at(y, x) = std::hypot(x + 0.5 - cx, y + 0.5 - cy) <= r ? 1.0f : 0.0f;
  return m;
}

MaskGrid random_blob_mask(Rng& rng) {
  MaskGrid m(kFineLevel, MaskKind::kBinary);
  const int blobs = 1 + static_cast<int>(rng.below(3));
  for (int b = 0; b < blobs; ++b) {
    const double cx = rng.uniform(5, 51), cy = rng.uniform(5, 51), r = rng.uniform(3, 18);
    for (int y = 0; y < 56; ++y)
      for (int x = 0; x < 56; ++x)
        if (std::hypot(x + 0.5 - cx, y + 0.5 - cy) <= r) m.at(y, x) = 1.0f;
  }
  return m;
}

void set_random_labels(Rng& rng, Quadtree& t) {
  for (auto& n : t.nodes) n.refined_label = static_cast<float>(rng.uniform());
}

// --- downsample_mask -------------------------------------------------------

TEST(DownsampleMask, AllOnesStaysAllOnesAtEveryLevel) {
  const auto ones = filled(3, 1.0f);
  for (int l = 0; l < 3; ++l)
    for (float v : qt::downsample_mask(ones, l).values) EXPECT_EQ(v, 1.0f);
}

TEST(DownsampleMask, MajorityAndTieToForeground) {
  auto m = filled(1, 0.0f);
  m.at(0, 0) = 1, m.at(0, 1) = 1, m.at(1, 0) = 1;  // {1,1,1,0}
  m.at(0, 2) = 1, m.at(0, 3) = 1;                  // {1,1,0,0}
  m.at(2, 0) = 1;                                  // {1,0,0,0}
  auto d = qt::downsample_mask(m, 0);
  EXPECT_EQ(d.at(0, 0), 1.0f);
  EXPECT_EQ(d.at(0, 1), 1.0f);
  EXPECT_EQ(d.at(1, 0), 0.0f);
  EXPECT_EQ(d.at(1, 1), 0.0f);
}

TEST(DownsampleMask, ContractErrors) {
  EXPECT_THROW(qt::downsample_mask(filled(2, 1.0f), 2), ContractError);
  EXPECT_THROW(qt::downsample_mask(filled(2, 1.0f), 3), ContractError);
  EXPECT_THROW(qt::downsample_mask(filled(2, 0.3f, MaskKind::kProbability), 1), ContractError);
}

TEST(DownsampleMask, MatchesBlockCountOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto fine = random_blob_mask(rng);
    for (int l = 0; l < 3; ++l) {
      const auto d = qt::downsample_mask(fine, l);
      const int f = 56 / level_side(l);
      for (int i = 0; i < level_side(l); ++i)
        for (int j = 0; j < level_side(l); ++j) {
          double mean = 0;
          for (int y = i * f; y < (i + 1) * f; ++y)
            for (int x = j * f; x < (j + 1) * f; ++x) mean += fine.at(y, x);
          mean /= f * f;
          ASSERT_EQ(d.at(i, j), mean >= 0.5 ? 1.0f : 0.0f);
        }
    }
  }
}

// --- gt_incoherence ----------------------------------------------------------

TEST(GtIncoherence, ConstantMaskIsCoherent) {
  for (float v : {0.0f, 1.0f})
    for (int l : {1, 2})
      for (float x : qt::gt_incoherence(filled(3, v), l).values) EXPECT_EQ(x, 0.0f);
}

TEST(GtIncoherence, GridAlignedHalfPlanesAreCoherent) {
  // Boundaries on multiples of 4 align with every level-1 and level-2 cell.
  for (int cut = 0; cut <= 56; cut += 4) {
    for (int orient = 0; orient < 4; ++orient) {
      MaskGrid m(kFineLevel, MaskKind::kBinary);
      for (int y = 0; y < 56; ++y)
        for (int x = 0; x < 56; ++x) {
          const int c = orient % 2 == 0 ? x : y;
          m.at(y, x) = (orient < 2 ? c < cut : c >= cut) ? 1.0f : 0.0f;
        }
      for (int l : {1, 2})
        for (float x : qt::gt_incoherence(m, l).values) ASSERT_EQ(x, 0.0f) << "cut " << cut << " orient " << orient;
    }
  }
}

// Straight-line reference: pooled values computed from raw pixel counts.
MaskGrid incoherence_oracle(const MaskGrid& fine, int level) {
  auto pooled = [&](int l, int i, int j) {
    const int f = 56 / level_side(l);
    int ones = 0;
    for (int y = i * f; y < (i + 1) * f; ++y)
      for (int x = j * f; x < (j + 1) * f; ++x) ones += fine.at(y, x) > 0.5f;
    return 2 * ones >= f * f ? 1 : 0;
  };
  MaskGrid out(level, MaskKind::kBinary);
  for (int i = 0; i < out.side(); ++i)
    for (int j = 0; j < out.side(); ++j) {
      const int p = pooled(level, i, j);
      bool any = false;
      for (int di = 0; di < 2; ++di)
        for (int dj = 0; dj < 2; ++dj) any = any || pooled(level + 1, 2 * i + di, 2 * j + dj) != p;
      out.at(i, j) = any ? 1.0f : 0.0f;
    }
  return out;
}

TEST(GtIncoherence, CenteredDiskMatchesBruteForce) {
  const auto m = disk(28, 28, 20);
  for (int l : {1, 2}) {
    const auto got = qt::gt_incoherence(m, l);
    EXPECT_EQ(got.values, incoherence_oracle(m, l).values);
    EXPECT_GT(got.count_foreground(), 0u);
  }
}

TEST(GtIncoherence, RandomMasksMatchBruteForce) {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const auto m = random_blob_mask(rng);
    for (int l : {1, 2}) ASSERT_EQ(qt::gt_incoherence(m, l).values, incoherence_oracle(m, l).values);
  }
}

// --- build_quadtree ----------------------------------------------------------

TEST(BuildQuadtree, ZeroScoresGiveEmptyTree) {
  EXPECT_TRUE(qt::build_quadtree(filled(1, 0, MaskKind::kProbability), filled(2, 0, MaskKind::kProbability), 0.5f).empty());
}

TEST(BuildQuadtree, OneRootWithCoherentChildrenGivesFiveNodes) {
  auto s1 = filled(1, 0.1f, MaskKind::kProbability);
  auto s2 = filled(2, 0.2f, MaskKind::kProbability);
  s1.at(3, 5) = 0.9f;
  const auto t = qt::build_quadtree(s1, s2, 0.5f);
  ASSERT_EQ(t.size(), 5u);
  EXPECT_EQ(t.nodes[0].level, 1);
  for (std::size_t k = 1; k < 5; ++k) {
    EXPECT_EQ(t.nodes[k].level, 2);
    EXPECT_EQ(t.nodes[k].parent, std::optional<std::size_t>(0));
  }
}

// Enumeration oracle for the spawn rule without a cap.
std::set<std::tuple<int, int, int>> spawn_oracle(const MaskGrid& s1, const MaskGrid& s2, float thr) {
  std::set<std::tuple<int, int, int>> out;
  for (int i = 0; i < 14; ++i)
    for (int j = 0; j < 14; ++j) {
      if (s1.at(i, j) < thr) continue;
      out.insert({1, i, j});
      for (int a = 2 * i; a < 2 * i + 2; ++a)
        for (int b = 2 * j; b < 2 * j + 2; ++b) {
          out.insert({2, a, b});
          if (s2.at(a, b) < thr) continue;
          for (int c = 2 * a; c < 2 * a + 2; ++c)
            for (int d = 2 * b; d < 2 * b + 2; ++d) out.insert({3, c, d});
        }
    }
  return out;
}

std::set<std::tuple<int, int, int>> node_set(const Quadtree& t) {
  std::set<std::tuple<int, int, int>> s;
  for (const auto& n : t.nodes) s.insert({n.level, n.i, n.j});
  return s;
}

TEST(BuildQuadtree, OneRootWithIncoherentChildrenGivesTwentyOneNodes) {
  auto s1 = filled(1, 0.1f, MaskKind::kProbability);
  auto s2 = filled(2, 0.2f, MaskKind::kProbability);
  s1.at(6, 2) = 0.7f;
  for (int a = 12; a < 14; ++a)
    for (int b = 4; b < 6; ++b) s2.at(a, b) = 0.8f;
  const auto t = qt::build_quadtree(s1, s2, 0.5f);
  EXPECT_EQ(t.size(), 21u);
  EXPECT_EQ(node_set(t), spawn_oracle(s1, s2, 0.5f));
}

TEST(BuildQuadtree, MatchesSpawnOracleWithoutCap) {
  Rng rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const auto s1 = sparse_scores(rng, 1, 0.2), s2 = sparse_scores(rng, 2, 0.4);
    const float thr = static_cast<float>(rng.uniform(0.3, 0.8));
    const auto t = qt::build_quadtree(s1, s2, thr, 1u << 20);
    ASSERT_EQ(node_set(t), spawn_oracle(s1, s2, thr));
    ASSERT_EQ(node_set(t).size(), t.size());
  }
}

TEST(BuildQuadtree, ParentChildGeometryHolds) {
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const auto t = qt::build_quadtree(random_scores(rng, 1), random_scores(rng, 2), static_cast<float>(rng.uniform(0.05, 0.95)),
                                      rng.below(600));
    for (const auto& n : t.nodes) {
      if (n.level == 1) {
        ASSERT_FALSE(n.parent.has_value());
        continue;
      }
      ASSERT_TRUE(n.parent.has_value());
      const auto& p = t.nodes[*n.parent];
      ASSERT_EQ(p.level, n.level - 1);
      ASSERT_EQ(p.i, n.i / 2);
      ASSERT_EQ(p.j, n.j / 2);
    }
  }
}

TEST(BuildQuadtree, CapKeepsHighestScoringRootsFirst) {
  auto s1 = filled(1, 0.0f, MaskKind::kProbability);
  auto s2 = filled(2, 0.0f, MaskKind::kProbability);
  s1.at(0, 0) = 0.6f;
  s1.at(5, 5) = 0.9f;
  s1.at(2, 2) = 0.9f;
  auto t = qt::build_quadtree(s1, s2, 0.5f, 2);
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(std::tie(t.nodes[0].i, t.nodes[0].j), std::make_tuple(2, 2));
  EXPECT_EQ(std::tie(t.nodes[1].i, t.nodes[1].j), std::make_tuple(5, 5));
  EXPECT_TRUE(qt::build_quadtree(s1, s2, 0.5f, 0).empty());
  EXPECT_LE(qt::build_quadtree(s1, s2, 0.5f, 7).size(), 7u);
}

TEST(BuildQuadtree, RaisingThresholdNeverAddsNodesWhenUncapped) {
  Rng rng(10);
  for (int trial = 0; trial < 200; ++trial) {
    const auto s1 = random_scores(rng, 1), s2 = random_scores(rng, 2);
    const float lo = static_cast<float>(rng.uniform(0.05, 0.95));
    const float hi = static_cast<float>(rng.uniform(lo, 0.99));
    const auto a = node_set(qt::build_quadtree(s1, s2, hi, 1u << 20));
    const auto b = node_set(qt::build_quadtree(s1, s2, lo, 1u << 20));
    ASSERT_TRUE(std::includes(b.begin(), b.end(), a.begin(), a.end()));
  }
}

TEST(BuildQuadtree, InvalidThresholdRejected) {
  const auto s1 = filled(1, 0, MaskKind::kProbability);
  const auto s2 = filled(2, 0, MaskKind::kProbability);
  EXPECT_THROW(qt::build_quadtree(s1, s2, 0.0f), ContractError);
  EXPECT_THROW(qt::build_quadtree(s1, s2, 1.0f), ContractError);
  EXPECT_THROW(qt::build_quadtree(s2, s1, 0.5f), ContractError);
}

// --- serialize_sequence ------------------------------------------------------

TEST(SerializeSequence, EmptyTreeGivesContextOnly) {
  const auto seq = qt::serialize_sequence(Quadtree{});
  ASSERT_EQ(seq.size(), 49u);
  for (std::size_t k = 0; k < 49; ++k) {
    EXPECT_EQ(seq[k].source, qt::EntrySource::kContext);
    EXPECT_EQ(seq[k].level, 0);
    EXPECT_EQ(seq[k].i, static_cast<int>(k / 7));
    EXPECT_EQ(seq[k].j, static_cast<int>(k % 7));
  }
}

TEST(SerializeSequence, FiveNodeTreeIsOrdered) {
  auto s1 = filled(1, 0.1f, MaskKind::kProbability);
  s1.at(3, 5) = 0.9f;
  auto t = qt::build_quadtree(s1, filled(2, 0.2f, MaskKind::kProbability), 0.5f);
  std::swap(t.nodes[1], t.nodes[4]);  // ordering must not depend on storage order
  const auto seq = qt::serialize_sequence(t);
  ASSERT_EQ(seq.size(), 54u);
  for (std::size_t k = 50; k < 54; ++k)
    EXPECT_LT(std::make_tuple(seq[k - 1].level, seq[k - 1].i, seq[k - 1].j), std::make_tuple(seq[k].level, seq[k].i, seq[k].j));
  EXPECT_EQ(seq[49].level, 1);
}

TEST(SerializeSequence, RoundTripIsBijective) {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const auto t = qt::build_quadtree(sparse_scores(rng, 1, 0.15), sparse_scores(rng, 2, 0.3), 0.5f, rng.below(400));
    const auto seq = qt::serialize_sequence(t);
    ASSERT_EQ(seq.size(), 49 + t.size());
    std::set<std::size_t> seen;
    for (std::size_t k = 49; k < seq.size(); ++k) {
      const auto& e = seq[k];
      ASSERT_EQ(e.source, qt::EntrySource::kTreeNode);
      ASSERT_TRUE(e.node.has_value());
      const auto& n = t.nodes[*e.node];
      ASSERT_EQ(std::tie(n.level, n.i, n.j), std::tie(e.level, e.i, e.j));
      ASSERT_EQ(t.find(e.level, e.i, e.j), e.node);
      seen.insert(*e.node);
    }
    ASSERT_EQ(seen.size(), t.size());
  }
}

TEST(SerializeSequence, DuplicateNodeIsRejected) {
  Quadtree t;
  t.nodes.push_back({1, 2, 3, std::nullopt, 0.9f, std::nullopt});
  t.nodes.push_back({1, 2, 3, std::nullopt, 0.8f, std::nullopt});
  EXPECT_THROW(qt::serialize_sequence(t), ContractError);
}

TEST(SequenceEntry, FinestLevelCoordinates) {
  qt::SequenceEntry e{qt::EntrySource::kTreeNode, 1, 2, 5, 0};
  EXPECT_DOUBLE_EQ(e.fine_x(), 22.0);
  EXPECT_DOUBLE_EQ(e.fine_y(), 10.0);
  qt::SequenceEntry c{qt::EntrySource::kContext, 0, 0, 6, std::nullopt};
  EXPECT_DOUBLE_EQ(c.fine_x(), 52.0);
  EXPECT_DOUBLE_EQ(c.fine_y(), 4.0);
}

// --- propagation ---------------------------------------------------------------

TEST(PropagateLabels, EmptyTreeIsNearestUpsample) {
  Rng rng(3);
  const auto coarse = random_scores(rng, 1);
  const auto out = qt::propagate_labels(coarse, Quadtree{});
  for (int y = 0; y < 56; ++y)
    for (int x = 0; x < 56; ++x) ASSERT_EQ(out.at(y, x), coarse.at(y / 4, x / 4));
  EXPECT_EQ(qt::brute_force_assemble(coarse, Quadtree{}).values, out.values);
}

TEST(PropagateLabels, SingleFineNodeSetsOnePixel) {
  Quadtree t;
  t.nodes.push_back({3, 17, 40, std::nullopt, 1.0f, 1.0f});
  const auto coarse = filled(1, 0.0f, MaskKind::kProbability);
  const auto out = qt::propagate_labels(coarse, t);
  EXPECT_EQ(out.count_foreground(), 1u);
  EXPECT_EQ(out.at(17, 40), 1.0f);
  EXPECT_EQ(qt::brute_force_assemble(coarse, t).values, out.values);
}

TEST(PropagateLabels, FullFineCoverageIgnoresCoarse) {
  Quadtree t;
  for (int i = 0; i < 56; ++i)
    for (int j = 0; j < 56; ++j) t.nodes.push_back({3, i, j, std::nullopt, 1.0f, 0.25f});
  Rng rng(1);
  const auto coarse = random_scores(rng, 1);
  for (float v : qt::brute_force_assemble(coarse, t).values) ASSERT_EQ(v, 0.25f);
  for (float v : qt::propagate_labels(coarse, t).values) ASSERT_EQ(v, 0.25f);
}

TEST(PropagateLabels, MissingLabelNamesTheNode) {
  Quadtree t;
  t.nodes.push_back({2, 7, 9, std::nullopt, 0.9f, std::nullopt});
  try {
    qt::propagate_labels(filled(1, 0.0f, MaskKind::kProbability), t);
    FAIL() << "expected ContractError";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("(7,9)"), std::string::npos) << e.what();
  }
  EXPECT_THROW(qt::brute_force_assemble(filled(1, 0.0f, MaskKind::kProbability), t), ContractError);
}

TEST(PropagateLabels, EqualsBruteForceOnRandomTriples) {
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    auto t = qt::build_quadtree(sparse_scores(rng, 1, 0.3), sparse_scores(rng, 2, 0.5), 0.5f, rng.below(2000));
    set_random_labels(rng, t);
    const auto coarse = random_scores(rng, 1);
    ASSERT_EQ(qt::propagate_labels(coarse, t).values, qt::brute_force_assemble(coarse, t).values) << "trial " << trial;
  }
}

TEST(PropagateLabels, PerfectLabelsReproduceGroundTruthUnderCoverage) {
  Rng rng(22);
  for (int trial = 0; trial < 50; ++trial) {
    const auto gt = random_blob_mask(rng);
    const auto levels = qt::gt_pyramid(gt);
    auto t = qt::gt_quadtree(gt, 1u << 20);
    for (auto& n : t.nodes) n.refined_label = levels[static_cast<std::size_t>(n.level)].at(n.i, n.j);
    const auto out = qt::propagate_labels(levels[1], t);
    int covered = 0;
    for (int y = 0; y < 56; ++y)
      for (int x = 0; x < 56; ++x) {
        bool cov = false;
        for (const auto& n : t.nodes) {
          const int f = 1 << (kFineLevel - n.level);
          cov = cov || (y / f == n.i && x / f == n.j);
        }
        if (!cov) continue;
        ++covered;
        ASSERT_EQ(out.at(y, x), gt.at(y, x)) << "trial " << trial << " pixel " << y << "," << x;
      }
    EXPECT_GT(covered, 0);
  }
}

TEST(GtPyramid, LevelsHaveLadderSides) {
  const auto levels = qt::gt_pyramid(disk(20, 30, 10));
  for (int l = 0; l < kLevels; ++l) EXPECT_EQ(levels[static_cast<std::size_t>(l)].side(), level_side(l));
}

}  // namespace
}  // namespace qmrs
