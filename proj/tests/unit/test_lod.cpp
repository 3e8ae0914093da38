#include "streamlod/lod.hpp"
#include "streamlod/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace streamlod;

namespace {

Anchor bare_anchor(AnchorId id, int level, const Vec3& center, int k = 1) {
  Anchor a;
  a.id = id;
  a.level = level;
  a.center = center;
  a.offsets = RowMatX3::Zero(k, 3);
  a.raw_scales = RowMatX3::Zero(k, 3);
  return a;
}

LoDConfig config(int levels, double d_max, double d_min) {
  LoDConfig c;
  c.delta = 1.0;
  c.levels = levels;
  c.d_max = d_max;
  c.d_min = d_min;
  c.l_max = levels - 1;
  c.k = 1;
  return c;
}

}  // namespace

TEST(LevelCount, Examples) {
  EXPECT_EQ(level_count(8.0, 1.0), 4);
  EXPECT_EQ(level_count(1.0, 1.0), 1);
  EXPECT_EQ(level_count(6.0, 1.0), 4);  // log2 6 = 2.58
  EXPECT_EQ(level_count(5.0, 1.0), 3);  // log2 5 = 2.32
}

TEST(LevelCount, DegenerateBoundsThrow) {
  EXPECT_THROW(level_count(1.0, 0.0), std::invalid_argument);
  EXPECT_THROW(level_count(1.0, 2.0), std::invalid_argument);
}

TEST(AnchorBaseLevel, Examples) {
  EXPECT_EQ(anchor_base_level(8.0, 2.0, 4), 2);
  EXPECT_EQ(anchor_base_level(8.0, 8.0, 4), 0);
  EXPECT_EQ(anchor_base_level(8.0, 3.0, 4), 1);
}

TEST(AnchorBaseLevel, ClampsToRange) {
  EXPECT_EQ(anchor_base_level(8.0, 100.0, 4), 0);
  EXPECT_EQ(anchor_base_level(8.0, 0.01, 4), 3);
}

TEST(PreliminaryActiveLayer, ClampsAtZeroAndL) {
  EXPECT_EQ(preliminary_active_layer(1.0, 1.0, 2.0, 4), 0);
  EXPECT_EQ(preliminary_active_layer(8.0, 1.0, 2.0, 4), 3);
  EXPECT_EQ(preliminary_active_layer(1000.0, 1.0, 2.0, 4), 4);
  EXPECT_EQ(preliminary_active_layer(0.1, 1.0, 2.0, 4), 0);
}

TEST(InitHierarchy, SinglePointOneAnchorPerLevel) {
  LoDConfig c;
  c.delta = 1.0;
  c.k = 3;
  c.l_max = 1;
  InitOptions opts;
  opts.levels = 2;
  const std::vector<Vec3> pts = {Vec3(0.3, 0.7, 1.2)};
  const LoDHierarchy h = init_hierarchy(pts, 2.0, 1.0, c, opts);
  ASSERT_EQ(h.size(), 2u);
  EXPECT_EQ(h.anchors()[0].level, 0);
  EXPECT_TRUE(h.anchors()[0].center.isApprox(Vec3(0.5, 0.5, 1.5)));
  EXPECT_EQ(h.anchors()[1].level, 1);
  EXPECT_TRUE(h.anchors()[1].center.isApprox(Vec3(0.25, 0.75, 1.25)));
  for (const auto& a : h.anchors()) {
    EXPECT_EQ(a.k(), 3);
    EXPECT_LE(a.offsets.cwiseAbs().maxCoeff(), opts.offset_jitter);
  }
}

TEST(InitHierarchy, CellsUniqueAndCoverEveryPoint) {
  SplitMix64 rng(3);
  std::vector<Vec3> pts;
  for (int i = 0; i < 300; ++i) pts.emplace_back(rng.normal(), rng.normal(), rng.normal());
  LoDConfig c;
  c.delta = 0.8;
  c.k = 2;
  c.l_max = 3;
  const LoDHierarchy h = init_hierarchy(pts, 8.0, 1.0, c);
  EXPECT_EQ(h.config().levels, 4);
  std::set<VoxelKey> cells;
  for (const auto& a : h.anchors()) EXPECT_TRUE(cells.insert(voxel_of(a.center, a.level, c.delta)).second);
  for (const auto& p : pts)
    for (int l = 0; l < 4; ++l) EXPECT_TRUE(h.lookup(voxel_of(p, l, c.delta)).has_value());
}

TEST(InitHierarchy, EmptyCloudThrows) {
  EXPECT_THROW(init_hierarchy({}, 2.0, 1.0, LoDConfig{}), std::invalid_argument);
}

TEST(LoDHierarchy, DuplicateCellOrIdThrows) {
  LoDHierarchy h(config(2, 4.0, 1.0));
  h.add(bare_anchor(1, 0, Vec3(0.5, 0.5, 0.5)));
  EXPECT_THROW(h.add(bare_anchor(2, 0, Vec3(0.6, 0.6, 0.6))), std::invalid_argument);
  EXPECT_THROW(h.add(bare_anchor(1, 1, Vec3(3.5, 0.5, 0.5))), std::invalid_argument);
  h.add(bare_anchor(3, 1, Vec3(0.25, 0.25, 0.25)));
  EXPECT_EQ(h.size(), 2u);
  EXPECT_EQ(h.level_counts(), (std::vector<std::size_t>{1, 1}));
}

TEST(PromoteLevels, NoGradientNoPromotion) {
  LoDHierarchy h(config(2, 4.0, 1.0));
  for (int i = 0; i < 5; ++i) h.add(bare_anchor(i, 0, Vec3(i + 0.5, 0.5, 0.5)));
  EXPECT_EQ(promote_levels(h), 0u);
}

TEST(PromoteLevels, ThresholdCrossingRaisesTarget) {
  LoDConfig c = config(3, 8.0, 1.0);
  c.grad_threshold = 1e-3;
  c.delta_l = 1;
  LoDHierarchy h(c);
  h.add(bare_anchor(0, 0, Vec3(0.5, 0.5, 0.5)));
  h.add(bare_anchor(1, 0, Vec3(1.5, 0.5, 0.5)));
  h.anchors()[0].grad_sum = 2 * c.grad_threshold;
  h.anchors()[0].grad_count = 1;
  EXPECT_EQ(promote_levels(h), 1u);
  EXPECT_TRUE(h.anchors()[0].promoted);
  EXPECT_FALSE(h.anchors()[1].promoted);
  const Camera cam = Camera::look_at(Vec3(0.5, 0.5, 8.5), Vec3(0.5, 0.5, 0.5), Vec3::UnitY(), 10.0, 8, 8);
  EXPECT_EQ(target_level(h.anchors()[0], c, cam), 1);
  EXPECT_EQ(target_level(h.anchors()[1], c, cam), 0);
}

TEST(SelectAnchors, FarCameraSelectsLevelZeroOnly) {
  LoDHierarchy h(config(3, 8.0, 1.0));
  h.add(bare_anchor(0, 0, Vec3(0.5, 0.5, 0.5)));
  h.add(bare_anchor(1, 1, Vec3(0.25, 0.25, 0.25)));
  h.add(bare_anchor(2, 2, Vec3(0.125, 0.125, 0.125)));
  const Camera far = Camera::look_at(Vec3(0.3, 0.3, 8.3), Vec3(0.3, 0.3, 0.3), Vec3::UnitY(), 10.0, 8, 8);
  EXPECT_EQ(select_anchors(h, far), (std::vector<AnchorId>{0}));
  const Camera near = Camera::look_at(Vec3(0.3, 0.3, 1.3), Vec3(0.3, 0.3, 0.3), Vec3::UnitY(), 10.0, 8, 8);
  EXPECT_EQ(select_anchors(h, near), (std::vector<AnchorId>{0, 1, 2}));
}

TEST(SelectAnchors, LmaxCapsSelection) {
  LoDConfig c = config(3, 8.0, 1.0);
  c.l_max = 1;
  LoDHierarchy h(c);
  h.add(bare_anchor(0, 0, Vec3(0.5, 0.5, 0.5)));
  h.add(bare_anchor(1, 1, Vec3(0.25, 0.25, 0.25)));
  h.add(bare_anchor(2, 2, Vec3(0.125, 0.125, 0.125)));
  const Camera near = Camera::look_at(Vec3(0.3, 0.3, 1.3), Vec3(0.3, 0.3, 0.3), Vec3::UnitY(), 10.0, 8, 8);
  EXPECT_EQ(select_anchors(h, near), (std::vector<AnchorId>{0, 1}));
}

TEST(PruneAnchors, ThresholdFilter) {
  LoDConfig c = config(1, 2.0, 1.0);
  c.opacity_prune = 0.05;
  LoDHierarchy h(c);
  for (int i = 0; i < 4; ++i) {
    h.add(bare_anchor(i, 0, Vec3(i + 0.5, 0.5, 0.5)));
    h.anchors().back().opacity_sum = 0.9;
    h.anchors().back().opacity_count = 1;
  }
  EXPECT_EQ(prune_anchors(h), 0u);
  h.anchors()[2].opacity_sum = 0.01;
  h.anchors()[2].opacity_count = 1;
  for (int i : {0, 1, 3}) {
    h.anchors()[i].opacity_sum = 0.9;
    h.anchors()[i].opacity_count = 1;
  }
  EXPECT_EQ(prune_anchors(h), 1u);
  EXPECT_EQ(h.find(2), nullptr);
  EXPECT_NE(h.find(3), nullptr);
  EXPECT_FALSE(h.lookup(voxel_of(Vec3(2.5, 0.5, 0.5), 0, 1.0)).has_value());
}

TEST(PruneAnchors, MixedLedgerMatchesBruteForce) {
  SplitMix64 rng(5);
  LoDConfig c = config(1, 2.0, 1.0);
  LoDHierarchy h(c);
  std::set<AnchorId> keep;
  for (int i = 0; i < 200; ++i) {
    h.add(bare_anchor(i, 0, Vec3(i + 0.5, 0.5, 0.5)));
    Anchor& a = h.anchors().back();
    a.opacity_count = static_cast<std::int64_t>(rng.next() % 3);
    a.opacity_sum = a.opacity_count * rng.uniform(0.0, 0.1);
    if (a.opacity_count == 0 || a.opacity_sum / a.opacity_count >= c.opacity_prune) keep.insert(a.id);
  }
  prune_anchors(h);
  std::set<AnchorId> got;
  for (const auto& a : h.anchors()) got.insert(a.id);
  EXPECT_EQ(got, keep);
}

TEST(LoDConfig, ValidateRejectsBadValues) {
  LoDConfig c;
  c.delta = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = LoDConfig{};
  c.k = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}
