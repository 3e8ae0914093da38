#pragma once

#include "streamlod/core_math.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <tuple>
#include <unordered_map>
#include <vector>

namespace streamlod {

inline constexpr int kFeatureDim = 32;

struct LoDConfig {
  double delta = 0.001;  // level-0 voxel size
  int levels = 1;        // L
  double d_max = 1.0;
  double d_min = 1.0;
  double beta = 2.0;
  double d0 = 1.0;
  int l_max = 0;
  int k = 10;  // neural Gaussians per anchor
  double grad_threshold = 2e-4;
  int delta_l = 1;
  double opacity_prune = 0.05;

  double voxel_size(int level) const { return delta / static_cast<double>(1ull << level); }
  void validate() const;
};

/// L = round(log2(d_max / d_min)) + 1. Throws on degenerate bounds.
int level_count(double d_max, double d_min);

/// round(log2(d_max / dist)) clamped to [0, levels - 1].
int anchor_base_level(double d_max, double dist, int levels);

/// General layer rule min(round(log_beta(d / d0)), L) with the lower end clamped at 0.
int preliminary_active_layer(double d, double d0, double beta, int levels);

enum class AnchorState : std::uint8_t { Static = 0, Dynamic = 1 };

using AnchorId = std::uint64_t;
using RowMatX3 = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

struct Anchor {
  AnchorId id = 0;
  Vec3 center = Vec3::Zero();
  int level = 0;
  Eigen::VectorXd feature = Eigen::VectorXd::Zero(kFeatureDim);
  RowMatX3 offsets;     // K x 3, voxel units
  RowMatX3 raw_scales;  // K x 3, log-space
  AnchorState state = AnchorState::Static;
  bool promoted = false;

  // Gradient ledger and opacity statistics for the current refinement window.
  double grad_sum = 0.0;
  std::int64_t grad_count = 0;
  double opacity_sum = 0.0;
  std::int64_t opacity_count = 0;
  std::int64_t visibility_count = 0;

  double grad_mean() const { return grad_count > 0 ? grad_sum / grad_count : 0.0; }
  std::optional<double> opacity_mean() const {
    if (opacity_count == 0) return std::nullopt;
    return opacity_sum / opacity_count;
  }
  void reset_statistics() {
    grad_sum = opacity_sum = 0.0;
    grad_count = opacity_count = visibility_count = 0;
  }
  int k() const { return static_cast<int>(offsets.rows()); }
};

struct VoxelKey {
  int level;
  std::int64_t ix, iy, iz;
  auto operator<=>(const VoxelKey&) const = default;
};

VoxelKey voxel_of(const Vec3& p, int level, double delta);

class LoDHierarchy {
 public:
  LoDHierarchy() = default;
  explicit LoDHierarchy(LoDConfig cfg) : config_(cfg) {}

  LoDConfig& config() { return config_; }
  const LoDConfig& config() const { return config_; }

  std::vector<Anchor>& anchors() { return anchors_; }
  const std::vector<Anchor>& anchors() const { return anchors_; }
  std::size_t size() const { return anchors_.size(); }

  /// Inserts an anchor; throws if its (level, voxel) cell or id is already taken.
  void add(Anchor a);
  Anchor* find(AnchorId id);
  const Anchor* find(AnchorId id) const;
  std::optional<AnchorId> lookup(const VoxelKey& key) const;

  /// Removes every anchor for which pred is true, keeping order and the index consistent.
  template <typename Pred>
  std::size_t remove_if(Pred pred);

  std::vector<std::size_t> level_counts() const;

 private:
  void rebuild_index();

  LoDConfig config_;
  std::vector<Anchor> anchors_;
  std::map<VoxelKey, AnchorId> voxel_index_;
  std::unordered_map<AnchorId, std::size_t> id_index_;
};

template <typename Pred>
std::size_t LoDHierarchy::remove_if(Pred pred) {
  const std::size_t before = anchors_.size();
  std::erase_if(anchors_, pred);
  rebuild_index();
  return before - anchors_.size();
}

struct InitOptions {
  std::optional<int> levels;  // overrides the bound-derived level count
  std::uint64_t jitter_seed = 0x5ca1ab1e;
  double offset_jitter = 0.25;   // voxel units
  double initial_scale = 0.5;  // fraction of the level voxel size
};

/// Voxelizes the point cloud at every level and places one anchor per occupied cell.
LoDHierarchy init_hierarchy(std::span<const Vec3> points, double d_max, double d_min,
                            const LoDConfig& cfg, const InitOptions& opts = {});

/// Per-camera selection target: base level plus delta_l when promoted.
int target_level(const Anchor& a, const LoDConfig& cfg, const Camera& cam);

/// Flags anchors whose mean screen gradient exceeds grad_threshold; returns the
/// number of newly promoted anchors.
std::size_t promote_levels(LoDHierarchy& h);

/// Ids of anchors with level <= min(target_level, l_max), in storage order.
std::vector<AnchorId> select_anchors(const LoDHierarchy& h, const Camera& cam);

/// Removes anchors with a mean accumulated opacity below opacity_prune and resets
/// the statistics of survivors. Anchors never observed are kept.
std::size_t prune_anchors(LoDHierarchy& h);

}  // namespace streamlod
