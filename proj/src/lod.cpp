#include "streamlod/lod.hpp"

#include "streamlod/rng.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace streamlod {

void LoDConfig::validate() const {
  if (!(delta > 0.0)) throw std::invalid_argument("lod delta must be positive");
  if (levels < 1 || levels > 30) throw std::invalid_argument("lod level count out of range");
  if (!(d_max >= d_min) || !(d_min > 0.0)) throw std::invalid_argument("degenerate bounds");
  if (l_max < 0 || l_max > levels - 1) throw std::invalid_argument("l_max out of range");
  if (k < 1) throw std::invalid_argument("K must be at least 1");
  if (delta_l < 0) throw std::invalid_argument("delta_l must be non-negative");
}

int level_count(double d_max, double d_min) {
  if (!(d_min > 0.0) || !(d_max >= d_min)) throw std::invalid_argument("degenerate bounds");
  return static_cast<int>(round_half_even(std::log2(d_max / d_min))) + 1;
}

int anchor_base_level(double d_max, double dist, int levels) {
  if (!(dist > 0.0)) throw std::invalid_argument("non-positive viewing distance");
  const double raw = round_half_even(std::log2(d_max / dist));
  const double hi = static_cast<double>(levels - 1);
  return static_cast<int>(std::clamp(raw, 0.0, hi));
}

int preliminary_active_layer(double d, double d0, double beta, int levels) {
  if (!(d > 0.0) || !(d0 > 0.0) || !(beta > 1.0)) throw std::invalid_argument("invalid layer-rule input");
  const double raw = round_half_even(std::log(d / d0) / std::log(beta));
  return static_cast<int>(std::clamp(raw, 0.0, static_cast<double>(levels)));
}

VoxelKey voxel_of(const Vec3& p, int level, double delta) {
  const double size = delta / static_cast<double>(1ull << level);
  return {level, static_cast<std::int64_t>(std::floor(p.x() / size)),
          static_cast<std::int64_t>(std::floor(p.y() / size)),
          static_cast<std::int64_t>(std::floor(p.z() / size))};
}

void LoDHierarchy::add(Anchor a) {
  const VoxelKey key = voxel_of(a.center, a.level, config_.delta);
  if (voxel_index_.contains(key)) throw std::invalid_argument("voxel already holds an anchor");
  if (id_index_.contains(a.id)) throw std::invalid_argument("duplicate anchor id");
  voxel_index_.emplace(key, a.id);
  id_index_.emplace(a.id, anchors_.size());
  anchors_.push_back(std::move(a));
}

Anchor* LoDHierarchy::find(AnchorId id) {
  const auto it = id_index_.find(id);
  return it == id_index_.end() ? nullptr : &anchors_[it->second];
}

const Anchor* LoDHierarchy::find(AnchorId id) const {
  const auto it = id_index_.find(id);
  return it == id_index_.end() ? nullptr : &anchors_[it->second];
}

std::optional<AnchorId> LoDHierarchy::lookup(const VoxelKey& key) const {
  const auto it = voxel_index_.find(key);
  if (it == voxel_index_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::size_t> LoDHierarchy::level_counts() const {
  std::vector<std::size_t> counts(config_.levels, 0);
  for (const auto& a : anchors_) ++counts.at(a.level);
  return counts;
}

void LoDHierarchy::rebuild_index() {
  // Keys stay those of the cell each anchor was created in; residual updates move
  // centers without re-indexing.
  std::map<VoxelKey, AnchorId> kept;
  std::set<AnchorId> alive;
  for (const auto& a : anchors_) alive.insert(a.id);
  for (const auto& [key, id] : voxel_index_)
    if (alive.contains(id)) kept.emplace(key, id);
  voxel_index_ = std::move(kept);
  id_index_.clear();
  for (std::size_t i = 0; i < anchors_.size(); ++i) id_index_.emplace(anchors_[i].id, i);
}

LoDHierarchy init_hierarchy(std::span<const Vec3> points, double d_max, double d_min,
                            const LoDConfig& cfg, const InitOptions& opts) {
  if (points.empty()) throw std::invalid_argument("empty scene");
  if (!(d_min > 0.0) || !(d_max > d_min)) throw std::invalid_argument("degenerate bounds");
  LoDConfig c = cfg;
  c.d_max = d_max;
  c.d_min = d_min;
  c.levels = opts.levels.value_or(level_count(d_max, d_min));
  c.l_max = std::min(c.l_max, c.levels - 1);
  c.validate();

  LoDHierarchy h(c);
  AnchorId next_id = 0;
  for (int level = 0; level < c.levels; ++level) {
    std::set<VoxelKey> cells;
    for (const auto& p : points) cells.insert(voxel_of(p, level, c.delta));
    const double size = c.voxel_size(level);
    for (const auto& cell : cells) {
      Anchor a;
      a.id = next_id++;
      a.level = level;
      a.center = Vec3((cell.ix + 0.5) * size, (cell.iy + 0.5) * size, (cell.iz + 0.5) * size);
      a.offsets.resize(c.k, 3);
      a.raw_scales.resize(c.k, 3);
      SplitMix64 rng(opts.jitter_seed ^ (a.id * 0x9e3779b97f4a7c15ull));
      for (int i = 0; i < c.k; ++i)
        for (int j = 0; j < 3; ++j) a.offsets(i, j) = (2.0 * rng.uniform() - 1.0) * opts.offset_jitter;
      a.raw_scales.setConstant(std::log(opts.initial_scale * size));
      h.add(std::move(a));
    }
  }
  return h;
}

int target_level(const Anchor& a, const LoDConfig& cfg, const Camera& cam) {
  const double dist = (a.center - cam.center()).norm();
  return anchor_base_level(cfg.d_max, dist, cfg.levels) + (a.promoted ? cfg.delta_l : 0);
}

std::size_t promote_levels(LoDHierarchy& h) {
  std::size_t count = 0;
  for (auto& a : h.anchors()) {
    if (a.grad_count > 0 && a.grad_mean() > h.config().grad_threshold && !a.promoted) {
      a.promoted = true;
      ++count;
    }
  }
  return count;
}

std::vector<AnchorId> select_anchors(const LoDHierarchy& h, const Camera& cam) {
  const LoDConfig& cfg = h.config();
  const Vec3 eye = cam.center();
  std::vector<AnchorId> out;
  for (const auto& a : h.anchors()) {
    if (!((a.center - eye).norm() > 0.0)) continue;
    if (a.level <= std::min(target_level(a, cfg, cam), cfg.l_max)) out.push_back(a.id);
  }
  return out;
}

std::size_t prune_anchors(LoDHierarchy& h) {
  const double threshold = h.config().opacity_prune;
  const std::size_t removed = h.remove_if([&](const Anchor& a) {
    const auto m = a.opacity_mean();
    return m.has_value() && *m < threshold;
  });
  for (auto& a : h.anchors()) a.reset_statistics();
  return removed;
}

}  // namespace streamlod
