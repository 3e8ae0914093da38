#pragma once

#include "streamlod/core_math.hpp"
#include "streamlod/image.hpp"
#include "streamlod/lod.hpp"
#include "streamlod/motion_gmm.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace streamlod {

struct RingSpec {
  int count = 4;
  double radius = 4.0;
  double height = 0.0;            // eye offset along world z
  double start_degrees = 0.0;
  double arc_degrees = 360.0;     // cameras spread evenly over this arc
  Vec3 look_at = Vec3::Zero();
  double focal = 40.0;            // pixels
  double near = 0.01;
  std::vector<int> held_out;      // camera indices excluded from training
};

/// A colored Gaussian blob, optionally translating by `velocity` each frame.
struct SceneElement {
  Vec3 position = Vec3::Zero();
  Vec3 scale = Vec3::Constant(0.2);  // standard deviations along world axes
  Vec3 color = Vec3::Constant(0.5);
  double opacity = 0.9;
  Vec3 velocity = Vec3::Zero();
  int points = 64;  // point-cloud samples drawn from this element

  bool moving() const { return velocity.squaredNorm() > 0.0; }
};

struct SceneSpec {
  std::uint64_t seed = 1;
  int frames = 1;
  int width = 32;
  int height = 32;
  Vec3 background = Vec3::Zero();
  RingSpec cameras;
  std::vector<SceneElement> elements;

  void validate() const;
};

/// Parses the JSON scene spec. Unknown keys are rejected.
SceneSpec parse_scene_spec(const std::string& json_text);
std::string scene_spec_to_json(const SceneSpec& spec);

struct SyntheticScene {
  SceneSpec spec;
  std::vector<Camera> cameras;
  std::vector<std::vector<Image>> images;  // [frame][camera]
  std::vector<std::vector<Image>> masks;   // [frame][camera], single channel 0/1
  std::vector<Vec3> points;
  std::vector<int> point_element;  // element index per point

  std::vector<int> training_views() const;
  std::vector<int> held_out_views() const;
  /// Camera/image pairs of frame t for the given camera indices.
  std::vector<TrainingView> views(int frame, const std::vector<int>& cams) const;
  /// Distance bounds between cameras and points (d_max, d_min).
  std::pair<double, double> distance_bounds() const;
  /// Points sampled from elements with non-zero velocity, displaced to `frame`.
  std::vector<Vec3> mover_points(int frame = 0) const;
};

std::vector<Camera> ring_cameras(const SceneSpec& spec);

/// Renders ground-truth frames with the brute-force compositor and samples the point cloud.
SyntheticScene generate_scene(const SceneSpec& spec);

/// Anchors whose voxel holds at least one mover point and that some training
/// view selects; the reference set for dynamic-anchor recall.
std::vector<AnchorId> ground_truth_mover_anchors(const LoDHierarchy& h, const SyntheticScene& scene);

/// The frame-0 mover anchors of `canonical` that, in the `current` model, still
/// cover the mover at `frame`: the anchor's cell (side voxel_size(level),
/// centered on its current center) contains a displaced mover point.
std::vector<AnchorId> ground_truth_mover_anchors(const LoDHierarchy& canonical, const LoDHierarchy& current,
                                                  const SyntheticScene& scene, int frame);

/// Scene directory layout: scene.json, cameras.json, points.csv, manifest.txt,
/// frames/frame_XXXX/view_YY.{png,f32}, masks/frame_XXXX/view_YY.png.
void save_scene(const std::filesystem::path& dir, const SyntheticScene& scene);
SyntheticScene load_scene(const std::filesystem::path& dir);

std::string camera_to_json(const Camera& cam);
Camera camera_from_json(const std::string& text);

}  // namespace streamlod
