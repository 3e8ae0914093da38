#include "streamlod/scene.hpp"

#include "streamlod/byte_io.hpp"
#include "streamlod/rasterizer.hpp"
#include "streamlod/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <set>
#include <sstream>

namespace streamlod {

using nlohmann::json;

namespace {

Vec3 vec3_from(const json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw std::invalid_argument(std::string(what) + " must be a 3-array");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

json vec3_to(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  std::set<std::string> known(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw std::invalid_argument("unknown key '" + k + "' in " + where);
}

std::string frame_dir(int t) {
  std::ostringstream os;
  os << "frame_" << std::setw(4) << std::setfill('0') << t;
  return os.str();
}

std::string view_name(int v) {
  std::ostringstream os;
  os << "view_" << std::setw(2) << std::setfill('0') << v;
  return os.str();
}

NeuralGaussian element_gaussian(const SceneElement& e, int frame, std::uint64_t id) {
  NeuralGaussian g;
  g.mu = e.position + e.velocity * static_cast<double>(frame);
  g.scale = e.scale;
  g.rot = Quat{};
  g.opacity = e.opacity;
  g.color = e.color;
  g.id = id;
  return g;
}

RenderSettings truth_settings(const SceneSpec& spec) {
  RenderSettings s;
  s.background = spec.background;
  return s;
}

/// Pixels whose centers fall inside the 3-sigma support of any mover.
void mark_support(const SceneSpec& spec, const Camera& cam, int frame, Image& mask) {
  std::vector<NeuralGaussian> movers;
  for (std::size_t i = 0; i < spec.elements.size(); ++i)
    if (spec.elements[i].moving()) movers.push_back(element_gaussian(spec.elements[i], frame, i));
  if (movers.empty()) return;
  const RenderOutput prep = prepare_splats(movers, {}, cam, truth_settings(spec));
  const double qmax = kSupportSigma * kSupportSigma;
  for (const Splat& sp : prep.splats)
    for (int y = 0; y < cam.height; ++y)
      for (int x = 0; x < cam.width; ++x) {
        const double dx = x + 0.5 - sp.mean.x();
        const double dy = y + 0.5 - sp.mean.y();
        const double q = sp.conic_a * dx * dx + 2.0 * sp.conic_b * dx * dy + sp.conic_c * dy * dy;
        if (q <= qmax) mask.at(x, y, 0) = 1.0;
      }
}

}  // namespace

void SceneSpec::validate() const {
  if (elements.empty()) throw std::invalid_argument("empty scene spec");
  if (cameras.count < 2) throw std::invalid_argument("scene needs at least 2 cameras");
  if (frames < 1) throw std::invalid_argument("scene needs at least 1 frame");
  if (width < 1 || height < 1) throw std::invalid_argument("invalid image size");
  if (!(cameras.radius > 0.0) || !(cameras.focal > 0.0) || !(cameras.near > 0.0))
    throw std::invalid_argument("invalid camera ring");
  for (int h : cameras.held_out)
    if (h < 0 || h >= cameras.count) throw std::invalid_argument("held-out camera index out of range");
  if (static_cast<int>(std::set<int>(cameras.held_out.begin(), cameras.held_out.end()).size()) >= cameras.count)
    throw std::invalid_argument("no training cameras left");
  for (const auto& e : elements) {
    if (!(e.scale.minCoeff() > 0.0)) throw std::invalid_argument("element scale must be positive");
    if (!(e.opacity > 0.0 && e.opacity < 1.0)) throw std::invalid_argument("element opacity must lie in (0, 1)");
    if (e.points < 1) throw std::invalid_argument("element needs at least one point");
  }
}

SceneSpec parse_scene_spec(const std::string& text) {
  const json j = json::parse(text);
  if (!j.is_object()) throw std::invalid_argument("scene spec must be an object");
  reject_unknown(j, {"seed", "frames", "width", "height", "background", "cameras", "elements"}, "scene spec");
  SceneSpec s;
  s.seed = j.value("seed", s.seed);
  s.frames = j.value("frames", s.frames);
  s.width = j.value("width", s.width);
  s.height = j.value("height", s.height);
  if (j.contains("background")) s.background = vec3_from(j["background"], "background");
  if (j.contains("cameras")) {
    const json& c = j["cameras"];
    reject_unknown(c, {"count", "radius", "height", "start_degrees", "arc_degrees", "look_at", "focal", "near",
                       "held_out"},
                   "cameras");
    RingSpec& r = s.cameras;
    r.count = c.value("count", r.count);
    r.radius = c.value("radius", r.radius);
    r.height = c.value("height", r.height);
    r.start_degrees = c.value("start_degrees", r.start_degrees);
    r.arc_degrees = c.value("arc_degrees", r.arc_degrees);
    if (c.contains("look_at")) r.look_at = vec3_from(c["look_at"], "look_at");
    r.focal = c.value("focal", r.focal);
    r.near = c.value("near", r.near);
    if (c.contains("held_out")) r.held_out = c["held_out"].get<std::vector<int>>();
  }
  if (j.contains("elements")) {
    for (const json& e : j["elements"]) {
      reject_unknown(e, {"position", "scale", "color", "opacity", "velocity", "points"}, "element");
      SceneElement el;
      if (e.contains("position")) el.position = vec3_from(e["position"], "position");
      if (e.contains("scale")) {
        el.scale = e["scale"].is_number() ? Vec3::Constant(e["scale"].get<double>()) : vec3_from(e["scale"], "scale");
      }
      if (e.contains("color")) el.color = vec3_from(e["color"], "color");
      el.opacity = e.value("opacity", el.opacity);
      if (e.contains("velocity")) el.velocity = vec3_from(e["velocity"], "velocity");
      el.points = e.value("points", el.points);
      s.elements.push_back(el);
    }
  }
  s.validate();
  return s;
}

std::string scene_spec_to_json(const SceneSpec& s) {
  json j;
  j["seed"] = s.seed;
  j["frames"] = s.frames;
  j["width"] = s.width;
  j["height"] = s.height;
  j["background"] = vec3_to(s.background);
  j["cameras"] = {{"count", s.cameras.count},         {"radius", s.cameras.radius},
                  {"height", s.cameras.height},       {"start_degrees", s.cameras.start_degrees},
                  {"arc_degrees", s.cameras.arc_degrees}, {"look_at", vec3_to(s.cameras.look_at)},
                  {"focal", s.cameras.focal},         {"near", s.cameras.near},
                  {"held_out", s.cameras.held_out}};
  j["elements"] = json::array();
  for (const auto& e : s.elements)
    j["elements"].push_back({{"position", vec3_to(e.position)},
                             {"scale", vec3_to(e.scale)},
                             {"color", vec3_to(e.color)},
                             {"opacity", e.opacity},
                             {"velocity", vec3_to(e.velocity)},
                             {"points", e.points}});
  return j.dump(2);
}

std::vector<Camera> ring_cameras(const SceneSpec& spec) {
  const RingSpec& r = spec.cameras;
  std::vector<Camera> cams;
  const bool full = std::abs(r.arc_degrees) >= 360.0;
  const int divisions = full ? r.count : std::max(1, r.count - 1);
  for (int i = 0; i < r.count; ++i) {
    const double deg = r.start_degrees + r.arc_degrees * static_cast<double>(i) / divisions;
    const double th = deg * std::numbers::pi / 180.0;
    const Vec3 eye = r.look_at + Vec3(r.radius * std::cos(th), r.radius * std::sin(th), r.height);
    cams.push_back(Camera::look_at(eye, r.look_at, Vec3::UnitZ(), r.focal, spec.width, spec.height, r.near));
  }
  return cams;
}

SyntheticScene generate_scene(const SceneSpec& spec) {
  spec.validate();
  SyntheticScene sc;
  sc.spec = spec;
  sc.cameras = ring_cameras(spec);
  const RenderSettings settings = truth_settings(spec);

  for (int t = 0; t < spec.frames; ++t) {
    std::vector<NeuralGaussian> gs;
    for (std::size_t i = 0; i < spec.elements.size(); ++i) gs.push_back(element_gaussian(spec.elements[i], t, i));
    std::vector<Image> frame_images, frame_masks;
    for (const Camera& cam : sc.cameras) {
      // Stored at f32 precision so a scene read back from disk is identical.
      Image img = render_reference(gs, cam, settings);
      for (double& v : img.pixels()) v = static_cast<float>(v);
      frame_images.push_back(std::move(img));
      Image mask(cam.width, cam.height, 1);
      if (t > 0) {
        mark_support(spec, cam, 0, mask);
        mark_support(spec, cam, t, mask);
      }
      frame_masks.push_back(std::move(mask));
    }
    sc.images.push_back(std::move(frame_images));
    sc.masks.push_back(std::move(frame_masks));
  }

  // Point cloud: frame-0 samples inside each blob, truncated at two standard deviations.
  SplitMix64 rng(mix_seed(spec.seed, 0x9017c10dull));
  for (std::size_t i = 0; i < spec.elements.size(); ++i) {
    const SceneElement& e = spec.elements[i];
    for (int p = 0; p < e.points; ++p) {
      Vec3 z;
      do {
        z = Vec3(rng.normal(), rng.normal(), rng.normal());
      } while (z.norm() > 2.0);
      sc.points.push_back(e.position + e.scale.cwiseProduct(z));
      sc.point_element.push_back(static_cast<int>(i));
    }
  }
  return sc;
}

std::vector<int> SyntheticScene::held_out_views() const {
  std::set<int> h(spec.cameras.held_out.begin(), spec.cameras.held_out.end());
  return {h.begin(), h.end()};
}

std::vector<int> SyntheticScene::training_views() const {
  std::set<int> h(spec.cameras.held_out.begin(), spec.cameras.held_out.end());
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(cameras.size()); ++i)
    if (!h.contains(i)) out.push_back(i);
  return out;
}

std::vector<TrainingView> SyntheticScene::views(int frame, const std::vector<int>& cams) const {
  if (frame < 0 || frame >= static_cast<int>(images.size())) throw std::out_of_range("frame out of range");
  std::vector<TrainingView> out;
  for (int c : cams) out.push_back({cameras.at(c), images[frame].at(c)});
  return out;
}

std::pair<double, double> SyntheticScene::distance_bounds() const {
  double d_max = 0.0, d_min = std::numeric_limits<double>::infinity();
  for (const Camera& cam : cameras) {
    const Vec3 c = cam.center();
    for (const Vec3& p : points) {
      const double d = (p - c).norm();
      d_max = std::max(d_max, d);
      d_min = std::min(d_min, d);
    }
  }
  return {d_max, d_min};
}

std::vector<Vec3> SyntheticScene::mover_points(int frame) const {
  std::vector<Vec3> out;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const SceneElement& e = spec.elements[point_element[i]];
    if (e.moving()) out.push_back(points[i] + e.velocity * static_cast<double>(frame));
  }
  return out;
}

std::vector<AnchorId> ground_truth_mover_anchors(const LoDHierarchy& h, const SyntheticScene& scene) {
  std::set<VoxelKey> cells;
  for (const Vec3& p : scene.mover_points())
    for (int l = 0; l < h.config().levels; ++l) cells.insert(voxel_of(p, l, h.config().delta));
  std::set<AnchorId> seen;
  for (int v : scene.training_views())
    for (AnchorId id : select_anchors(h, scene.cameras[v])) seen.insert(id);
  std::vector<AnchorId> out;
  for (const VoxelKey& key : cells)
    if (const auto id = h.lookup(key); id && seen.contains(*id)) out.push_back(*id);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<AnchorId> ground_truth_mover_anchors(const LoDHierarchy& canonical, const LoDHierarchy& current,
                                                  const SyntheticScene& scene, int frame) {
  const std::vector<Vec3> pts = scene.mover_points(frame);
  std::vector<AnchorId> out;
  for (AnchorId id : ground_truth_mover_anchors(canonical, scene)) {
    const Anchor* a = current.find(id);
    if (!a) continue;
    const double half = 0.5 * current.config().voxel_size(a->level);
    const bool covers = std::any_of(pts.begin(), pts.end(), [&](const Vec3& p) {
      return ((p - a->center).cwiseAbs().array() <= half).all();
    });
    if (covers) out.push_back(id);
  }
  return out;
}

std::string camera_to_json(const Camera& cam) {
  json j;
  j["fx"] = cam.fx;
  j["fy"] = cam.fy;
  j["cx"] = cam.cx;
  j["cy"] = cam.cy;
  j["width"] = cam.width;
  j["height"] = cam.height;
  j["near"] = cam.near;
  json r = json::array();
  for (int i = 0; i < 3; ++i) r.push_back(json::array({cam.rotation(i, 0), cam.rotation(i, 1), cam.rotation(i, 2)}));
  j["rotation"] = r;
  j["translation"] = vec3_to(cam.translation);
  return j.dump();
}

namespace {

Camera camera_from(const json& j) {
  reject_unknown(j, {"fx", "fy", "cx", "cy", "width", "height", "near", "rotation", "translation"}, "camera");
  Camera c;
  c.fx = j.at("fx").get<double>();
  c.fy = j.at("fy").get<double>();
  c.cx = j.at("cx").get<double>();
  c.cy = j.at("cy").get<double>();
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  c.near = j.value("near", c.near);
  const json& r = j.at("rotation");
  if (!r.is_array() || r.size() != 3) throw std::invalid_argument("rotation must be 3x3");
  for (int i = 0; i < 3; ++i) c.rotation.row(i) = vec3_from(r[i], "rotation row").transpose();
  c.translation = vec3_from(j.at("translation"), "translation");
  c.validate();
  return c;
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << s;
}

Image mask_rgb(const Image& m) {
  Image out(m.width(), m.height(), 3);
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x)
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = m.at(x, y, 0);
  return out;
}

}  // namespace

Camera camera_from_json(const std::string& text) { return camera_from(json::parse(text)); }

void save_scene(const std::filesystem::path& dir, const SyntheticScene& sc) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  write_text(dir / "scene.json", scene_spec_to_json(sc.spec) + "\n");
  json cams = json::array();
  for (const Camera& c : sc.cameras) cams.push_back(json::parse(camera_to_json(c)));
  write_text(dir / "cameras.json", cams.dump(2) + "\n");

  std::ostringstream pts;
  pts << std::setprecision(17);
  pts << "x,y,z,element\n";
  for (std::size_t i = 0; i < sc.points.size(); ++i)
    pts << sc.points[i].x() << ',' << sc.points[i].y() << ',' << sc.points[i].z() << ',' << sc.point_element[i]
        << '\n';
  write_text(dir / "points.csv", pts.str());

  std::ostringstream manifest;
  manifest << "frames " << sc.images.size() << "\ncameras " << sc.cameras.size() << '\n';
  for (std::size_t t = 0; t < sc.images.size(); ++t) {
    const fs::path fd = dir / "frames" / frame_dir(static_cast<int>(t));
    const fs::path md = dir / "masks" / frame_dir(static_cast<int>(t));
    fs::create_directories(fd);
    fs::create_directories(md);
    for (std::size_t v = 0; v < sc.cameras.size(); ++v) {
      const std::string name = view_name(static_cast<int>(v));
      write_f32(fd / (name + ".f32"), sc.images[t][v]);
      write_png(fd / (name + ".png"), sc.images[t][v]);
      write_f32(md / (name + ".f32"), sc.masks[t][v]);
      write_png(md / (name + ".png"), mask_rgb(sc.masks[t][v]));
      manifest << "frames/" << frame_dir(static_cast<int>(t)) << '/' << name << ".f32\n";
    }
  }
  write_text(dir / "manifest.txt", manifest.str());
}

SyntheticScene load_scene(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw std::runtime_error("scene directory not found: " + dir.string());
  SyntheticScene sc;
  sc.spec = parse_scene_spec(read_text(dir / "scene.json"));
  for (const json& c : json::parse(read_text(dir / "cameras.json"))) sc.cameras.push_back(camera_from(c));
  if (static_cast<int>(sc.cameras.size()) != sc.spec.cameras.count)
    throw std::runtime_error("camera count does not match scene spec");

  std::istringstream pts(read_text(dir / "points.csv"));
  std::string line;
  std::getline(pts, line);
  while (std::getline(pts, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    Vec3 p;
    int e = 0;
    char comma = 0;
    ls >> p.x() >> comma >> p.y() >> comma >> p.z() >> comma >> e;
    if (!ls || e < 0 || e >= static_cast<int>(sc.spec.elements.size()))
      throw std::runtime_error("malformed points.csv");
    sc.points.push_back(p);
    sc.point_element.push_back(e);
  }

  for (int t = 0; t < sc.spec.frames; ++t) {
    std::vector<Image> imgs, masks;
    for (int v = 0; v < sc.spec.cameras.count; ++v) {
      const std::string name = view_name(v) + ".f32";
      imgs.push_back(read_f32(dir / "frames" / frame_dir(t) / name));
      masks.push_back(read_f32(dir / "masks" / frame_dir(t) / name));
    }
    sc.images.push_back(std::move(imgs));
    sc.masks.push_back(std::move(masks));
  }
  return sc;
}

}  // namespace streamlod
