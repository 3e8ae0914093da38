#include "streamlod/byte_io.hpp"
#include "streamlod/metrics.hpp"
#include "streamlod/model.hpp"
#include "streamlod/pipeline.hpp"
#include "streamlod/residual_codec.hpp"
#include "streamlod/scene.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace streamlod;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw UsageError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int cmd_gen(const std::string& spec_path, const std::string& out, std::optional<std::uint64_t> seed) {
  if (!fs::exists(spec_path)) throw UsageError("spec not found: " + spec_path);
  SceneSpec spec;
  try {
    spec = parse_scene_spec(read_text(spec_path));
  } catch (const std::exception& e) {
    throw UsageError(std::string("invalid scene spec: ") + e.what());
  }
  if (seed) spec.seed = *seed;
  const SyntheticScene scene = generate_scene(spec);
  save_scene(out, scene);
  std::cout << "wrote " << scene.spec.frames << " frames x " << scene.cameras.size() << " views, "
            << scene.points.size() << " points to " << out << '\n';
  return 0;
}

struct TrainArgs {
  std::string scene, out, config;
  std::optional<std::uint64_t> seed;
  std::string variant;
  std::vector<std::string> ablate, set;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg;
  try {
    if (!a.config.empty()) cfg = parse_run_config(read_text(a.config));
    if (a.seed) cfg.seed = *a.seed;
    if (!a.variant.empty()) apply_variant(cfg, a.variant);
    for (const auto& name : a.ablate) apply_ablation(cfg, name);
    for (const auto& kv : a.set) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    cfg.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  if (!fs::is_directory(a.scene)) throw UsageError("scene directory not found: " + a.scene);
  const SyntheticScene scene = load_scene(a.scene);
  const RunResult r = run_stream(scene, cfg, fs::path(a.out));
  std::cout << report_csv(r.rows);
  std::cout << "anchors " << r.canonical.hierarchy.size() << ", frames " << r.rows.size() << ", written to " << a.out
            << '\n';
  return 0;
}

struct RenderArgs {
  std::string run, scene, camera, out, f32;
  int frame = 0;
  int view = -1;
};

int cmd_render(const RenderArgs& a) {
  Camera cam;
  if (!a.camera.empty()) {
    cam = camera_from_json(read_text(a.camera));
  } else if (!a.scene.empty() && a.view >= 0) {
    const SyntheticScene scene = load_scene(a.scene);
    if (a.view >= static_cast<int>(scene.cameras.size())) throw UsageError("view index out of range");
    cam = scene.cameras[a.view];
  } else {
    throw UsageError("render needs --camera or --scene with --view");
  }
  const Model m = playback(a.run, a.frame);
  const Image img = render_model(m, cam, run_render_settings(a.run)).image;
  if (!a.out.empty()) write_png(a.out, img);
  if (!a.f32.empty()) write_f32(a.f32, img);
  std::cout << "rendered frame " << a.frame << " (" << img.width() << "x" << img.height() << ")\n";
  return 0;
}

int cmd_eval(const std::string& scene_dir, const std::string& run_dir, const std::string& out) {
  const SyntheticScene scene = load_scene(scene_dir);
  const auto rows = evaluate_run(scene, run_dir);
  const std::string csv = eval_csv(rows);
  if (!out.empty()) {
    std::ofstream f(out);
    f << csv;
  } else {
    std::cout << csv;
  }
  double p = 0.0, s = 0.0;
  std::size_t bytes = 0, finite = 0;
  for (const auto& r : rows) {
    if (std::isfinite(r.psnr)) {
      p += r.psnr;
      ++finite;
    }
    s += r.ssim;
    bytes += r.bytes;
  }
  std::cout << std::fixed << std::setprecision(3) << "rows " << rows.size() << "  mean psnr "
            << (finite ? p / finite : kPsnrIdentical) << " dB  mean ssim " << (rows.empty() ? 0.0 : s / rows.size())
            << "  stream bytes " << bytes << '\n';
  return 0;
}

void inspect_frame(const fs::path& p) {
  const auto bytes = read_file_bytes(p);
  const ResidualSet set = decode_frame(bytes);
  std::size_t expected = 0;
  if (set.kind == ResidualKind::Quantized) {
    expected = quantized_frame_bytes(set.entries.size());
  } else {
    const std::size_t fd = set.entries.empty() ? 0 : set.entries.front().feature_code.size();
    const std::size_t od = set.entries.empty() ? 0 : set.entries.front().offset_code.size();
    expected = raw_frame_bytes(set.entries.size(), fd, od);
  }
  std::cout << p.filename().string() << "  version " << (set.kind == ResidualKind::Quantized ? kSlrfQuantized : kSlrfRaw)
            << "  frame " << set.frame << "  dyn " << set.entries.size() << "  bytes " << bytes.size()
            << "  expected " << expected;
  if (set.kind == ResidualKind::Quantized)
    std::cout << "  step_feature " << set.step_feature << "  step_offset " << set.step_offset;
  std::cout << '\n';
}

int cmd_inspect(const std::string& path) {
  const fs::path p(path);
  if (!fs::exists(p)) throw UsageError("not found: " + path);
  if (fs::is_regular_file(p)) {
    inspect_frame(p);
    return 0;
  }
  const fs::path ckpt = p / "checkpoint.slod";
  if (fs::exists(ckpt)) {
    const Model m = load_checkpoint(ckpt);
    std::cout << "checkpoint  bytes " << fs::file_size(ckpt) << "  anchors " << m.hierarchy.size() << "  levels "
              << m.hierarchy.config().levels << "  K " << m.decoder.k() << "  latent decoders "
              << (m.latents ? "yes" : "no") << '\n';
    const auto counts = m.hierarchy.level_counts();
    for (std::size_t l = 0; l < counts.size(); ++l) std::cout << "  level " << l << ": " << counts[l] << '\n';
  }
  std::size_t total = 0;
  for (int t = 1;; ++t) {
    const fs::path f = frame_file(p, t);
    if (!fs::exists(f)) break;
    inspect_frame(f);
    total += fs::file_size(f);
  }
  std::cout << "stream bytes " << total << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Streaming level-of-detail Gaussian splatting"};
  app.require_subcommand(1);

  std::string gen_spec, gen_out;
  std::optional<std::uint64_t> gen_seed;
  auto* gen = app.add_subcommand("gen", "Generate a synthetic multi-view video");
  gen->add_option("spec", gen_spec, "Scene spec (JSON)")->required();
  gen->add_option("out", gen_out, "Output scene directory")->required();
  gen->add_option("--seed", gen_seed, "Override the scene seed");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Fit frame 0 and stream the remaining frames");
  train->add_option("scene", ta.scene, "Scene directory")->required();
  train->add_option("out", ta.out, "Run directory")->required();
  train->add_option("--config", ta.config, "Run config (JSON, flat dotted keys)");
  train->add_option("--seed", ta.seed, "Seed");
  train->add_option("--variant", ta.variant, "standard or star")->check(CLI::IsMember({"standard", "star"}));
  train->add_option("--ablate", ta.ablate, "no-dropout, separate-mlps, no-quantize, no-partition")
      ->check(CLI::IsMember({"no-dropout", "separate-mlps", "no-quantize", "no-partition"}));
  train->add_option("--set", ta.set, "Override a config key, key=value");

  RenderArgs ra;
  auto* rend = app.add_subcommand("render", "Play back the stream up to a frame and render a view");
  rend->add_option("run", ra.run, "Run directory")->required();
  rend->add_option("--frame,-t", ra.frame, "Frame index")->required();
  rend->add_option("--scene", ra.scene, "Scene directory providing the camera");
  rend->add_option("--view", ra.view, "Camera index in the scene");
  rend->add_option("--camera", ra.camera, "Camera JSON file");
  rend->add_option("--out,-o", ra.out, "PNG output");
  rend->add_option("--f32", ra.f32, "Raw f32 output");

  std::string ev_scene, ev_run, ev_out;
  auto* ev = app.add_subcommand("eval", "Held-out PSNR/SSIM and storage of a run");
  ev->add_option("scene", ev_scene, "Scene directory")->required();
  ev->add_option("run", ev_run, "Run directory")->required();
  ev->add_option("--out,-o", ev_out, "CSV output (default stdout)");

  std::string in_path;
  auto* ins = app.add_subcommand("inspect", "Dump residual-frame headers and byte accounting");
  ins->add_option("path", in_path, "Run directory or .slrf file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen(gen_spec, gen_out, gen_seed);
    if (*train) return cmd_train(ta);
    if (*rend) return cmd_render(ra);
    if (*ev) return cmd_eval(ev_scene, ev_run, ev_out);
    if (*ins) return cmd_inspect(in_path);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
