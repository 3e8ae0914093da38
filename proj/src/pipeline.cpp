#include "streamlod/pipeline.hpp"

#include "streamlod/byte_io.hpp"
#include "streamlod/metrics.hpp"
#include "streamlod/rng.hpp"

#include <json.hpp>

#include <chrono>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

namespace streamlod {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Key {
  const char* name;
  std::function<void(RunConfig&, const json&)> set;
  std::function<json(const RunConfig&)> get;
};

template <typename T>
T as(const json& v, const char* key) {
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("bad value for ") + key);
  }
}

double positive(double v, const char* key) {
  if (!(v > 0.0)) throw ConfigError(std::string(key) + " must be positive");
  return v;
}

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

#define SLOD_KEY(name, type, field)                                              \
  Key {                                                                          \
    name, [](RunConfig& c, const json& v) { c.field = as<type>(v, name); },      \
        [](const RunConfig& c) { return json(c.field); }                         \
  }

const std::vector<Key>& keys() {
  static const std::vector<Key> k = {
      SLOD_KEY("seed", std::uint64_t, seed),
      Key{"variant",
          [](RunConfig& c, const json& v) { apply_variant(c, as<std::string>(v, "variant")); },
          [](const RunConfig& c) { return json(c.train.variant == Variant::Star ? "star" : "standard"); }},
      Key{"ablate.no_dropout", [](RunConfig& c, const json& v) { c.train.dropout = !as<bool>(v, "ablate.no_dropout"); },
          [](const RunConfig& c) { return json(!c.train.dropout); }},
      SLOD_KEY("ablate.separate_mlps", bool, separate_mlps),
      Key{"ablate.no_quantize",
          [](RunConfig& c, const json& v) { c.train.quantize = !as<bool>(v, "ablate.no_quantize"); },
          [](const RunConfig& c) { return json(!c.train.quantize); }},
      Key{"ablate.no_partition",
          [](RunConfig& c, const json& v) { c.train.partition = !as<bool>(v, "ablate.no_partition"); },
          [](const RunConfig& c) { return json(!c.train.partition); }},
      SLOD_KEY("lod.delta", double, lod.delta),
      Key{"lod.levels",
          [](RunConfig& c, const json& v) {
            if (v.is_null()) c.levels.reset();
            else c.levels = as<int>(v, "lod.levels");
          },
          [](const RunConfig& c) { return c.levels ? json(*c.levels) : json(nullptr); }},
      Key{"lod.d_max",
          [](RunConfig& c, const json& v) {
            if (v.is_null()) c.d_max.reset();
            else c.d_max = positive(as<double>(v, "lod.d_max"), "lod.d_max");
          },
          [](const RunConfig& c) { return opt_json(c.d_max); }},
      Key{"lod.d_min",
          [](RunConfig& c, const json& v) {
            if (v.is_null()) c.d_min.reset();
            else c.d_min = positive(as<double>(v, "lod.d_min"), "lod.d_min");
          },
          [](const RunConfig& c) { return opt_json(c.d_min); }},
      SLOD_KEY("lod.k", int, lod.k),
      SLOD_KEY("lod.grad_threshold", double, lod.grad_threshold),
      SLOD_KEY("lod.delta_l", int, lod.delta_l),
      SLOD_KEY("lod.opacity_prune", double, lod.opacity_prune),
      SLOD_KEY("lod.offset_jitter", double, init.offset_jitter),
      SLOD_KEY("lod.initial_scale", double, init.initial_scale),
      SLOD_KEY("train.init_epochs", int, train.init_epochs),
      SLOD_KEY("train.stream_epochs", int, train.stream_epochs),
      SLOD_KEY("train.lambda", double, train.lambda),
      SLOD_KEY("train.lr.feature", double, train.lr.feature),
      SLOD_KEY("train.lr.offsets", double, train.lr.offsets),
      SLOD_KEY("train.lr.scales", double, train.lr.scales),
      SLOD_KEY("train.lr.mlp", double, train.lr.mlp),
      SLOD_KEY("train.lr.latents", double, train.lr.latents),
      SLOD_KEY("train.lr.pos", double, train.lr.pos),
      SLOD_KEY("train.lr.latent_decoders", double, train.lr.latent_decoders),
      SLOD_KEY("train.adam.beta1", double, train.adam.beta1),
      SLOD_KEY("train.adam.beta2", double, train.adam.beta2),
      SLOD_KEY("train.adam.eps", double, train.adam.eps),
      SLOD_KEY("train.init_window", int, train.init_window),
      SLOD_KEY("train.stream_window", int, train.stream_window),
      SLOD_KEY("train.refine_structure", bool, train.refine_structure),
      SLOD_KEY("train.static_frame_tolerance", double, train.static_frame_tolerance),
      Key{"train.rho",
          [](RunConfig& c, const json& v) {
            if (v.is_null()) c.train.rho.reset();
            else c.train.rho = as<double>(v, "train.rho");
          },
          [](const RunConfig& c) { return opt_json(c.train.rho); }},
      SLOD_KEY("codec.step_feature", float, train.quant_step_feature),
      SLOD_KEY("codec.step_offset", float, train.quant_step_offset),
      SLOD_KEY("render.tile_size", int, train.render.tile_size),
      SLOD_KEY("render.threads", int, train.render.threads),
      SLOD_KEY("render.min_transmittance", double, train.render.min_transmittance),
      SLOD_KEY("render.max_splats_per_pixel", int, train.render.max_splats_per_pixel),
      Key{"render.background",
          [](RunConfig& c, const json& v) {
            const auto b = as<std::vector<double>>(v, "render.background");
            if (b.size() != 3) throw ConfigError("render.background must have 3 components");
            c.train.render.background = Vec3(b[0], b[1], b[2]);
          },
          [](const RunConfig& c) {
            const Vec3& b = c.train.render.background;
            return json::array({b.x(), b.y(), b.z()});
          }},
      SLOD_KEY("output.save_renders", bool, save_renders),
  };
  return k;
}

#undef SLOD_KEY

std::string padded(int v, int width) {
  std::ostringstream os;
  os << std::setw(width) << std::setfill('0') << v;
  return os.str();
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << s;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value_json) {
  json v;
  try {
    v = json::parse(value_json);
  } catch (const json::parse_error&) {
    v = value_json;
  }
  for (const Key& k : keys())
    if (key == k.name) {
      k.set(*this, v);
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

void RunConfig::validate() const {
  try {
    train.validate();
    if (!(lod.delta > 0.0)) throw ConfigError("lod.delta must be positive");
    if (lod.k < 1) throw ConfigError("lod.k must be at least 1");
    if (levels && (*levels < 1 || *levels > 30)) throw ConfigError("lod.levels out of range");
    if (d_max && d_min && !(*d_max >= *d_min)) throw ConfigError("degenerate bounds");
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

std::string RunConfig::to_json() const {
  json j = json::object();
  for (const Key& k : keys()) j[k.name] = k.get(*this);
  return j.dump(2);
}

RunConfig parse_run_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  for (const auto& [key, value] : j.items()) c.set(key, value.dump());
  c.validate();
  return c;
}

void apply_ablation(RunConfig& cfg, const std::string& name) {
  if (name == "no-dropout") cfg.train.dropout = false;
  else if (name == "separate-mlps") cfg.separate_mlps = true;
  else if (name == "no-quantize") cfg.train.quantize = false;
  else if (name == "no-partition") cfg.train.partition = false;
  else throw ConfigError("unknown ablation '" + name + "'");
}

void apply_variant(RunConfig& cfg, const std::string& name) {
  if (name == "standard") cfg.train.variant = Variant::Standard;
  else if (name == "star") cfg.train.variant = Variant::Star;
  else throw ConfigError("unknown variant '" + name + "'");
}

std::string report_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream os;
  os << std::setprecision(17) << "epoch,frame,loss,psnr,dyn_count,bytes\n";
  for (const auto& r : rows)
    os << r.epoch << ',' << r.frame << ',' << r.loss << ',' << r.psnr << ',' << r.dyn_count << ',' << r.bytes << '\n';
  return os.str();
}

fs::path frame_file(const fs::path& run_dir, int frame) {
  return run_dir / "stream" / ("frame_" + padded(frame, 4) + ".slrf");
}

fs::path render_file(const fs::path& run_dir, int frame, int view) {
  return run_dir / "renders" / ("frame_" + padded(frame, 4) + "_view_" + padded(view, 2) + ".f32");
}

RunResult run_stream(const SyntheticScene& scene, const RunConfig& cfg_in, const std::optional<fs::path>& out_dir,
                     const FrameObserver& observer) {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig cfg = cfg_in;
  cfg.train.render.background = scene.spec.background;
  cfg.train.seed = cfg.seed;
  cfg.init.jitter_seed = mix_seed(cfg.seed, 1);
  cfg.validate();

  const auto [auto_max, auto_min] = scene.distance_bounds();
  const double d_max = cfg.d_max.value_or(auto_max);
  const double d_min = cfg.d_min.value_or(auto_min);
  LoDConfig lod = cfg.lod;
  lod.d0 = d_max;
  InitOptions init = cfg.init;
  if (cfg.levels) init.levels = cfg.levels;

  Model model = make_initial_model(scene.points, d_max, d_min, lod, init,
                                   cfg.separate_mlps ? DecoderLayout::Separate : DecoderLayout::Shared,
                                   mix_seed(cfg.seed, 2));
  StreamTrainer trainer(std::move(model), cfg.train);

  const std::vector<int> train_cams = scene.training_views();
  const std::vector<int> held = scene.held_out_views();
  RunResult res;

  if (out_dir) {
    fs::create_directories(*out_dir / "stream");
    if (cfg.save_renders) fs::create_directories(*out_dir / "renders");
    write_text(*out_dir / "run_config.json", cfg.to_json() + "\n");
  }
  const auto archive_renders = [&](int t) {
    std::vector<Image> imgs;
    for (int v : held) {
      Image img = render_model(trainer.model(), scene.cameras[v], cfg.train.render).image;
      if (out_dir && cfg.save_renders) write_f32(render_file(*out_dir, t, v), img);
      imgs.push_back(std::move(img));
    }
    res.held_out_renders.push_back(std::move(imgs));
  };

  const auto views0 = scene.views(0, train_cams);
  res.initial = trainer.train_initial(views0);
  {
    ReportRow row;
    row.epoch = cfg.train.init_epochs;
    row.frame = 0;
    double l = 0.0, p = 0.0;
    for (const auto& v : views0) {
      const Image img = render_model(trainer.model(), v.camera, cfg.train.render).image;
      l += loss(img, v.image, cfg.train.lambda).value;
      p += psnr(img, v.image);
    }
    row.loss = l / views0.size();
    row.psnr = p / views0.size();
    res.rows.push_back(row);
  }
  archive_renders(0);

  std::ostringstream manifest;
  const auto s0 = std::chrono::steady_clock::now();
  for (int t = 1; t < scene.spec.frames; ++t) {
    const Model before = observer ? trainer.model() : Model{};
    FrameResult fr;
    try {
      fr = trainer.train_frame(scene.views(t, train_cams), t);
    } catch (const std::exception& e) {
      throw std::runtime_error("frame " + std::to_string(t) + ": " + e.what());
    }
    if (observer) observer(fr, before, trainer.model());
    ReportRow row;
    row.epoch = cfg.train.stream_epochs;
    row.frame = t;
    row.loss = fr.loss;
    row.psnr = fr.psnr;
    row.dyn_count = fr.dynamic_ids.size();
    row.bytes = fr.bytes.size();
    res.rows.push_back(row);
    if (out_dir) {
      write_file_bytes(frame_file(*out_dir, t), fr.bytes);
      manifest << frame_file(*out_dir, t).filename().string() << '\n';
      if (fr.partition) {
        fs::create_directories(*out_dir / "partition");
        std::ofstream os(*out_dir / "partition" / ("frame_" + padded(t, 4) + ".csv"));
        write_partition(os, *fr.partition);
      }
    }
    archive_renders(t);
    res.frames.push_back(std::move(fr));
  }
  res.stream_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - s0).count();

  res.canonical = trainer.canonical();
  res.final_model = trainer.model();
  if (out_dir) {
    save_checkpoint(*out_dir / "checkpoint.slod", res.canonical);
    write_text(*out_dir / "stream" / "manifest.txt", manifest.str());
    write_text(*out_dir / "report.csv", report_csv(res.rows));
    std::ostringstream trace;
    trace << std::setprecision(17) << "frame,epoch,loss\n";
    for (std::size_t e = 0; e < res.initial.epoch_loss.size(); ++e)
      trace << 0 << ',' << e << ',' << res.initial.epoch_loss[e] << '\n';
    for (const auto& fr : res.frames)
      for (std::size_t e = 0; e < fr.epoch_loss.size(); ++e) trace << fr.frame << ',' << e << ',' << fr.epoch_loss[e] << '\n';
    write_text(*out_dir / "loss_trace.csv", trace.str());
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

RenderSettings run_render_settings(const fs::path& run_dir) {
  const fs::path p = run_dir / "run_config.json";
  if (!fs::exists(p)) return {};
  return parse_run_config(read_text(p)).train.render;
}

Model playback(const fs::path& run_dir, int frame) {
  if (frame < 0) throw std::invalid_argument("frame must be non-negative");
  Model m = load_checkpoint(run_dir / "checkpoint.slod");
  const LatentDecoders none;
  for (int t = 1; t <= frame; ++t) {
    const fs::path p = frame_file(run_dir, t);
    if (!fs::exists(p)) throw StreamGap(t);
    const ResidualSet set = decode_frame(read_file_bytes(p));
    if (static_cast<int>(set.frame) != t) throw StreamGap(t);
    if (set.kind == ResidualKind::Quantized && !set.entries.empty() && !m.latents)
      throw std::runtime_error("checkpoint lacks latent decoders");
    for (auto& a : m.hierarchy.anchors()) a.state = AnchorState::Static;
    for (const auto& e : set.entries) {
      Anchor* a = m.hierarchy.find(e.anchor_id);
      if (!a) throw std::runtime_error("residual for unknown anchor " + std::to_string(e.anchor_id));
      a->state = AnchorState::Dynamic;
      apply_residual(*a, e, set.kind, m.latents ? *m.latents : none);
    }
  }
  return m;
}

std::vector<EvalRow> evaluate_run(const SyntheticScene& scene, const fs::path& run_dir) {
  std::vector<EvalRow> rows;
  for (int t = 0; t < scene.spec.frames; ++t) {
    std::size_t bytes = 0;
    if (t > 0) {
      const fs::path f = frame_file(run_dir, t);
      if (!fs::exists(f)) throw StreamGap(t);
      bytes = fs::file_size(f);
    }
    bool first = true;
    for (int v : scene.held_out_views()) {
      const fs::path r = render_file(run_dir, t, v);
      if (!fs::exists(r)) throw std::runtime_error("missing render " + r.string());
      const Image img = read_f32(r);
      const Image& gt = scene.images[t][v];
      EvalRow row;
      row.frame = t;
      row.view = v;
      row.psnr = psnr(img, gt);
      row.ssim = ssim(img, gt);
      row.bytes = first ? bytes : 0;
      first = false;
      rows.push_back(row);
    }
  }
  return rows;
}

std::string eval_csv(const std::vector<EvalRow>& rows) {
  std::ostringstream os;
  os << std::setprecision(17) << "frame,view,psnr,ssim,bytes\n";
  for (const auto& r : rows) os << r.frame << ',' << r.view << ',' << r.psnr << ',' << r.ssim << ',' << r.bytes << '\n';
  return os.str();
}

}  // namespace streamlod
