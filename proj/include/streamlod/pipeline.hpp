#pragma once

#include "streamlod/model.hpp"
#include "streamlod/scene.hpp"
#include "streamlod/trainer.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace streamlod {

/// Every tunable of a run. Serialized as a JSON object with flat dotted keys.
struct RunConfig {
  std::uint64_t seed = 1;
  LoDConfig lod;
  std::optional<int> levels;    // default: derived from the distance bounds
  std::optional<double> d_max;  // default: farthest camera-point distance
  std::optional<double> d_min;  // default: nearest camera-point distance
  InitOptions init;
  TrainConfig train;
  bool separate_mlps = false;
  bool save_renders = true;

  /// Applies one dotted key; value is JSON text (bare words are taken as strings).
  /// Throws ConfigError on unknown keys or ill-typed values.
  void set(const std::string& key, const std::string& value_json);
  void validate() const;
  std::string to_json() const;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

RunConfig parse_run_config(const std::string& json_text);
/// Names understood by --ablate: no-dropout, separate-mlps, no-quantize, no-partition.
void apply_ablation(RunConfig& cfg, const std::string& name);
void apply_variant(RunConfig& cfg, const std::string& name);

struct ReportRow {
  int epoch = 0;  // epochs run for this frame
  int frame = 0;
  double loss = 0.0;
  double psnr = 0.0;
  std::size_t dyn_count = 0;
  std::size_t bytes = 0;  // encoded residual frame; 0 for frame 0
};

std::string report_csv(const std::vector<ReportRow>& rows);

struct RunResult {
  InitialReport initial;
  std::vector<FrameResult> frames;  // t = 1 .. T-1
  std::vector<ReportRow> rows;
  Model canonical;
  Model final_model;
  std::vector<std::vector<Image>> held_out_renders;  // [frame][held-out index]
  double seconds = 0.0;         // whole run
  double stream_seconds = 0.0;  // frames 1 .. T-1 only
};

/// Called after every streamed frame with the model before and after the update.
using FrameObserver = std::function<void(const FrameResult&, const Model& before, const Model& after)>;

/// Trains frame 0 and streams the remaining frames. When `out_dir` is set the
/// run directory (checkpoint, stream/, report.csv, ...) is written there.
RunResult run_stream(const SyntheticScene& scene, const RunConfig& cfg,
                     const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                     const FrameObserver& observer = {});

struct StreamGap : std::runtime_error {
  explicit StreamGap(int frame)
      : std::runtime_error("stream gap at frame " + std::to_string(frame)), frame(frame) {}
  int frame;
};

/// Decoder-side state at frame t: checkpoint plus residual frames 1..t in order.
Model playback(const std::filesystem::path& run_dir, int frame);
RenderSettings run_render_settings(const std::filesystem::path& run_dir);

std::filesystem::path frame_file(const std::filesystem::path& run_dir, int frame);
std::filesystem::path render_file(const std::filesystem::path& run_dir, int frame, int view);

struct EvalRow {
  int frame = 0;
  int view = 0;
  double psnr = 0.0;
  double ssim = 0.0;
  std::size_t bytes = 0;  // residual frame size, on the first row of each frame
};

/// Held-out metrics of a run directory against the scene ground truth.
std::vector<EvalRow> evaluate_run(const SyntheticScene& scene, const std::filesystem::path& run_dir);
std::string eval_csv(const std::vector<EvalRow>& rows);

}  // namespace streamlod
