#pragma once

#include "streamlod/image.hpp"
#include "streamlod/model.hpp"
#include "streamlod/motion_gmm.hpp"
#include "streamlod/rasterizer.hpp"
#include "streamlod/residual_codec.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace streamlod {

struct LearningRates {
  double feature = 5e-3;
  double offsets = 1e-2;
  double scales = 5e-3;
  double mlp = 2e-3;
  double latents = 1e-2;
  double pos = 1e-3;
  double latent_decoders = 1e-3;
};

struct AdamParams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

enum class Variant { Standard, Star };

struct TrainConfig {
  int init_epochs = 500;
  int stream_epochs = 10;
  double lambda = 0.2;
  LearningRates lr;
  AdamParams adam;
  int init_window = 200;   // promote/prune cadence during frame 0
  int stream_window = 30;  // motion probing window
  Variant variant = Variant::Standard;
  std::optional<double> rho;  // overrides the variant default
  bool dropout = true;
  bool partition = true;  // false: every anchor is dynamic
  bool quantize = true;
  float quant_step_feature = static_cast<float>(kDefaultQuantStep);
  float quant_step_offset = static_cast<float>(kDefaultQuantStep);
  bool refine_structure = true;  // promote and prune during frame 0
  /// Frames whose training views all stay within this max-abs pixel change of the
  /// last refined frame carry no motion and get an empty dynamic set.
  double static_frame_tolerance = 1.0 / 255.0;
  std::uint64_t seed = 1;
  RenderSettings render;

  double effective_rho() const { return rho.value_or(variant == Variant::Star ? 0.9 : 0.8); }
  /// Star variant re-identifies dynamic anchors on frames 1, 5, 9, ...
  bool identifies_at(int frame) const { return variant == Variant::Standard || (frame - 1) % 4 == 0; }
  void validate() const;
};

struct LossResult {
  double value = 0.0;
  double l1 = 0.0;
  double ssim = 1.0;
  Image grad;  // dL/drender
};

/// (1 - lambda) * L1 + lambda * (1 - SSIM). Throws on shape mismatch.
LossResult loss(const Image& render, const Image& target, double lambda);

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  std::int64_t t = 0;
};

/// One bias-corrected Adam update of `param` in place.
void adam_step(Eigen::Ref<Eigen::VectorXd> param, const Eigen::VectorXd& grad, AdamState& s, double lr,
               const AdamParams& p);

struct TrainingError : std::runtime_error {
  TrainingError(const std::string& what, std::int64_t step_index)
      : std::runtime_error(what + " at step " + std::to_string(step_index)), step(step_index) {}
  std::int64_t step;
};

/// Builds the frame-0 hierarchy and a freshly initialized decoder.
Model make_initial_model(std::span<const Vec3> points, double d_max, double d_min, const LoDConfig& cfg,
                         const InitOptions& init, DecoderLayout layout, std::uint64_t seed);

struct InitialReport {
  std::vector<double> epoch_loss;  // mean loss over the views of each epoch
  std::vector<double> view_psnr;   // final, inference mode
  std::int64_t steps = 0;
  std::size_t promoted = 0;
  std::size_t pruned = 0;
};

struct FrameResult {
  int frame = 0;
  bool identified = false;  // partition recomputed this frame
  bool static_frame = false;  // no view changed since the last refined frame
  std::optional<Gmm2> gmm;
  std::optional<Partition> partition;
  std::vector<AnchorId> dynamic_ids;
  ResidualSet residuals;           // as decoded from `bytes`
  std::vector<std::uint8_t> bytes;  // encoded SLRF frame
  std::vector<double> epoch_loss;
  double loss = 0.0;  // final loss averaged over views, inference mode
  double psnr = 0.0;  // mean over training views after the update
  std::size_t optimized_scalars = 0;
};

/// Frame-0 fit followed by per-frame residual refinement of dynamic anchors.
class StreamTrainer {
 public:
  StreamTrainer(Model model, TrainConfig cfg);

  InitialReport train_initial(std::span<const TrainingView> views);
  FrameResult train_frame(std::span<const TrainingView> views, int frame);

  /// Latest model, with all residuals so far applied.
  const Model& model() const { return model_; }
  /// Frame-0 model (f32-rounded), with the latent decoders once they are frozen.
  const Model& canonical() const { return canonical_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  struct AnchorMoments {
    AdamState feature, offsets, scales;
  };

  Model model_;
  Model canonical_;
  TrainConfig cfg_;
  std::map<AnchorId, AnchorMoments> anchor_moments_;
  std::vector<AdamState> mlp_moments_;
  std::vector<AnchorId> partition_;  // dynamic ids carried between identifications
  std::vector<Image> reference_;     // training images of the last refined frame
  bool frozen_ = false;
};

}  // namespace streamlod
