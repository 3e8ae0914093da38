#pragma once

#include "streamlod/core_math.hpp"
#include "streamlod/lod.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace streamlod {

inline constexpr int kDecoderInputDim = kFeatureDim + 1 + 3;
inline constexpr int kDecoderHiddenDim = 32;
inline constexpr int kAttributesPerGaussian = 11;  // opacity, rgb, scale x3, quaternion
inline constexpr double kScaleModulationClamp = 10.0;

struct NeuralGaussian {
  Vec3 mu = Vec3::Zero();
  Vec3 scale = Vec3::Ones();
  Quat rot;
  double opacity = 0.5;
  Vec3 color = Vec3::Constant(0.5);
  AnchorId parent_anchor = 0;
  int level = 0;
  std::uint64_t id = 0;  // parent_anchor * K + slot; depth tie-breaker
};

/// Gradient w.r.t. the fields of a NeuralGaussian (rotation w.r.t. its components).
struct GaussianGrad {
  Vec3 mu = Vec3::Zero();
  Vec3 scale = Vec3::Zero();
  Vec4 rot = Vec4::Zero();
  double opacity = 0.0;
  Vec3 color = Vec3::Zero();
};

/// Two fully connected layers with a ReLU in between.
struct MlpNet {
  Eigen::MatrixXd w1;
  Eigen::VectorXd b1;
  Eigen::MatrixXd w2;
  Eigen::VectorXd b2;

  static MlpNet zeros(int in, int hidden, int out);
  std::size_t parameter_count() const { return w1.size() + b1.size() + w2.size() + b2.size(); }
  void set_zero();
};

enum class DecoderLayout { Shared, Separate };

/// F_mlp: maps (feature, distance, direction) to K neural Gaussians. In the
/// Separate layout four nets of the same form each produce one attribute head.
/// Output vector is head-major: [opacity K | color 3K | scale 3K | rotation 4K].
class GaussianDecoder {
 public:
  GaussianDecoder() = default;
  GaussianDecoder(int k, DecoderLayout layout, std::uint64_t seed);
  /// Wraps existing weights (e.g. read from a checkpoint); throws on shape mismatch.
  static GaussianDecoder from_nets(int k, DecoderLayout layout, std::vector<MlpNet> nets);

  int k() const { return k_; }
  DecoderLayout layout() const { return layout_; }
  int output_dim() const { return k_ * kAttributesPerGaussian; }

  const std::vector<MlpNet>& nets() const { return nets_; }
  /// Mutable access invalidates outstanding decode tapes.
  std::vector<MlpNet>& mutable_nets() {
    ++version_;
    return nets_;
  }
  std::uint64_t version() const { return version_; }
  std::size_t parameter_count() const;

  /// Raw pre-activation outputs; hidden pre-activations per net are written to `hidden`.
  Eigen::VectorXd forward(const Eigen::VectorXd& input, std::vector<Eigen::VectorXd>* hidden) const;

  /// Accumulates weight gradients into `grad_nets` (may be null) and returns dL/dinput.
  Eigen::VectorXd backward(const Eigen::VectorXd& input, const std::vector<Eigen::VectorXd>& hidden,
                           const Eigen::VectorXd& d_output, std::vector<MlpNet>* grad_nets) const;

  std::vector<MlpNet> zero_grad() const;

  static std::vector<int> head_widths(int k, DecoderLayout layout);

 private:
  int k_ = 0;
  DecoderLayout layout_ = DecoderLayout::Shared;
  std::vector<MlpNet> nets_;
  std::uint64_t version_ = 0;
};

struct DecoderDivergence : std::runtime_error {
  DecoderDivergence() : std::runtime_error("decoder divergence") {}
};

struct StaleTape : std::runtime_error {
  StaleTape() : std::runtime_error("stale tape") {}
};

struct DecodeTape {
  AnchorId anchor_id = 0;
  std::uint64_t decoder_version = 0;
  double voxel = 0.0;
  double d_max = 1.0;
  Vec3 view = Vec3::Zero();  // anchor center - camera center
  Eigen::VectorXd input;
  std::vector<Eigen::VectorXd> hidden;
  Eigen::VectorXd raw;
  RowMatX3 scales;  // activated scales
};

struct DecodedAnchor {
  std::vector<NeuralGaussian> gaussians;
  DecodeTape tape;
};

/// Decoder input vector (feature, distance / d_max, unit view direction).
Eigen::VectorXd decoder_input(const Anchor& a, const Camera& cam, double d_max);

DecodedAnchor decode(const Anchor& anchor, const Camera& cam, const GaussianDecoder& decoder,
                     const LoDConfig& cfg);

struct AnchorGrad {
  Eigen::VectorXd feature = Eigen::VectorXd::Zero(kFeatureDim);
  RowMatX3 offsets;
  RowMatX3 raw_scales;
  Vec3 center = Vec3::Zero();

  static AnchorGrad zeros(int k);
  void add(const AnchorGrad& o);
};

/// Reverse-mode pass through decode. MLP weight gradients are accumulated into
/// `mlp_grad` when non-null.
AnchorGrad decode_backward(const DecodeTape& tape, std::span<const GaussianGrad> upstream,
                           const GaussianDecoder& decoder, std::vector<MlpNet>* mlp_grad);

/// All Gaussians decoded for one view, flattened in anchor order.
struct DecodedView {
  std::vector<AnchorId> anchor_ids;
  std::vector<NeuralGaussian> gaussians;  // anchor i owns [i*K, (i+1)*K)
  std::vector<DecodeTape> tapes;
  std::vector<int> levels;                // per Gaussian
};

DecodedView decode_view(const LoDHierarchy& h, const GaussianDecoder& decoder, const Camera& cam,
                        std::span<const AnchorId> ids);

/// Level-aware dropout with rate gamma(l) * m / M, gamma(l) = 0.1 + 0.05 l.
struct DropoutSchedule {
  std::int64_t total_steps = 1;

  static double gamma(int level) { return 0.1 + 0.05 * level; }
  double rate(int level, std::int64_t step) const;
};

/// Per-Gaussian opacity multiplier: 0 when dropped, 1 / (1 - r) when kept.
struct DropoutMask {
  std::vector<double> factor;
  std::size_t dropped() const;
};

DropoutMask dropout_mask(std::span<const int> levels, std::int64_t step, const DropoutSchedule& sched,
                         std::uint64_t seed, bool training);

}  // namespace streamlod
