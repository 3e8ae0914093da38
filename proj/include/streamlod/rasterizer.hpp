#pragma once

#include "streamlod/core_math.hpp"
#include "streamlod/decoder.hpp"
#include "streamlod/image.hpp"

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace streamlod {

struct RenderSettings {
  int tile_size = 16;
  Vec3 background = Vec3::Zero();
  double min_transmittance = 1e-4;
  int max_splats_per_pixel = 4096;
  /// Ellipse support test and transmittance termination. Disabled for
  /// finite-difference checks, where they are step discontinuities.
  bool hard_cutoffs = true;
  int threads = 1;

  void validate() const;
};

/// Mahalanobis support radius (in standard deviations) of a splat.
inline constexpr double kSupportSigma = 3.0;

/// A Gaussian after projection, in compositing order.
struct Splat {
  std::size_t index = 0;  // into the input Gaussian list
  std::uint64_t id = 0;
  Vec2 mean;
  Mat2 cov;
  double conic_a = 0.0, conic_b = 0.0, conic_c = 0.0;  // inverse of cov
  double depth = 0.0;
  double opacity = 0.0;  // after dropout compensation
  Vec3 color;
  double radius = 0.0;
  int tile_x0 = 0, tile_x1 = -1, tile_y0 = 0, tile_y1 = -1;  // inclusive tile range
};

struct RenderOutput {
  Image image;
  std::vector<std::uint8_t> visible;  // per input Gaussian: projected and inside a tile
  std::vector<Splat> splats;          // depth-sorted
  std::size_t culled = 0;             // behind the near plane
  std::size_t skipped_singular = 0;   // non-invertible covariance after dilation
  std::uint64_t fingerprint = 0;
};

/// Optional per-Gaussian opacity multipliers (dropout); empty means all ones.
using OpacityFactors = std::span<const double>;

/// Projects, sorts by (depth, id) and bins splats. Shared by both compositors.
RenderOutput prepare_splats(std::span<const NeuralGaussian> gaussians, OpacityFactors factors,
                            const Camera& cam, const RenderSettings& settings);

/// Tile-based front-to-back compositing.
RenderOutput render(std::span<const NeuralGaussian> gaussians, const Camera& cam,
                    const RenderSettings& settings, OpacityFactors factors = {});

/// Per-pixel loop over every splat in depth order, with no tiling. Produces the
/// same image as render() bit-for-bit.
Image render_reference(std::span<const NeuralGaussian> gaussians, const Camera& cam,
                       const RenderSettings& settings, OpacityFactors factors = {});

struct SplatGrad {
  Vec2 mean = Vec2::Zero();
  Mat2 cov = Mat2::Zero();  // symmetric
  double opacity = 0.0;      // w.r.t. the compensated opacity
  Vec3 color = Vec3::Zero();
};

struct RenderGrad {
  std::vector<SplatGrad> splat;       // per input Gaussian
  std::vector<double> screen_grad;    // |dL/dmean2d| per input Gaussian
  std::vector<GaussianGrad> gaussian; // chained to 3D attributes (opacity before dropout)
};

struct StaleForwardState : std::runtime_error {
  StaleForwardState() : std::runtime_error("stale forward state") {}
};

/// Reverse pass of render(). dL_dC has the image shape. Recomputes per-tile
/// forward state; throws StaleForwardState if `output` came from other inputs.
/// A non-empty `needs_grad` (one flag per Gaussian) leaves the gradients of
/// unflagged Gaussians at zero; flagged ones are unaffected.
RenderGrad render_backward(std::span<const NeuralGaussian> gaussians, const Camera& cam,
                           const RenderSettings& settings, const RenderOutput& output,
                           const Image& dL_dC, OpacityFactors factors = {},
                           std::span<const std::uint8_t> needs_grad = {});

/// Chains splat gradients through projection and covariance to Gaussian attributes.
GaussianGrad gaussian_backward(const NeuralGaussian& g, const Camera& cam, const SplatGrad& sg,
                               double opacity_factor);

std::uint64_t fingerprint(std::span<const NeuralGaussian> gaussians, OpacityFactors factors,
                          const Camera& cam);

}  // namespace streamlod
