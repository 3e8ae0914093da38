#pragma once

#include "streamlod/image.hpp"

#include <limits>

namespace streamlod {

inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

/// 10 log10(1 / MSE) on unit-range images; +inf when identical.
double psnr(const Image& a, const Image& b);
double mse(const Image& a, const Image& b);

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double c1 = 0.01 * 0.01;
  double c2 = 0.03 * 0.03;
};

/// Mean SSIM over valid (unpadded) window positions, averaged over channels.
double ssim(const Image& a, const Image& b, const SsimParams& params = {});

/// SSIM together with dSSIM/da (same shape as a).
struct SsimResult {
  double value = 0.0;
  Image grad_a;
};
SsimResult ssim_with_grad(const Image& a, const Image& b, const SsimParams& params = {});

}  // namespace streamlod
