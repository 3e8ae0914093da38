#include "streamlod/image.hpp"
#include "streamlod/metrics.hpp"
#include "streamlod/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

using namespace streamlod;

namespace {

Image random_image(int w, int h, int c, std::uint64_t seed) {
  SplitMix64 rng(seed);
  Image img(w, h, c);
  for (double& v : img.pixels()) v = rng.uniform();
  return img;
}

// Direct per-window evaluation with an unseparated Gaussian kernel.
double ssim_oracle(const Image& a, const Image& b, int win, double sigma, double c1, double c2) {
  std::vector<double> w(static_cast<std::size_t>(win) * win);
  double total = 0.0;
  const int r = win / 2;
  for (int y = 0; y < win; ++y)
    for (int x = 0; x < win; ++x) {
      const double d2 = (x - r) * (x - r) + (y - r) * (y - r);
      w[y * win + x] = std::exp(-d2 / (2 * sigma * sigma));
      total += w[y * win + x];
    }
  for (double& v : w) v /= total;

  double sum = 0.0;
  int n = 0;
  for (int c = 0; c < a.channels(); ++c)
    for (int y0 = 0; y0 + win <= a.height(); ++y0)
      for (int x0 = 0; x0 + win <= a.width(); ++x0) {
        double ma = 0, mb = 0;
        for (int y = 0; y < win; ++y)
          for (int x = 0; x < win; ++x) {
            ma += w[y * win + x] * a.at(x0 + x, y0 + y, c);
            mb += w[y * win + x] * b.at(x0 + x, y0 + y, c);
          }
        double va = 0, vb = 0, cov = 0;
        for (int y = 0; y < win; ++y)
          for (int x = 0; x < win; ++x) {
            const double da = a.at(x0 + x, y0 + y, c) - ma, db = b.at(x0 + x, y0 + y, c) - mb;
            va += w[y * win + x] * da * da;
            vb += w[y * win + x] * db * db;
            cov += w[y * win + x] * da * db;
          }
        sum += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        ++n;
      }
  return sum / n;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("streamlod_unit_" + name);
}

}  // namespace

TEST(Psnr, IdenticalIsInfinite) {
  const Image a = random_image(8, 8, 3, 1);
  EXPECT_EQ(psnr(a, a), kPsnrIdentical);
}

TEST(Psnr, ConstantOffset) {
  const Image a(10, 6, 3, 0.2), b(10, 6, 3, 0.3);
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-9);
}

TEST(Psnr, MatchesScalarLoop) {
  const Image a = random_image(7, 5, 3, 2), b = random_image(7, 5, 3, 3);
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) se += std::pow(a.pixels()[i] - b.pixels()[i], 2);
  EXPECT_NEAR(psnr(a, b), 10 * std::log10(a.size() / se), 1e-10);
  EXPECT_THROW(psnr(a, Image(5, 7, 3)), std::invalid_argument);
}

TEST(Ssim, IdenticalIsOne) {
  const Image a = random_image(16, 16, 3, 4);
  EXPECT_NEAR(ssim(a, a), 1.0, 1e-12);
}

TEST(Ssim, ConstantBlackVersusWhite) {
  const SsimParams p;
  const double expected = p.c1 / (1.0 + p.c1);
  EXPECT_NEAR(ssim(Image(16, 16, 3, 0.0), Image(16, 16, 3, 1.0)), expected, 1e-12);
}

TEST(Ssim, MatchesBruteForce) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Image a = random_image(15, 13, 3, 10 + s);
    Image b = a;
    SplitMix64 rng(20 + s);
    for (double& v : b.pixels()) v = std::clamp(v + 0.2 * rng.normal(), 0.0, 1.0);
    const SsimParams p;
    EXPECT_NEAR(ssim(a, b), ssim_oracle(a, b, p.window, p.sigma, p.c1, p.c2), 1e-12);
  }
}

TEST(Ssim, SmallerThanWindowThrows) {
  EXPECT_THROW(ssim(Image(8, 8, 3), Image(8, 8, 3)), std::invalid_argument);
}

TEST(Ssim, GradientMatchesFiniteDifference) {
  const Image a = random_image(13, 12, 2, 5), b = random_image(13, 12, 2, 6);
  const SsimResult r = ssim_with_grad(a, b);
  EXPECT_NEAR(r.value, ssim(a, b), 1e-14);
  SplitMix64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t i = rng.next() % a.size();
    const double h = 1e-6;
    Image ap = a, am = a;
    ap.pixels()[i] += h;
    am.pixels()[i] -= h;
    const double fd = (ssim(ap, b) - ssim(am, b)) / (2 * h);
    EXPECT_NEAR(r.grad_a.pixels()[i], fd, 1e-6 + 1e-5 * std::abs(fd));
  }
}

TEST(ImageIo, PngRoundTripQuantizes) {
  Image a = random_image(9, 4, 3, 8);
  a.at(0, 0, 0) = -0.5;
  a.at(1, 0, 0) = 1.5;
  const auto path = temp_path("rt.png");
  write_png(path, a);
  const Image b = read_png(path);
  ASSERT_TRUE(b.same_shape(a));
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double q = std::round(std::clamp(a.pixels()[i], 0.0, 1.0) * 255.0) / 255.0;
    EXPECT_NEAR(b.pixels()[i], q, 1e-12);
  }
  std::filesystem::remove(path);
}

TEST(ImageIo, F32RoundTripIsExactForFloats) {
  Image a = random_image(6, 5, 3, 9);
  for (double& v : a.pixels()) v = static_cast<float>(v);
  const auto path = temp_path("rt.f32");
  write_f32(path, a);
  EXPECT_EQ(read_f32(path), a);
  EXPECT_EQ(std::filesystem::file_size(path), 16u + 4u * a.size());
  std::filesystem::remove(path);
}

TEST(ImageIo, MissingFileThrows) {
  EXPECT_ANY_THROW(read_png(temp_path("does_not_exist.png")));
  EXPECT_ANY_THROW(read_f32(temp_path("does_not_exist.f32")));
}
