#include "streamlod/decoder.hpp"
#include "streamlod/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace streamlod;

namespace {

LoDConfig small_config(int k) {
  LoDConfig c;
  c.delta = 0.5;
  c.levels = 2;
  c.d_max = 6.0;
  c.d_min = 2.0;
  c.l_max = 1;
  c.k = k;
  return c;
}

Anchor random_anchor(SplitMix64& rng, int k, int level = 1) {
  Anchor a;
  a.id = 7;
  a.level = level;
  a.center = Vec3(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3));
  for (int i = 0; i < kFeatureDim; ++i) a.feature[i] = rng.uniform(-1, 1);
  a.offsets.resize(k, 3);
  a.raw_scales.resize(k, 3);
  for (int i = 0; i < k; ++i)
    for (int c = 0; c < 3; ++c) {
      a.offsets(i, c) = rng.uniform(-0.5, 0.5);
      a.raw_scales(i, c) = std::log(rng.uniform(0.05, 0.2));
    }
  return a;
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(Decode, ZeroNetworkCase) {
  const int k = 4;
  std::vector<MlpNet> nets = {MlpNet::zeros(kDecoderInputDim, kDecoderHiddenDim, k * kAttributesPerGaussian)};
  const GaussianDecoder dec = GaussianDecoder::from_nets(k, DecoderLayout::Shared, nets);
  SplitMix64 rng(1);
  Anchor a = random_anchor(rng, k);
  a.feature.setZero();
  const LoDConfig cfg = small_config(k);
  const Camera cam = Camera::look_at(Vec3(0, -4, 0), Vec3::Zero(), Vec3::UnitZ(), 20.0, 16, 16);
  const DecodedAnchor d = decode(a, cam, dec, cfg);
  ASSERT_EQ(d.gaussians.size(), 4u);
  for (int i = 0; i < k; ++i) {
    const NeuralGaussian& g = d.gaussians[i];
    EXPECT_DOUBLE_EQ(g.opacity, 0.5);
    EXPECT_TRUE(g.color.isApprox(Vec3::Constant(0.5)));
    EXPECT_EQ(g.rot.as_vec(), Vec4(1, 0, 0, 0));
    EXPECT_TRUE(g.mu.isApprox(a.center + a.offsets.row(i).transpose() * cfg.voxel_size(1)));
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(g.scale[c], std::exp(a.raw_scales(i, c)), 1e-15);
    EXPECT_EQ(g.id, a.id * k + i);
  }
}

TEST(Decode, ZeroOffsetsPlaceGaussiansAtCenter) {
  const int k = 3;
  const GaussianDecoder dec(k, DecoderLayout::Shared, 5);
  SplitMix64 rng(2);
  Anchor a = random_anchor(rng, k);
  a.offsets.setZero();
  const Camera cam = Camera::look_at(Vec3(0, -4, 0), Vec3::Zero(), Vec3::UnitZ(), 20.0, 16, 16);
  for (const auto& g : decode(a, cam, dec, small_config(k)).gaussians) EXPECT_EQ(g.mu, a.center);
}

TEST(Decode, MatchesStraightLineForward) {
  for (DecoderLayout layout : {DecoderLayout::Shared, DecoderLayout::Separate}) {
    const int k = 5;
    GaussianDecoder dec(k, layout, 77);
    SplitMix64 rng(3);
    for (auto& n : dec.mutable_nets())
      for (Eigen::Index i = 0; i < n.b1.size(); ++i) n.b1[i] = rng.uniform(-0.2, 0.2);
    const Anchor a = random_anchor(rng, k);
    const LoDConfig cfg = small_config(k);
    const Camera cam = Camera::look_at(Vec3(1, -4, 0.5), Vec3::Zero(), Vec3::UnitZ(), 20.0, 16, 16);
    const DecodedAnchor d = decode(a, cam, dec, cfg);

    // Independent evaluation with scalar loops.
    const Vec3 eye = cam.center();
    const Vec3 view = a.center - eye;
    const double dist = std::sqrt(view.x() * view.x() + view.y() * view.y() + view.z() * view.z());
    std::vector<double> x(kDecoderInputDim);
    for (int i = 0; i < kFeatureDim; ++i) x[i] = a.feature[i];
    x[kFeatureDim] = dist / cfg.d_max;
    for (int c = 0; c < 3; ++c) x[kFeatureDim + 1 + c] = view[c] / dist;
    std::vector<double> raw;
    for (const MlpNet& n : dec.nets()) {
      std::vector<double> h(n.w1.rows());
      for (int r = 0; r < n.w1.rows(); ++r) {
        double s = n.b1[r];
        for (int c = 0; c < n.w1.cols(); ++c) s += n.w1(r, c) * x[c];
        h[r] = s > 0.0 ? s : 0.0;
      }
      for (int r = 0; r < n.w2.rows(); ++r) {
        double s = n.b2[r];
        for (int c = 0; c < n.w2.cols(); ++c) s += n.w2(r, c) * h[c];
        raw.push_back(s);
      }
    }
    ASSERT_EQ(static_cast<int>(raw.size()), k * kAttributesPerGaussian);
    for (int i = 0; i < k; ++i) {
      const NeuralGaussian& g = d.gaussians[i];
      EXPECT_NEAR(g.opacity, sig(raw[i]), 1e-12);
      double qn = 0.0;
      const double q[4] = {1.0 + raw[7 * k + 4 * i], raw[7 * k + 4 * i + 1], raw[7 * k + 4 * i + 2],
                           raw[7 * k + 4 * i + 3]};
      for (double v : q) qn += v * v;
      qn = std::sqrt(qn);
      EXPECT_NEAR(g.rot.w, q[0] / qn, 1e-12);
      EXPECT_NEAR(g.rot.z, q[3] / qn, 1e-12);
      for (int c = 0; c < 3; ++c) {
        EXPECT_NEAR(g.color[c], sig(raw[k + 3 * i + c]), 1e-12);
        const double mod = std::max(-10.0, std::min(10.0, raw[4 * k + 3 * i + c]));
        EXPECT_NEAR(g.scale[c], std::exp(a.raw_scales(i, c) + mod), 1e-12 * g.scale[c]);
        EXPECT_NEAR(g.mu[c], a.center[c] + a.offsets(i, c) * cfg.voxel_size(a.level), 1e-14);
      }
    }
  }
}

TEST(Decode, KMismatchThrows) {
  const GaussianDecoder dec(3, DecoderLayout::Shared, 1);
  SplitMix64 rng(4);
  const Anchor a = random_anchor(rng, 4);
  const Camera cam = Camera::look_at(Vec3(0, -4, 0), Vec3::Zero(), Vec3::UnitZ(), 20.0, 16, 16);
  EXPECT_THROW(decode(a, cam, dec, small_config(3)), std::invalid_argument);
}

TEST(Decode, NonFiniteOutputIsDivergence) {
  const int k = 2;
  GaussianDecoder dec(k, DecoderLayout::Shared, 1);
  dec.mutable_nets()[0].b2[0] = std::numeric_limits<double>::quiet_NaN();
  SplitMix64 rng(4);
  const Anchor a = random_anchor(rng, k);
  const Camera cam = Camera::look_at(Vec3(0, -4, 0), Vec3::Zero(), Vec3::UnitZ(), 20.0, 16, 16);
  EXPECT_THROW(decode(a, cam, dec, small_config(k)), DecoderDivergence);
}

TEST(FromNets, ShapeMismatchThrows) {
  std::vector<MlpNet> nets = {MlpNet::zeros(kDecoderInputDim, kDecoderHiddenDim, 10)};
  EXPECT_THROW(GaussianDecoder::from_nets(2, DecoderLayout::Shared, nets), std::invalid_argument);
  EXPECT_THROW(GaussianDecoder::from_nets(1, DecoderLayout::Separate, nets), std::invalid_argument);
}

TEST(DecodeBackward, ZeroUpstreamGivesZeroGradients) {
  const int k = 3;
  const GaussianDecoder dec(k, DecoderLayout::Shared, 9);
  SplitMix64 rng(5);
  const Anchor a = random_anchor(rng, k);
  const Camera cam = Camera::look_at(Vec3(0, -4, 0), Vec3::Zero(), Vec3::UnitZ(), 20.0, 16, 16);
  const DecodedAnchor d = decode(a, cam, dec, small_config(k));
  std::vector<GaussianGrad> up(k);
  std::vector<MlpNet> mg = dec.zero_grad();
  const AnchorGrad g = decode_backward(d.tape, up, dec, &mg);
  EXPECT_EQ(g.feature.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.offsets.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.center.cwiseAbs().maxCoeff(), 0.0);
  for (const auto& n : mg) EXPECT_EQ(n.w1.cwiseAbs().maxCoeff(), 0.0);
}

TEST(DecodeBackward, OffsetGradientIsVoxelScaledPositionGradient) {
  const int k = 2;
  const GaussianDecoder dec(k, DecoderLayout::Shared, 9);
  SplitMix64 rng(6);
  const Anchor a = random_anchor(rng, k);
  const LoDConfig cfg = small_config(k);
  const Camera cam = Camera::look_at(Vec3(0, -4, 0), Vec3::Zero(), Vec3::UnitZ(), 20.0, 16, 16);
  const DecodedAnchor d = decode(a, cam, dec, cfg);
  std::vector<GaussianGrad> up(k);
  up[1].mu = Vec3(1.0, -2.0, 0.5);
  const AnchorGrad g = decode_backward(d.tape, up, dec, nullptr);
  EXPECT_TRUE(g.offsets.row(1).transpose().isApprox(up[1].mu * cfg.voxel_size(a.level)));
  EXPECT_EQ(g.offsets.row(0).cwiseAbs().maxCoeff(), 0.0);
}

TEST(DecodeBackward, MatchesFiniteDifferences) {
  for (DecoderLayout layout : {DecoderLayout::Shared, DecoderLayout::Separate}) {
    const int k = 3;
    GaussianDecoder dec(k, layout, 21);
    SplitMix64 rng(7);
    Anchor a = random_anchor(rng, k);
    const LoDConfig cfg = small_config(k);
    const Camera cam = Camera::look_at(Vec3(1, -4, 0.5), Vec3::Zero(), Vec3::UnitZ(), 20.0, 16, 16);
    std::vector<GaussianGrad> up(k);
    for (auto& u : up) {
      u.mu = Vec3(rng.normal(), rng.normal(), rng.normal());
      u.scale = Vec3(rng.normal(), rng.normal(), rng.normal());
      u.rot = Vec4(rng.normal(), rng.normal(), rng.normal(), rng.normal());
      u.opacity = rng.normal();
      u.color = Vec3(rng.normal(), rng.normal(), rng.normal());
    }
    const auto objective = [&](const Anchor& an, const GaussianDecoder& d) {
      const DecodedAnchor out = decode(an, cam, d, cfg);
      double s = 0.0;
      for (int i = 0; i < k; ++i) {
        const NeuralGaussian& g = out.gaussians[i];
        s += up[i].mu.dot(g.mu) + up[i].scale.dot(g.scale) + up[i].rot.dot(g.rot.as_vec()) +
             up[i].opacity * g.opacity + up[i].color.dot(g.color);
      }
      return s;
    };
    const DecodedAnchor d = decode(a, cam, dec, cfg);
    std::vector<MlpNet> mg = dec.zero_grad();
    const AnchorGrad g = decode_backward(d.tape, up, dec, &mg);
    constexpr double h = 1e-6;
    const auto fd = [&](double& p) {
      const double s = p;
      p = s + h;
      const double fp = objective(a, dec);
      p = s - h;
      const double fm = objective(a, dec);
      p = s;
      return (fp - fm) / (2 * h);
    };
    for (int i = 0; i < kFeatureDim; ++i) EXPECT_NEAR(g.feature[i], fd(a.feature[i]), 1e-6);
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(g.center[c], fd(a.center[c]), 1e-6);
    for (int i = 0; i < k; ++i)
      for (int c = 0; c < 3; ++c) {
        EXPECT_NEAR(g.offsets(i, c), fd(a.offsets(i, c)), 1e-6);
        EXPECT_NEAR(g.raw_scales(i, c), fd(a.raw_scales(i, c)), 1e-6);
      }
    // A sample of weights; the decoder is mutated in place, so take the nets first.
    for (std::size_t ni = 0; ni < dec.nets().size(); ++ni) {
      for (int s = 0; s < 10; ++s) {
        const Eigen::Index r = static_cast<Eigen::Index>(rng.next() % dec.nets()[ni].w2.size());
        const double analytic = mg[ni].w2.data()[r];
        auto& n = dec.mutable_nets()[ni];
        const double saved = n.w2.data()[r];
        n.w2.data()[r] = saved + h;
        const double fp = objective(a, dec);
        n.w2.data()[r] = saved - h;
        const double fm = objective(a, dec);
        n.w2.data()[r] = saved;
        EXPECT_NEAR(analytic, (fp - fm) / (2 * h), 1e-6);
      }
    }
  }
}

TEST(DecodeBackward, StaleTapeAfterWeightChange) {
  const int k = 2;
  GaussianDecoder dec(k, DecoderLayout::Shared, 3);
  SplitMix64 rng(8);
  const Anchor a = random_anchor(rng, k);
  const Camera cam = Camera::look_at(Vec3(0, -4, 0), Vec3::Zero(), Vec3::UnitZ(), 20.0, 16, 16);
  const DecodedAnchor d = decode(a, cam, dec, small_config(k));
  dec.mutable_nets();
  std::vector<GaussianGrad> up(k);
  EXPECT_THROW(decode_backward(d.tape, up, dec, nullptr), StaleTape);
}

TEST(Dropout, RateFormula) {
  const DropoutSchedule s{100};
  EXPECT_DOUBLE_EQ(s.rate(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(s.rate(0, 100), 0.1);
  EXPECT_NEAR(s.rate(2, 50), 0.1, 1e-15);
  EXPECT_THROW(s.rate(0, 101), std::invalid_argument);
}

TEST(Dropout, StepZeroKeepsAll) {
  const std::vector<int> levels(1000, 3);
  const DropoutMask m = dropout_mask(levels, 0, DropoutSchedule{10}, 1, true);
  EXPECT_EQ(m.dropped(), 0u);
  for (double f : m.factor) EXPECT_EQ(f, 1.0);
}

TEST(Dropout, InferenceKeepsAll) {
  const std::vector<int> levels(1000, 3);
  const DropoutMask m = dropout_mask(levels, 10, DropoutSchedule{10}, 1, false);
  EXPECT_EQ(m.dropped(), 0u);
  for (double f : m.factor) EXPECT_EQ(f, 1.0);
}

TEST(Dropout, LevelZeroFullScheduleWithinBinomialBand) {
  constexpr int n = 100000;
  const std::vector<int> levels(n, 0);
  const DropoutMask m = dropout_mask(levels, 10, DropoutSchedule{10}, 42, true);
  const double sd = std::sqrt(n * 0.1 * 0.9);
  EXPECT_LE(std::abs(static_cast<double>(m.dropped()) - 0.1 * n), 3 * sd);
  for (double f : m.factor) EXPECT_TRUE(f == 0.0 || std::abs(f - 1.0 / 0.9) < 1e-15);
}

TEST(Dropout, DeterministicForSeed) {
  const std::vector<int> levels(500, 1);
  EXPECT_EQ(dropout_mask(levels, 5, DropoutSchedule{10}, 9, true).factor,
            dropout_mask(levels, 5, DropoutSchedule{10}, 9, true).factor);
}
