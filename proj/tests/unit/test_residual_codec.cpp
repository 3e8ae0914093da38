#include "streamlod/residual_codec.hpp"
#include "streamlod/rng.hpp"

#include <gtest/gtest.h>

#include <cstring>

using namespace streamlod;

namespace {

ResidualEntry random_entry(SplitMix64& rng, double range = 2.0) {
  ResidualEntry e;
  e.anchor_id = rng.next();
  for (float& p : e.pos_delta) p = static_cast<float>(rng.uniform(-0.1, 0.1));
  e.feature_code = Eigen::VectorXd(kLatentDim);
  e.offset_code = Eigen::VectorXd(kLatentDim);
  for (int j = 0; j < kLatentDim; ++j) {
    e.feature_code[j] = rng.uniform(-range, range);
    e.offset_code[j] = rng.uniform(-range, range);
  }
  return e;
}

Anchor dynamic_anchor(int k) {
  Anchor a;
  a.id = 4;
  a.center = Vec3(0.1, 0.2, 0.3);
  a.offsets = RowMatX3::Constant(k, 3, 0.05);
  a.raw_scales = RowMatX3::Zero(k, 3);
  a.state = AnchorState::Dynamic;
  return a;
}

CodecErrorCode decode_error(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_frame(bytes);
  } catch (const CodecError& e) {
    return e.code;
  }
  ADD_FAILURE() << "decode succeeded";
  return CodecErrorCode::Malformed;
}

}  // namespace

TEST(QuantizeSte, Rounding) {
  Eigen::VectorXd v(5);
  v << 0.0, 0.4, 0.6, 0.5, 1.5;
  const QuantizedLatent q = quantize_ste(v, 1.0);
  EXPECT_EQ(q.integers, (std::vector<std::int64_t>{0, 0, 1, 0, 2}));
  EXPECT_EQ(q.values[2], 1.0);
  EXPECT_THROW(quantize_ste(v, 0.0), std::invalid_argument);
}

TEST(QuantizeSte, BackwardIsIdentity) {
  SplitMix64 rng(1);
  const LatentDecoders ld = LatentDecoders::random(10, 3);
  Eigen::VectorXd latent(kLatentDim), target(kFeatureDim);
  for (int i = 0; i < kLatentDim; ++i) latent[i] = rng.uniform(-1, 1);
  for (int i = 0; i < kFeatureDim; ++i) target[i] = rng.uniform(-1, 1);
  const Eigen::VectorXd q = quantize_ste(latent, 0.02).values;
  const Eigen::VectorXd up = ld.feature.transpose() * (ld.feature * q - target);
  EXPECT_EQ(quantize_ste_backward(up), up);
}

TEST(ApplyResidual, ZeroResidualLeavesAnchorUnchanged) {
  const int k = 10;
  const LatentDecoders ld = LatentDecoders::random(k, 5);
  Anchor a = dynamic_anchor(k);
  const Anchor before = a;
  ResidualEntry e;
  e.feature_code = Eigen::VectorXd::Zero(kLatentDim);
  e.offset_code = Eigen::VectorXd::Zero(kLatentDim);
  apply_residual(a, e, ResidualKind::Quantized, ld);
  EXPECT_EQ(a.center, before.center);
  EXPECT_EQ(a.feature, before.feature);
  EXPECT_EQ(a.offsets, before.offsets);
}

TEST(ApplyResidual, PositionOnlyMovesCenter) {
  const int k = 10;
  const LatentDecoders ld = LatentDecoders::random(k, 5);
  Anchor a = dynamic_anchor(k);
  const Anchor before = a;
  ResidualEntry e;
  e.pos_delta = {1.f, 0.f, 0.f};
  e.feature_code = Eigen::VectorXd::Zero(kLatentDim);
  e.offset_code = Eigen::VectorXd::Zero(kLatentDim);
  apply_residual(a, e, ResidualKind::Quantized, ld);
  EXPECT_EQ(a.center, before.center + Vec3(1, 0, 0));
  EXPECT_EQ(a.feature, before.feature);
  EXPECT_EQ(a.offsets, before.offsets);
}

TEST(ApplyResidual, LatentsMapThroughDecoders) {
  const int k = 2;
  const LatentDecoders ld = LatentDecoders::random(k, 6);
  SplitMix64 rng(2);
  Anchor a = dynamic_anchor(k);
  const Anchor before = a;
  const ResidualEntry e = random_entry(rng);
  apply_residual(a, e, ResidualKind::Quantized, ld);
  EXPECT_TRUE(a.feature.isApprox(before.feature + ld.feature * e.feature_code));
  const Eigen::VectorXd off = ld.offset * e.offset_code;
  for (int i = 0; i < k; ++i)
    for (int c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(a.offsets(i, c), before.offsets(i, c) + off[3 * i + c]);
}

TEST(ApplyResidual, StaticAnchorRejected) {
  const LatentDecoders ld = LatentDecoders::random(2, 6);
  Anchor a = dynamic_anchor(2);
  a.state = AnchorState::Static;
  ResidualEntry e;
  e.feature_code = Eigen::VectorXd::Zero(kLatentDim);
  e.offset_code = Eigen::VectorXd::Zero(kLatentDim);
  EXPECT_THROW(apply_residual(a, e, ResidualKind::Quantized, ld), ResidualOnStatic);
}

TEST(ApplyResidual, RoundTripMatchesQuantizedValues) {
  const int k = 10;
  const LatentDecoders ld = LatentDecoders::random(k, 8);
  SplitMix64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    ResidualSet set;
    set.frame = 3;
    for (int i = 0; i < 5; ++i) set.entries.push_back(random_entry(rng));
    ResidualSet snapped = set;
    finalize_quantized(snapped);
    const ResidualSet decoded = decode_frame(encode_frame(set));
    for (int i = 0; i < 5; ++i) {
      Anchor a = dynamic_anchor(k), b = dynamic_anchor(k);
      apply_residual(a, decoded.entries[i], ResidualKind::Quantized, ld);
      apply_residual(b, snapped.entries[i], ResidualKind::Quantized, ld);
      EXPECT_EQ(a.center, b.center);
      EXPECT_EQ(a.feature, b.feature);
      EXPECT_EQ(a.offsets, b.offsets);
    }
  }
}

TEST(EncodeFrame, Sizes) {
  ResidualSet set;
  EXPECT_EQ(encode_frame(set).size(), 24u);
  SplitMix64 rng(4);
  for (int i = 0; i < 100; ++i) set.entries.push_back(random_entry(rng));
  EXPECT_EQ(encode_frame(set).size(), 6824u);
  EXPECT_EQ(quantized_frame_bytes(100), 6824u);
  EXPECT_EQ(raw_frame_bytes(1, 32, 30), 24u + 8 + 12 + 4 * 32 + 4 * 30);
}

TEST(EncodeFrame, HeaderLayout) {
  ResidualSet set;
  set.frame = 7;
  SplitMix64 rng(5);
  set.entries.push_back(random_entry(rng));
  const auto b = encode_frame(set);
  EXPECT_EQ(std::memcmp(b.data(), "SLRF", 4), 0);
  EXPECT_EQ(b[4], kSlrfQuantized);
  EXPECT_EQ(b[8], 7);
  EXPECT_EQ(b[12], 1);
  float step = 0.f;
  std::memcpy(&step, b.data() + 16, 4);
  EXPECT_EQ(step, set.step_feature);
  std::uint64_t id = 0;
  std::memcpy(&id, b.data() + 24, 8);
  EXPECT_EQ(id, set.entries[0].anchor_id);
}

TEST(EncodeFrame, HeaderOnlyRoundTrip) {
  ResidualSet set;
  set.frame = 42;
  const ResidualSet back = decode_frame(encode_frame(set));
  EXPECT_EQ(back.frame, 42u);
  EXPECT_TRUE(back.entries.empty());
}

TEST(EncodeFrame, RoundTripByteExact) {
  SplitMix64 rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    ResidualSet set;
    set.frame = static_cast<std::uint32_t>(trial);
    const int n = static_cast<int>(rng.next() % 20);
    for (int i = 0; i < n; ++i) set.entries.push_back(random_entry(rng));
    const auto bytes = encode_frame(set);
    EXPECT_EQ(encode_frame(decode_frame(bytes)), bytes);
  }
}

TEST(EncodeFrame, RawKindRoundTrip) {
  SplitMix64 rng(7);
  ResidualSet set;
  set.kind = ResidualKind::Raw;
  for (int i = 0; i < 3; ++i) {
    ResidualEntry e = random_entry(rng);
    e.feature_code = Eigen::VectorXd::Constant(kFeatureDim, 0.25);
    e.offset_code = Eigen::VectorXd::Constant(30, -0.5);
    set.entries.push_back(e);
  }
  const auto bytes = encode_frame(set);
  EXPECT_EQ(bytes.size(), raw_frame_bytes(3, kFeatureDim, 30));
  const ResidualSet back = decode_frame(bytes);
  EXPECT_EQ(back.kind, ResidualKind::Raw);
  EXPECT_EQ(back.entries[2].offset_code, set.entries[2].offset_code);
  EXPECT_EQ(encode_frame(back), bytes);
}

TEST(EncodeFrame, OverflowDetected) {
  SplitMix64 rng(8);
  ResidualSet set;
  set.entries.push_back(random_entry(rng));
  set.entries[0].feature_code[3] = 32768 * 0.02;
  try {
    encode_frame(set);
    FAIL() << "expected overflow";
  } catch (const CodecError& e) {
    EXPECT_EQ(e.code, CodecErrorCode::Overflow);
    EXPECT_STREQ(e.what(), "latent overflow");
  }
  set.entries[0].feature_code[3] = 32767 * 0.02;
  EXPECT_NO_THROW(encode_frame(set));
}

TEST(DecodeFrame, Errors) {
  SplitMix64 rng(9);
  ResidualSet set;
  set.entries.push_back(random_entry(rng));
  const auto good = encode_frame(set);

  auto truncated = std::vector<std::uint8_t>(good.begin(), good.begin() + 23);
  EXPECT_EQ(decode_error(truncated), CodecErrorCode::Truncated);
  try {
    decode_frame(truncated);
  } catch (const CodecError& e) {
    EXPECT_STREQ(e.what(), "truncated stream");
  }
  truncated = std::vector<std::uint8_t>(good.begin(), good.end() - 1);
  EXPECT_EQ(decode_error(truncated), CodecErrorCode::Truncated);

  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_EQ(decode_error(bad_magic), CodecErrorCode::BadMagic);

  auto bad_version = good;
  bad_version[4] = 9;
  EXPECT_EQ(decode_error(bad_version), CodecErrorCode::UnknownVersion);

  auto trailing = good;
  trailing.push_back(0);
  EXPECT_EQ(decode_error(trailing), CodecErrorCode::Malformed);

  auto bad_step = good;
  std::memset(bad_step.data() + 16, 0, 4);
  EXPECT_EQ(decode_error(bad_step), CodecErrorCode::Malformed);
}

TEST(LatentDecoders, RoundToF32IsIdempotent) {
  LatentDecoders ld = LatentDecoders::random(10, 11);
  ld.round_to_f32();
  const LatentDecoders copy = ld;
  ld.round_to_f32();
  EXPECT_EQ(ld.feature, copy.feature);
  EXPECT_EQ(ld.feature.rows(), kFeatureDim);
  EXPECT_EQ(ld.offset.rows(), 30);
  for (Eigen::Index i = 0; i < ld.offset.size(); ++i)
    EXPECT_EQ(ld.offset.data()[i], static_cast<double>(static_cast<float>(ld.offset.data()[i])));
}
