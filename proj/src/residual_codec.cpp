#include "streamlod/residual_codec.hpp"

#include "streamlod/byte_io.hpp"
#include "streamlod/rng.hpp"

#include <cmath>
#include <limits>

namespace streamlod {

QuantizedLatent quantize_ste(const Eigen::VectorXd& latent, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("quantization step must be positive");
  QuantizedLatent q;
  q.values.resize(latent.size());
  q.integers.resize(latent.size());
  for (Eigen::Index i = 0; i < latent.size(); ++i) {
    const double r = round_half_even(latent[i] / step);
    q.integers[i] = static_cast<std::int64_t>(r);
    q.values[i] = r * step;
  }
  return q;
}

LatentDecoders LatentDecoders::random(int k, std::uint64_t seed, double scale) {
  LatentDecoders d;
  d.feature.resize(kFeatureDim, kLatentDim);
  d.offset.resize(3 * k, kLatentDim);
  SplitMix64 rng(seed);
  for (Eigen::Index i = 0; i < d.feature.size(); ++i) d.feature.data()[i] = scale * rng.uniform(-1.0, 1.0);
  for (Eigen::Index i = 0; i < d.offset.size(); ++i) d.offset.data()[i] = scale * rng.uniform(-1.0, 1.0);
  return d;
}

void LatentDecoders::round_to_f32() {
  for (Eigen::Index i = 0; i < feature.size(); ++i) feature.data()[i] = static_cast<float>(feature.data()[i]);
  for (Eigen::Index i = 0; i < offset.size(); ++i) offset.data()[i] = static_cast<float>(offset.data()[i]);
}

void apply_residual(Anchor& anchor, const ResidualEntry& entry, ResidualKind kind,
                    const LatentDecoders& decoders) {
  if (anchor.state != AnchorState::Dynamic) throw ResidualOnStatic();
  const int k = anchor.k();
  Eigen::VectorXd d_feature, d_offset;
  if (kind == ResidualKind::Quantized) {
    d_feature = decoders.feature_residual(entry.feature_code);
    d_offset = decoders.offset_residual(entry.offset_code);
  } else {
    d_feature = entry.feature_code;
    d_offset = entry.offset_code;
  }
  if (d_feature.size() != anchor.feature.size() || d_offset.size() != 3 * k)
    throw std::invalid_argument("residual width does not match anchor");
  for (int c = 0; c < 3; ++c) anchor.center[c] += static_cast<double>(entry.pos_delta[c]);
  anchor.feature += d_feature;
  for (int i = 0; i < k; ++i)
    for (int c = 0; c < 3; ++c) anchor.offsets(i, c) += d_offset[3 * i + c];
}

void finalize_quantized(ResidualSet& res) {
  if (res.kind != ResidualKind::Quantized) return;
  for (auto& e : res.entries) {
    e.feature_code = quantize_ste(e.feature_code, res.step_feature).values;
    e.offset_code = quantize_ste(e.offset_code, res.step_offset).values;
  }
}

namespace {

void write_quantized(ByteWriter& w, const Eigen::VectorXd& latent, double step) {
  if (latent.size() != kLatentDim) throw CodecError(CodecErrorCode::Malformed, "latent width must be 12");
  const QuantizedLatent q = quantize_ste(latent, step);
  for (std::int64_t v : q.integers) {
    if (v > std::numeric_limits<std::int16_t>::max() || v < -std::numeric_limits<std::int16_t>::max())
      throw CodecError(CodecErrorCode::Overflow, "latent overflow");
    w.i16(static_cast<std::int16_t>(v));
  }
}

}  // namespace

std::vector<std::uint8_t> encode_frame(const ResidualSet& res) {
  ByteWriter w;
  w.bytes("SLRF");
  const bool quantized = res.kind == ResidualKind::Quantized;
  w.u32(quantized ? kSlrfQuantized : kSlrfRaw);
  w.u32(res.frame);
  w.u32(static_cast<std::uint32_t>(res.entries.size()));
  std::size_t feat_dim = 0, off_dim = 0;
  if (quantized) {
    if (!(res.step_feature > 0.f) || !(res.step_offset > 0.f))
      throw CodecError(CodecErrorCode::Malformed, "quantization step must be positive");
    w.f32(res.step_feature);
    w.f32(res.step_offset);
  } else {
    if (!res.entries.empty()) {
      feat_dim = static_cast<std::size_t>(res.entries.front().feature_code.size());
      off_dim = static_cast<std::size_t>(res.entries.front().offset_code.size());
    }
    w.u32(static_cast<std::uint32_t>(feat_dim));
    w.u32(static_cast<std::uint32_t>(off_dim));
  }
  for (const auto& e : res.entries) {
    w.u64(e.anchor_id);
    for (float v : e.pos_delta) w.f32(v);
    if (quantized) {
      write_quantized(w, e.feature_code, res.step_feature);
      write_quantized(w, e.offset_code, res.step_offset);
    } else {
      if (static_cast<std::size_t>(e.feature_code.size()) != feat_dim ||
          static_cast<std::size_t>(e.offset_code.size()) != off_dim)
        throw CodecError(CodecErrorCode::Malformed, "inconsistent residual widths");
      for (double v : e.feature_code) w.f32(static_cast<float>(v));
      for (double v : e.offset_code) w.f32(static_cast<float>(v));
    }
  }
  return w.take();
}

ResidualSet decode_frame(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw CodecError(CodecErrorCode::Truncated, "truncated stream");
  ByteReader r(bytes);
  try {
    if (r.bytes(4) != "SLRF") throw CodecError(CodecErrorCode::BadMagic, "bad magic");
    const std::uint32_t version = r.u32();
    if (version != kSlrfQuantized && version != kSlrfRaw)
      throw CodecError(CodecErrorCode::UnknownVersion, "unknown version");
    ResidualSet res;
    res.frame = r.u32();
    const std::uint32_t count = r.u32();
    std::uint32_t feat_dim = kLatentDim, off_dim = kLatentDim;
    if (version == kSlrfQuantized) {
      res.kind = ResidualKind::Quantized;
      res.step_feature = r.f32();
      res.step_offset = r.f32();
      if (!(res.step_feature > 0.f) || !(res.step_offset > 0.f))
        throw CodecError(CodecErrorCode::Malformed, "quantization step must be positive");
    } else {
      res.kind = ResidualKind::Raw;
      feat_dim = r.u32();
      off_dim = r.u32();
    }
    const std::size_t record = version == kSlrfQuantized ? kSlrfQuantizedRecordBytes
                                                         : 8 + 12 + 4 * std::size_t{feat_dim} + 4 * std::size_t{off_dim};
    if (r.remaining() < record * count) throw TruncatedInput();
    res.entries.resize(count);
    for (auto& e : res.entries) {
      e.anchor_id = r.u64();
      for (float& v : e.pos_delta) v = r.f32();
      e.feature_code.resize(feat_dim);
      e.offset_code.resize(off_dim);
      if (version == kSlrfQuantized) {
        for (auto& v : e.feature_code) v = static_cast<double>(r.i16()) * static_cast<double>(res.step_feature);
        for (auto& v : e.offset_code) v = static_cast<double>(r.i16()) * static_cast<double>(res.step_offset);
      } else {
        for (auto& v : e.feature_code) v = r.f32();
        for (auto& v : e.offset_code) v = r.f32();
      }
    }
    if (!r.at_end()) throw CodecError(CodecErrorCode::Malformed, "trailing bytes after frame");
    return res;
  } catch (const TruncatedInput&) {
    throw CodecError(CodecErrorCode::Truncated, "truncated stream");
  }
}

}  // namespace streamlod
