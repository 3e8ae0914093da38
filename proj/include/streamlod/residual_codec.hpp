#pragma once

#include "streamlod/lod.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace streamlod {

inline constexpr int kLatentDim = 12;
inline constexpr double kDefaultQuantStep = 0.02;

/// Per-frame bitstream versions: 1 carries quantized latents, 2 carries
/// unquantized full-width residuals.
inline constexpr std::uint32_t kSlrfQuantized = 1;
inline constexpr std::uint32_t kSlrfRaw = 2;
inline constexpr std::size_t kSlrfHeaderBytes = 24;
inline constexpr std::size_t kSlrfQuantizedRecordBytes = 8 + 12 + 2 * kLatentDim + 2 * kLatentDim;

enum class ResidualKind { Quantized, Raw };

struct ResidualEntry {
  AnchorId anchor_id = 0;
  std::array<float, 3> pos_delta{0.f, 0.f, 0.f};
  /// Quantized kind: 12-dim latents (real values; multiples of the step once
  /// finalized). Raw kind: full feature (32) and offset (3K) residuals.
  Eigen::VectorXd feature_code;
  Eigen::VectorXd offset_code;
};

struct ResidualSet {
  std::uint32_t frame = 0;
  ResidualKind kind = ResidualKind::Quantized;
  float step_feature = static_cast<float>(kDefaultQuantStep);
  float step_offset = static_cast<float>(kDefaultQuantStep);
  std::vector<ResidualEntry> entries;
};

/// Byte size of an encoded quantized frame: 24 + 68 * count.
constexpr std::size_t quantized_frame_bytes(std::size_t dynamic_count) {
  return kSlrfHeaderBytes + kSlrfQuantizedRecordBytes * dynamic_count;
}
/// Byte size of an unquantized frame with the given attribute widths.
constexpr std::size_t raw_frame_bytes(std::size_t dynamic_count, std::size_t feature_dim, std::size_t offset_dim) {
  return kSlrfHeaderBytes + (8 + 12 + 4 * feature_dim + 4 * offset_dim) * dynamic_count;
}

/// Rounds latent / step to the nearest integer (ties to even).
struct QuantizedLatent {
  Eigen::VectorXd values;              // dequantized forward values
  std::vector<std::int64_t> integers;  // before the i16 range check
};
QuantizedLatent quantize_ste(const Eigen::VectorXd& latent, double step);

/// Straight-through backward: identity.
inline Eigen::VectorXd quantize_ste_backward(const Eigen::VectorXd& upstream) { return upstream; }

/// Linear maps from the 12-dim latents to the feature (32) and offset (3K) residuals.
struct LatentDecoders {
  Eigen::MatrixXd feature;  // 32 x 12
  Eigen::MatrixXd offset;   // 3K x 12
  bool frozen = false;

  static LatentDecoders random(int k, std::uint64_t seed, double scale = 0.1);
  Eigen::VectorXd feature_residual(const Eigen::VectorXd& latent) const { return feature * latent; }
  Eigen::VectorXd offset_residual(const Eigen::VectorXd& latent) const { return offset * latent; }
  /// Rounds weights to f32 so an on-disk copy reproduces them exactly.
  void round_to_f32();
};

struct ResidualOnStatic : std::logic_error {
  ResidualOnStatic() : std::logic_error("residual on static anchor") {}
};

/// Adds a decoded residual entry to a dynamic anchor: center += pos_delta,
/// feature += D_f(latent), offsets += D_o(latent). Raw entries add directly.
void apply_residual(Anchor& anchor, const ResidualEntry& entry, ResidualKind kind, const LatentDecoders& decoders);

enum class CodecErrorCode { BadMagic, Truncated, UnknownVersion, Overflow, Malformed };

struct CodecError : std::runtime_error {
  CodecError(CodecErrorCode c, const char* what) : std::runtime_error(what), code(c) {}
  CodecErrorCode code;
};

std::vector<std::uint8_t> encode_frame(const ResidualSet& res);
ResidualSet decode_frame(std::span<const std::uint8_t> bytes);

/// Snaps every latent of the set onto its quantization grid (throws on overflow).
void finalize_quantized(ResidualSet& res);

}  // namespace streamlod
