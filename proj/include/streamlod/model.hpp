#pragma once

#include "streamlod/decoder.hpp"
#include "streamlod/lod.hpp"
#include "streamlod/rasterizer.hpp"
#include "streamlod/residual_codec.hpp"

#include <filesystem>
#include <optional>

namespace streamlod {

/// Everything needed to render a frame: anchors, the shared decoder and, once
/// streaming has started, the frozen latent decoders.
struct Model {
  LoDHierarchy hierarchy;
  GaussianDecoder decoder;
  std::optional<LatentDecoders> latents;

  /// Rounds every stored real to f32 so the checkpoint reproduces it exactly.
  void round_to_f32();
};

/// Select, decode and rasterize one view at inference time (no dropout).
RenderOutput render_model(const Model& m, const Camera& cam, const RenderSettings& settings);

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> encode_checkpoint(const Model& m);
Model decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const Model& m);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace streamlod
