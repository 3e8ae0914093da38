"""Streaming level-of-detail Gaussian splatting.

Images are (H, W, C) float64 arrays in [0, 1]. Residual frames are ``bytes``
in the SLRF format written by the C++ trainer.
"""

from ._streamlod import (
    Camera,
    CodecError,
    ConfigError,
    Gmm2,
    Model,
    ReportRow,
    ResidualEntry,
    ResidualKind,
    ResidualSet,
    RunConfig,
    RunResult,
    Scene,
    anchor_base_level,
    decode_frame,
    encode_frame,
    fit_gmm,
    generate_scene,
    level_count,
    load_scene,
    playback,
    psnr,
    quantized_frame_bytes,
    render_run,
    run_stream,
    ssim,
)

__all__ = [name for name in dir() if not name.startswith("_")]
