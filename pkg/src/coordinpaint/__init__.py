"""Coordinate-based texture inpainting for pose-guided image generation."""

from .pipeline import (
    ABLATIONS,
    Pipeline,
    PipelineConfig,
    evaluate,
    infer,
    load_pipeline,
    train_stage1,
    train_stage2,
    transfer_garment,
)
from .synth import SceneConfig, generate_pair
from .warp import ColorTexture, CoordTexture, UvMap

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS",
    "ColorTexture",
    "CoordTexture",
    "Pipeline",
    "PipelineConfig",
    "SceneConfig",
    "UvMap",
    "evaluate",
    "generate_pair",
    "infer",
    "load_pipeline",
    "train_stage1",
    "train_stage2",
    "transfer_garment",
]
