"""styledial: continuously adjustable style-attribute editing on a toy diffusion model."""

from .diffusion import (
    GuidanceConfig,
    NoiseSchedule,
    add_noise,
    compose_cfg,
    compose_full,
    ddim_invert_step,
    ddim_step,
    effect_guidance,
    inference_timesteps,
    make_schedule,
)
from .image import ImageBuffer, load_png, save_png
from .model import DenoiserConfig, ModelBundle, StyleParams, load_bundle, save_bundle

__all__ = [
    "GuidanceConfig",
    "NoiseSchedule",
    "ImageBuffer",
    "DenoiserConfig",
    "ModelBundle",
    "StyleParams",
    "add_noise",
    "compose_cfg",
    "compose_full",
    "ddim_step",
    "ddim_invert_step",
    "effect_guidance",
    "inference_timesteps",
    "make_schedule",
    "load_bundle",
    "save_bundle",
    "load_png",
    "save_png",
]

__version__ = "0.1.0"
