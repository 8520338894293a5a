"""Lightweight learned non-local image denoising."""

from .image_io import NoiseSpec, add_awgn, load_image, luminance, psnr, save_image
from .model_io import load_model, save_model
from .network import ArchDescriptor, LidiaNet, count_params, init_params
from .patches import PatchConfig
from .training import AdaptConfig, TrainConfig, adapt_external, adapt_internal, evaluate, train_universal

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig",
    "ArchDescriptor",
    "LidiaNet",
    "NoiseSpec",
    "PatchConfig",
    "TrainConfig",
    "adapt_external",
    "adapt_internal",
    "add_awgn",
    "count_params",
    "evaluate",
    "init_params",
    "load_image",
    "load_model",
    "luminance",
    "psnr",
    "save_image",
    "save_model",
    "train_universal",
]
