"""Deterministic synthetic images for smoke tests and the self-test."""

from __future__ import annotations

import numpy as np

from .rng import Xoshiro256pp


def scene_card(size: int = 64, channels: int = 1) -> np.ndarray:
    """Piecewise-smooth scene: a ramp, a disc, a bar and a ring, values in [0.1, 0.9]."""
    y, x = np.mgrid[0:size, 0:size] / size
    img = 0.25 + 0.3 * x
    img = np.where((x - 0.35) ** 2 + (y - 0.4) ** 2 < 0.05, 0.8, img)
    img = np.where((np.abs(y - 0.78) < 0.07) & (x > 0.15) & (x < 0.85), 0.15, img)
    r = np.sqrt((x - 0.75) ** 2 + (y - 0.3) ** 2)
    img = np.where(np.abs(r - 0.12) < 0.03, 0.65, img)
    img = np.clip(img, 0.1, 0.9)
    if channels == 3:
        img = np.stack([img, 0.6 * img + 0.2 * x, np.flipud(img)], axis=-1)
        return np.round(img * 255) / 255
    return np.round(img[:, :, None] * 255) / 255


def tiled_texture(size: int = 64, tile: int = 8, seed: int = 0) -> np.ndarray:
    """An image built by repeating one random ``tile x tile`` block (maximal self-similarity)."""
    rng = Xoshiro256pp(seed)
    block = 0.2 + 0.6 * rng.random(tile * tile).reshape(tile, tile)
    reps = -(-size // tile)
    img = np.tile(block, (reps, reps))[:size, :size]
    return np.round(img[:, :, None] * 255) / 255
