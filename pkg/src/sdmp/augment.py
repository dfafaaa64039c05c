"""Batch augmentations for 32x32-scale images (numpy, per-sample randomness)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mixing import resize_bilinear


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    crop_pad: int = 4
    flip: bool = True
    brightness: float = 0.4
    contrast: float = 0.4
    blur_prob: float = 0.0
    solarize_prob: float = 0.0
    local_scale: tuple = (0.25, 0.6)


def random_crop(images: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    if pad <= 0:
        return images
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    out = np.empty_like(images)
    for i in range(n):
        out[i] = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    return out


def random_flip(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    mask = rng.random(len(images)) < 0.5
    out = images.copy()
    out[mask] = out[mask][..., ::-1]
    return out


def color_jitter(images: np.ndarray, brightness: float, contrast: float, rng: np.random.Generator) -> np.ndarray:
    n = len(images)
    b = rng.uniform(-brightness, brightness, size=n).astype(images.dtype) * 0.5
    c = rng.uniform(1 - contrast, 1 + contrast, size=n).astype(images.dtype)
    mean = images.mean(axis=(1, 2, 3), keepdims=True)
    out = (images - mean) * c[:, None, None, None] + mean + b[:, None, None, None]
    return np.clip(out, 0, 1)


def gaussian_blur(images: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Separable 3-tap Gaussian blur with edge replication."""
    k = np.exp(-np.array([1.0, 0.0, 1.0]) / (2 * sigma**2))
    k = (k / k.sum()).astype(images.dtype)
    p = np.pad(images, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    rows = k[0] * p[:, :, :-2, :] + k[1] * p[:, :, 1:-1, :] + k[2] * p[:, :, 2:, :]
    return k[0] * rows[:, :, :, :-2] + k[1] * rows[:, :, :, 1:-1] + k[2] * rows[:, :, :, 2:]


def augment(images: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """One global view: crop with padding, flip, jitter, optional blur and solarisation."""
    if not cfg.enabled:
        return images.copy()
    out = random_crop(images, cfg.crop_pad, rng)
    if cfg.flip:
        out = random_flip(out, rng)
    if cfg.brightness or cfg.contrast:
        out = color_jitter(out, cfg.brightness, cfg.contrast, rng)
    if cfg.blur_prob > 0:
        mask = rng.random(len(out)) < cfg.blur_prob
        if mask.any():
            out[mask] = gaussian_blur(out[mask])
    if cfg.solarize_prob > 0:
        mask = rng.random(len(out)) < cfg.solarize_prob
        out[mask] = np.where(out[mask] >= 0.5, 1 - out[mask], out[mask])
    return out


def local_view(images: np.ndarray, size: int, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random square crop covering ``local_scale`` of the side, resized to ``size``."""
    n, _, h, w = images.shape
    if not cfg.enabled:
        return resize_bilinear(images, size, size)
    lo, hi = cfg.local_scale
    side = np.maximum((rng.uniform(lo, hi, size=n) * min(h, w)).astype(np.int64), 2)
    top = rng.integers(0, h - side + 1)
    left = rng.integers(0, w - side + 1)
    out = np.empty(images.shape[:2] + (size, size), dtype=images.dtype)
    for i in range(n):
        out[i] = resize_bilinear(images[i, :, top[i] : top[i] + side[i], left[i] : left[i] + side[i]], size, size)
    if cfg.flip:
        out = random_flip(out, rng)
    if cfg.brightness or cfg.contrast:
        out = color_jitter(out, cfg.brightness, cfg.contrast, rng)
    return out
