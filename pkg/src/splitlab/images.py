"""Lossless 8-bit PNG dumps of image tensors."""

from __future__ import annotations

import os
import warnings

import numpy as np
from PIL import Image


def quantize(x: np.ndarray) -> np.ndarray:
    """``round(v * 255)`` as uint8 after clamping to [0, 1] (warns if clamping was needed)."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0) or np.any(x > 1) or not np.all(np.isfinite(x)):
        warnings.warn("image values outside [0, 1] were clamped")
        x = np.nan_to_num(x, nan=0.0, posinf=1.0, neginf=0.0)
    return np.round(np.clip(x, 0.0, 1.0) * 255).astype(np.uint8)


def to_pil(img: np.ndarray) -> Image.Image:
    """(C, H, W) with C in {1, 3}, or (H, W), values in [0, 1]."""
    q = quantize(img)
    if q.ndim == 3:
        q = q[0] if q.shape[0] == 1 else q.transpose(1, 2, 0)
    return Image.fromarray(q)


def dump_images(tensors, path, prefix: str = "img") -> list[str]:
    """Write each image of a batch as ``<path>/<prefix>_<i>.png``; returns the file names."""
    os.makedirs(path, exist_ok=True)
    names = []
    for i, img in enumerate(np.asarray(tensors)):
        name = os.path.join(path, f"{prefix}_{i:04d}.png")
        to_pil(img).save(name, format="PNG", optimize=False)
        names.append(name)
    return names


def load_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float32) / 255.0
    return arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
