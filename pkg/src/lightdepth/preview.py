"""Depth raster output: 16-bit millimetre PNGs and colormapped previews."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from ._turbo import TURBO

_TABLE = np.array(TURBO, dtype=np.uint8)


def colorize(depth: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Map depth to turbo RGB: nearest valid depth -> hot end, farthest -> cold end.

    Invalid pixels are black.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if valid is None:
        valid = np.isfinite(depth)
    out = np.zeros(depth.shape + (3,), dtype=np.uint8)
    if not valid.any():
        return out
    near, far = depth[valid].min(), depth[valid].max()
    if far > near:
        t = (far - depth[valid]) / (far - near)
    else:
        t = np.full(int(valid.sum()), 0.5)
    idx = np.round(t * (len(_TABLE) - 1)).astype(int)
    out[valid] = _TABLE[idx]
    return out


def write_depth_mm(path: str | os.PathLike, depth_m: np.ndarray) -> None:
    mm = np.clip(np.round(np.asarray(depth_m, dtype=np.float64) * 1000.0), 0, 65535)
    Image.fromarray(mm.astype(np.uint16)).save(path)


def write_preview(path: str | os.PathLike, depth_m: np.ndarray) -> None:
    Image.fromarray(colorize(depth_m), "RGB").save(path)
