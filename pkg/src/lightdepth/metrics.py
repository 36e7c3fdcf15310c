"""Depth evaluation metrics: RMSE, squared error ratio (SqRel) and MAE.

All metrics pool valid pixels across the whole evaluation set before
reducing, rather than averaging per-image scores.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .losses import DepthMap
from .ops import upsample2x_array


class DegenerateError(ValueError):
    """Ground truth is constant, so the SqRel denominator vanishes."""


def _pool(y, yhat, mask=None) -> tuple[np.ndarray, np.ndarray]:
    """Flatten aligned (sets of) maps into 1-D float64 arrays of valid pixels."""
    if isinstance(y, (list, tuple)):
        if not isinstance(yhat, (list, tuple)) or len(y) != len(yhat):
            raise ValueError("prediction and ground-truth sets differ in length")
        masks = mask if mask is not None else [None] * len(y)
        parts = [_pool(a, b, m) for a, b, m in zip(y, yhat, masks)]
        if not parts:
            raise ValueError("empty evaluation set")
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])
    if isinstance(y, DepthMap):
        mask = y.valid if mask is None else (mask & y.valid)
        y = y.depth
    if isinstance(yhat, DepthMap):
        yhat = yhat.depth
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {yhat.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        return y[mask], yhat[mask]
    return y.ravel(), yhat.ravel()


def _nonempty(y: np.ndarray) -> None:
    if y.size == 0:
        raise ValueError("no valid pixels to evaluate")


def rmse(y, yhat, mask=None) -> float:
    y, yhat = _pool(y, yhat, mask)
    _nonempty(y)
    return math.sqrt(np.mean((y - yhat) ** 2))


def mae(y, yhat, mask=None) -> float:
    y, yhat = _pool(y, yhat, mask)
    _nonempty(y)
    return float(np.mean(np.abs(y - yhat)))


def sq_rel(y, yhat, mask=None) -> float:
    """Total squared error over total squared deviation of ``y`` about its mean."""
    y, yhat = _pool(y, yhat, mask)
    _nonempty(y)
    den = float(np.sum((y - y.mean()) ** 2))
    if den == 0.0:
        raise DegenerateError("ground truth is constant; SqRel is undefined")
    return float(np.sum((y - yhat) ** 2)) / den


def sq_rel_conventional(y, yhat, mask=None) -> float:
    """The mean((y - yhat)^2 / y) variant common in depth benchmarks."""
    y, yhat = _pool(y, yhat, mask)
    _nonempty(y)
    return float(np.mean((y - yhat) ** 2 / y))


@dataclass
class MetricsReport:
    rmse: float
    sq_rel: float | None
    mae: float
    n_pixels: int
    n_images: int

    @property
    def sq_rel_degenerate(self) -> bool:
        return self.sq_rel is None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    def table(self) -> str:
        cell = lambda v: "n/a" if v is None else f"{v:.4f}"  # noqa: E731
        rows = [("RMSE", "Sq Rel", "MAE"), (cell(self.rmse), cell(self.sq_rel), cell(self.mae))]
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = [" | ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows]
        lines.insert(1, "-+-".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def to_meters(pred: np.ndarray, resolution_policy: str, shape: tuple[int, int],
              m: float = 10.0) -> np.ndarray:
    """Bring a transformed-depth prediction to ground-truth resolution in meters."""
    pred = np.asarray(pred, dtype=np.float64)
    if resolution_policy == "half":
        pred = upsample2x_array(pred)
    elif resolution_policy != "full":
        raise ValueError(f"unknown resolution policy {resolution_policy!r}")
    if pred.shape != tuple(shape):
        raise ValueError(f"prediction resolves to {pred.shape}, ground truth is {shape}")
    return m / pred


def evaluate(predictions: Sequence[np.ndarray], ground_truths: Sequence[DepthMap],
             resolution_policy: str = "half", transformed: bool = True,
             m: float = 10.0) -> MetricsReport:
    """Score predictions against ground-truth depth maps in meters.

    ``predictions`` are transformed-depth maps at network output resolution
    unless ``transformed`` is False, in which case they are already meters.
    """
    if len(predictions) != len(ground_truths):
        raise ValueError("prediction and ground-truth sets differ in length")
    if not predictions:
        raise ValueError("empty evaluation set")
    ys, yhats = [], []
    for pred, gt in zip(predictions, ground_truths):
        if not isinstance(gt, DepthMap):
            gt = DepthMap(gt)
        if transformed:
            pred = to_meters(pred, resolution_policy, gt.shape, m)
        elif resolution_policy == "half":
            pred = upsample2x_array(np.asarray(pred, dtype=np.float64))
        ys.append(gt)
        yhats.append(np.asarray(pred, dtype=np.float64))
    y, yhat = _pool(ys, yhats)
    try:
        sr = sq_rel(y, yhat)
    except DegenerateError:
        sr = None
    return MetricsReport(rmse=rmse(y, yhat), sq_rel=sr, mae=mae(y, yhat),
                         n_pixels=int(y.size), n_images=len(ys))


__all__ = ["rmse", "mae", "sq_rel", "sq_rel_conventional", "MetricsReport", "evaluate",
           "DegenerateError", "to_meters"]
