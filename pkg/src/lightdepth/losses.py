"""Composite depth loss and the reciprocal depth transform.

The training objective is ``lambda * L1 + L1_grad + L_SSIM`` evaluated in
transformed-depth units ``m / depth``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import Tensor


@dataclass
class DepthMap:
    """Single-channel depth raster with a per-pixel validity mask."""

    depth: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth)
        if self.valid is None:
            self.valid = np.isfinite(self.depth) & (self.depth > 0)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.depth.shape:
            raise ValueError("validity mask shape differs from depth shape")

    @property
    def shape(self):
        return self.depth.shape


@dataclass
class LossConfig:
    lam: float = 0.1
    ssim_window: int = 7
    dynamic_range: float = 10.0
    max_depth: float = 10.0
    min_depth: float = 1.0
    ssim_c1: float | None = None
    ssim_c2: float | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be odd and >= 3")
        if self.dynamic_range <= 0 or self.max_depth <= 0 or self.min_depth <= 0:
            raise ValueError("dynamic range and depth bounds must be positive")
        if self.min_depth > self.max_depth:
            raise ValueError("min_depth exceeds max_depth")
        if self.ssim_c1 is None:
            self.ssim_c1 = (0.01 * self.dynamic_range) ** 2
        if self.ssim_c2 is None:
            self.ssim_c2 = (0.03 * self.dynamic_range) ** 2
        if self.ssim_c1 <= 0 or self.ssim_c2 <= 0:
            raise ValueError("SSIM constants must be positive")


@dataclass
class LossBreakdown:
    l1: Tensor
    l1_grad: Tensor
    l_ssim: Tensor
    total: Tensor
    values: dict = field(init=False)

    def __post_init__(self):
        self.values = {k: float(getattr(self, k).item())
                       for k in ("l1", "l1_grad", "l_ssim", "total")}


# ---------------------------------------------------------------- transform
def depth_transform(depth: DepthMap | np.ndarray, m: float = 10.0,
                    min_depth: float = 1.0) -> DepthMap:
    """Clamp to ``[min_depth, m]`` then map ``d -> m / d``.

    The map is its own inverse on clamped values. Invalid pixels are left at
    zero and never divided.
    """
    if m <= 0:
        raise ValueError("m must be positive")
    if not isinstance(depth, DepthMap):
        depth = DepthMap(depth)
    d = depth.depth
    out = np.zeros_like(d, dtype=np.result_type(d.dtype, np.float32))
    v = depth.valid
    clamped = np.clip(d[v], min_depth, m)
    out[v] = m / clamped
    return DepthMap(out, v.copy())


inverse_depth_transform = depth_transform


# ------------------------------------------------------------------- L1 terms
def _masked_mean(x: Tensor, mask: np.ndarray | None) -> Tensor:
    if mask is None:
        return ops.mean(x)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no valid pixels")
    return ops.sum_(ops.mul(x, Tensor(mask.astype(x.dtype)))) / float(n)


def _check_same(y: Tensor, yhat: Tensor) -> None:
    if y.shape != yhat.shape:
        raise ops.ShapeError(f"shape mismatch {y.shape} vs {yhat.shape}")


def l1_loss(y: Tensor, yhat: Tensor, mask: np.ndarray | None = None) -> Tensor:
    _check_same(y, yhat)
    return _masked_mean(ops.absolute(ops.sub(y, yhat)), mask)


def grad_loss(y: Tensor, yhat: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean absolute difference of forward differences along width and height."""
    _check_same(y, yhat)
    if y.ndim != 4 or y.shape[2] < 2 or y.shape[3] < 2:
        raise ops.ShapeError(f"grad_loss needs N x C x H x W with H, W >= 2, got {y.shape}")
    d = ops.sub(y, yhat)
    gx = ops.sub(d[:, :, :, 1:], d[:, :, :, :-1])
    gy = ops.sub(d[:, :, 1:, :], d[:, :, :-1, :])
    mx = my = None
    if mask is not None:
        mx = mask[:, :, :, 1:] & mask[:, :, :, :-1]
        my = mask[:, :, 1:, :] & mask[:, :, :-1, :]
    return ops.add(_masked_mean(ops.absolute(gx), mx), _masked_mean(ops.absolute(gy), my))


# ----------------------------------------------------------------------- SSIM
def ssim(x: Tensor, y: Tensor, cfg: LossConfig | None = None,
         mask: np.ndarray | None = None) -> Tensor:
    """Mean SSIM over all valid (unpadded) uniform windows."""
    cfg = cfg or LossConfig()
    _check_same(x, y)
    k = cfg.ssim_window
    if x.ndim != 4 or x.shape[2] < k or x.shape[3] < k:
        raise ops.ShapeError(f"SSIM window {k} larger than image {x.shape[2:]}")
    pool = lambda t: ops.avg_pool2d(t, k, 1)  # noqa: E731
    mu_x, mu_y = pool(x), pool(y)
    mu_xx = ops.mul(mu_x, mu_x)
    mu_yy = ops.mul(mu_y, mu_y)
    mu_xy = ops.mul(mu_x, mu_y)
    var_x = ops.sub(pool(ops.mul(x, x)), mu_xx)
    var_y = ops.sub(pool(ops.mul(y, y)), mu_yy)
    cov = ops.sub(pool(ops.mul(x, y)), mu_xy)
    num = ops.mul(ops.add(ops.mul(mu_xy, 2.0), cfg.ssim_c1),
                  ops.add(ops.mul(cov, 2.0), cfg.ssim_c2))
    den = ops.mul(ops.add(ops.add(mu_xx, mu_yy), cfg.ssim_c1),
                  ops.add(ops.add(var_x, var_y), cfg.ssim_c2))
    smap = ops.div(num, den)
    wmask = None
    if mask is not None:
        win = np.lib.stride_tricks.sliding_window_view(mask, (k, k), axis=(2, 3))
        wmask = win.all(axis=(4, 5))
        if not wmask.any():
            # no hole-free window anywhere: the structural term has nothing to say
            return Tensor(np.ones((), dtype=x.dtype))
    return _masked_mean(smap, wmask)


def ssim_loss(x: Tensor, y: Tensor, cfg: LossConfig | None = None,
              mask: np.ndarray | None = None) -> Tensor:
    s = ssim(x, y, cfg, mask)
    return ops.mul(ops.sub(1.0, s), 0.5)


def composite_loss(y: Tensor, yhat: Tensor, cfg: LossConfig | None = None,
                   mask: np.ndarray | None = None) -> LossBreakdown:
    """``lam * L1 + L1_grad + L_SSIM`` on transformed-depth tensors."""
    cfg = cfg or LossConfig()
    y = y if isinstance(y, Tensor) else Tensor(y, dtype=yhat.dtype)
    l1 = l1_loss(y, yhat, mask)
    lg = grad_loss(y, yhat, mask)
    ls = ssim_loss(y, yhat, cfg, mask)
    total = ops.add(ops.add(ops.mul(l1, cfg.lam), lg), ls)
    return LossBreakdown(l1, lg, ls, total)
