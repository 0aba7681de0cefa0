"""Warping, correlation cost volumes and sub-pixel residual extraction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import minimum_filter, uniform_filter

from . import _kernels
from .field import FlowField

_VAR_EPS = 1e-8


def bilinear_sample(grid: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Sample (C, H, W) or (H, W) at continuous positions.

    Returns the samples and a mask of positions inside the grid; outside
    positions are filled from the nearest border pixel.
    """
    squeeze = grid.ndim == 2
    g = grid[None] if squeeze else grid
    h, w = g.shape[1:]
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (xc - x0).astype(g.dtype)
    ay = (yc - y0).astype(g.dtype)
    flat = g.reshape(g.shape[0], -1)
    i00 = (y0 * w + x0).ravel()
    i01 = (y0 * w + x1).ravel()
    i10 = (y1 * w + x0).ravel()
    i11 = (y1 * w + x1).ravel()
    ax = ax.ravel()
    ay = ay.ravel()
    top = flat[:, i00] * (1 - ax) + flat[:, i01] * ax
    bot = flat[:, i10] * (1 - ax) + flat[:, i11] * ax
    out = (top * (1 - ay) + bot * ay).reshape((g.shape[0],) + x.shape)
    return (out[0] if squeeze else out), inside


def _grid(shape):
    v, u = np.mgrid[0:shape[0], 0:shape[1]]
    return u.astype(np.float64), v.astype(np.float64)


def warp(features: np.ndarray, flow: FlowField):
    """Backward warp: ``out(u) = features(u + flow(u))`` plus in-bounds mask."""
    return offset_warp(features, flow, None)


def offset_warp(features: np.ndarray, flow: FlowField, offsets):
    """Warp sampling at ``u + flow(u) + offsets(u)``.

    ``offsets`` is a (2, H, W) grid of extra (x, y) displacements or None.
    """
    shape = features.shape[-2:]
    if flow.shape != tuple(shape):
        raise ValueError("flow and features differ in size")
    u, v = _grid(shape)
    x = u + flow.du
    y = v + flow.dv
    if offsets is not None:
        offsets = np.asarray(offsets, dtype=np.float64)
        if not np.all(np.isfinite(offsets)):
            raise ValueError("offsets must be finite")
        x = x + offsets[0]
        y = y + offsets[1]
    return bilinear_sample(features, x, y)


def consensus_offsets(flow: FlowField, patch_radius: int) -> np.ndarray:
    """Per-pixel correction moving each sample to the patch-consensus flow.

    Inside a matching window the warp reads every member at its own flow,
    ``F(u + r) ~ F(u) + J_F(u) r``; near motion boundaries that first-order
    term tears the window apart. The correction replaces the member's own
    flow by the window's component-wise separable median (median of the
    row medians), which equals the pixel's flow wherever the field is
    locally affine.
    """
    mu = _kernels.separable_median(np.ascontiguousarray(flow.du, dtype=np.float64), patch_radius)
    mv = _kernels.separable_median(np.ascontiguousarray(flow.dv, dtype=np.float64), patch_radius)
    return np.stack([mu - flow.du, mv - flow.dv])


@dataclass
class CostVolume:
    """Matching costs indexed by displacement ``(dx, dy)``, dy-major order."""

    cost: np.ndarray      # (D, H, W) float32 normalised correlation in [-1, 1]
    valid: np.ndarray     # (D, H, W) bool
    textured: np.ndarray  # (H, W) bool, False where the source patch is flat
    max_disp: int

    @property
    def displacements(self) -> np.ndarray:
        d = self.max_disp
        dy, dx = np.mgrid[-d:d + 1, -d:d + 1]
        return np.stack([dx.ravel(), dy.ravel()], axis=1)

    def index(self, dx: int, dy: int) -> int:
        n = 2 * self.max_disp + 1
        return (dy + self.max_disp) * n + (dx + self.max_disp)


def _box(a: np.ndarray, size: int) -> np.ndarray:
    return uniform_filter(a, size=size, mode="nearest")


def _inv_std(var: np.ndarray) -> np.ndarray:
    out = np.zeros_like(var, dtype=np.float32)
    ok = var > _VAR_EPS
    out[ok] = 1.0 / np.sqrt(var[ok])
    return out


def correlation_volume(f1: np.ndarray, f2: np.ndarray, max_disp: int, patch_radius: int = 2,
                       valid2: np.ndarray | None = None) -> CostVolume:
    """Zero-mean normalised patch correlation over all integer displacements.

    Patches span every channel of the (C, H, W) grids. A displacement is
    invalid when its target patch leaves ``f2`` or touches a pixel that is
    False in ``valid2``; source patches cut by the image border count as
    untextured.
    """
    if f1.shape != f2.shape:
        raise ValueError("feature grids differ in shape")
    if f1.ndim == 2:
        f1, f2 = f1[None], f2[None]
    f1 = np.ascontiguousarray(f1, dtype=np.float32)
    f2 = np.ascontiguousarray(f2, dtype=np.float32)
    C, H, W = f1.shape
    d = int(max_disp)
    r = int(patch_radius)
    size = 2 * r + 1
    if valid2 is None:
        valid2 = np.ones((H, W), dtype=bool)

    mu1 = np.stack([_box(c, size) for c in f1])
    var1 = _box((f1 * f1).sum(0), size) - (mu1 * mu1).sum(0)
    mu2 = np.stack([_box(c, size) for c in f2])
    var2 = _box((f2 * f2).sum(0), size) - (mu2 * mu2).sum(0)
    textured = var1 > _VAR_EPS
    textured[:r] = textured[-r:] = False
    textured[:, :r] = textured[:, -r:] = False
    patch_ok = minimum_filter(valid2.astype(np.uint8), size=size, mode="constant", cval=0).astype(bool)

    pad = ((0, 0), (d, d), (d, d))
    cost, valid = _kernels.correlate(
        f1, np.pad(f2, pad, mode="edge"), mu1.astype(np.float32), _inv_std(var1),
        np.pad(mu2, pad, mode="edge").astype(np.float32), np.pad(_inv_std(var2), pad[1:], mode="edge"),
        np.pad(patch_ok, pad[1:], constant_values=False), d, r)
    return CostVolume(cost, valid, textured, d)


@dataclass(frozen=True)
class ResidualEstimator:
    """Parameters of the per-level residual step; one instance serves all levels."""

    subpixel: bool = True
    clamp: float = 0.5
    flat_tol: float = 1e-6
    min_peak: float = 0.9


def estimate_residual(volume: CostVolume, params: ResidualEstimator | None = None):
    """Arg-max displacement with per-axis parabolic refinement.

    Returns the residual ``FlowField`` and a confidence map (peak minus mean
    cost; zero on flat volumes and textureless patches).
    """
    params = params or ResidualEstimator()
    du, dv, confidence = _kernels.argmax_residual(
        volume.cost, volume.valid, volume.textured, volume.max_disp, params.flat_tol,
        params.min_peak, params.clamp, params.subpixel)
    return FlowField(du, dv, np.ones(du.shape, dtype=bool)), confidence
