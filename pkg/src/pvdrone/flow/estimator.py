"""Coarse-to-fine flow estimation with a single shared residual step."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt

from .field import FlowField
from .matching import (
    ResidualEstimator,
    bilinear_sample,
    consensus_offsets,
    correlation_volume,
    estimate_residual,
    offset_warp,
)
from .pyramid import build_pyramid


@dataclass
class FlowConfig:
    levels: int = 5
    max_disp: int = 4
    patch_radius: int = 2
    use_offset_sampling: bool = True
    lambda_photo: float = 1.0
    lambda_smooth: float = 2.0
    lambda_self_max: float = 0.3
    residual: ResidualEstimator = field(default_factory=ResidualEstimator)

    def __post_init__(self):
        if self.max_disp < 1:
            raise ValueError("max_disp must be >= 1")
        if self.patch_radius < 1:
            raise ValueError("patch_radius must be >= 1")
        if self.levels < 2:
            raise ValueError("levels must be >= 2")

    @property
    def search_range(self) -> int:
        """Largest displacement reachable at full resolution."""
        return sum(self.max_disp * 2 ** l for l in range(self.levels))

    def to_dict(self) -> dict:
        return {"levels": self.levels, "max_disp": self.max_disp, "patch_radius": self.patch_radius,
                "use_offset_sampling": self.use_offset_sampling, "lambda_photo": self.lambda_photo,
                "lambda_smooth": self.lambda_smooth, "lambda_self_max": self.lambda_self_max}

    @classmethod
    def from_dict(cls, d: dict) -> "FlowConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__ and k != "residual"})


def upsample_flow(flow: FlowField, shape) -> FlowField:
    """Bilinear x2 upsampling with pixel-centre alignment; values doubled."""
    h, w = shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    x = (u - 0.5) / 2.0
    y = (v - 0.5) / 2.0
    (du, dv), _ = bilinear_sample(np.stack([flow.du, flow.dv]), x, y)
    return FlowField(2.0 * du, 2.0 * dv, np.ones(shape, dtype=bool))


def _fill_unsupported(flow: FlowField, supported: np.ndarray) -> FlowField:
    """Copy flow from the nearest supported pixel where matching had no support."""
    if supported.all() or not supported.any():
        return flow
    _, (iy, ix) = distance_transform_edt(~supported, return_indices=True)
    return FlowField(flow.du[iy, ix], flow.dv[iy, ix], flow.valid)


def estimate_flow(I1, I2, cfg: FlowConfig | None = None, trace: list | None = None) -> FlowField:
    """Flow from ``I1`` to ``I2`` (grayscale in [0, 1]).

    Each level upsamples only the flow of the level directly above it,
    warps the second image's features (optionally with consensus offsets),
    correlates, and adds the arg-max residual. ``trace`` collects one record
    per level: which level's flow it read and the residual parameters used.
    """
    cfg = cfg or FlowConfig()
    I1 = np.asarray(I1, dtype=np.float64)
    I2 = np.asarray(I2, dtype=np.float64)
    if I1.shape != I2.shape:
        raise ValueError("images differ in size")
    p1 = build_pyramid(I1, cfg.levels)
    p2 = build_pyramid(I2, cfg.levels)

    flow = None
    for level in range(cfg.levels - 1, -1, -1):
        shape = p1.shape(level)
        if flow is None:
            flow = FlowField.zeros(shape)
            read = None
        else:
            flow = upsample_flow(flow, shape)
            read = level + 1
        offsets = consensus_offsets(flow, cfg.patch_radius) if cfg.use_offset_sampling else None
        if offsets is not None:
            flow = FlowField(flow.du + offsets[0], flow.dv + offsets[1], flow.valid)
        warped, inside = offset_warp(p2.levels[level], flow, None)
        volume = correlation_volume(p1.levels[level], warped, cfg.max_disp, cfg.patch_radius, inside)
        residual, confidence = estimate_residual(volume, cfg.residual)
        flow = _fill_unsupported(flow + residual, confidence > 0)
        if trace is not None:
            trace.append({"level": level, "reads_level": read, "residual_params": cfg.residual})

    h, w = I1.shape
    v, u = np.mgrid[0:h, 0:w]
    x = u + flow.du
    y = v + flow.dv
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    return FlowField(flow.du, flow.dv, valid)
