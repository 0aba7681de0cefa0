"""Dense flow fields, Middlebury ``.flo`` I/O and colour coding."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

FLO_MAGIC = 202021.25
FLO_INVALID = 1e9


@dataclass
class FlowField:
    du: np.ndarray
    dv: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.du = np.asarray(self.du, dtype=np.float64)
        self.dv = np.asarray(self.dv, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if not (self.du.shape == self.dv.shape == self.valid.shape):
            raise ValueError("flow channels and mask must share a shape")

    @classmethod
    def zeros(cls, shape) -> "FlowField":
        return cls(np.zeros(shape), np.zeros(shape), np.ones(shape, dtype=bool))

    @classmethod
    def constant(cls, shape, du: float, dv: float) -> "FlowField":
        return cls(np.full(shape, float(du)), np.full(shape, float(dv)), np.ones(shape, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.du.shape

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.du, self.dv)

    def stack(self) -> np.ndarray:
        return np.stack([self.du, self.dv], axis=-1)

    def __add__(self, other: "FlowField") -> "FlowField":
        return FlowField(self.du + other.du, self.dv + other.dv, self.valid & other.valid)

    def __neg__(self) -> "FlowField":
        return FlowField(-self.du, -self.dv, self.valid.copy())


def write_flo(path, flow: FlowField) -> None:
    """Middlebury format; invalid pixels are written as ``FLO_INVALID``."""
    h, w = flow.shape
    data = np.empty((h, w, 2), dtype="<f4")
    data[..., 0] = np.where(flow.valid, flow.du, FLO_INVALID)
    data[..., 1] = np.where(flow.valid, flow.dv, FLO_INVALID)
    with open(path, "wb") as f:
        np.array([FLO_MAGIC], dtype="<f4").tofile(f)
        np.array([w, h], dtype="<i4").tofile(f)
        data.tofile(f)


def read_flo(path) -> FlowField:
    with open(path, "rb") as f:
        magic = np.fromfile(f, "<f4", count=1)
        if magic.size != 1 or magic[0] != np.float32(FLO_MAGIC):
            raise ValueError(f"{path}: bad .flo magic number")
        w, h = (int(v) for v in np.fromfile(f, "<i4", count=2))
        data = np.fromfile(f, "<f4", count=2 * w * h)
    if data.size != 2 * w * h:
        raise ValueError(f"{path}: truncated .flo payload")
    data = data.reshape(h, w, 2).astype(np.float64)
    valid = (np.abs(data[..., 0]) < FLO_INVALID / 2) & (np.abs(data[..., 1]) < FLO_INVALID / 2)
    du = np.where(valid, data[..., 0], 0.0)
    dv = np.where(valid, data[..., 1], 0.0)
    return FlowField(du, dv, valid)


def _color_wheel() -> np.ndarray:
    RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((RY + YG + GC + CB + BM + MR, 3))
    col = 0
    wheel[col:col + RY, 0] = 255
    wheel[col:col + RY, 1] = np.floor(255 * np.arange(RY) / RY)
    col += RY
    wheel[col:col + YG, 0] = 255 - np.floor(255 * np.arange(YG) / YG)
    wheel[col:col + YG, 1] = 255
    col += YG
    wheel[col:col + GC, 1] = 255
    wheel[col:col + GC, 2] = np.floor(255 * np.arange(GC) / GC)
    col += GC
    wheel[col:col + CB, 1] = 255 - np.floor(255 * np.arange(CB) / CB)
    wheel[col:col + CB, 2] = 255
    col += CB
    wheel[col:col + BM, 2] = 255
    wheel[col:col + BM, 0] = np.floor(255 * np.arange(BM) / BM)
    col += BM
    wheel[col:col + MR, 2] = 255 - np.floor(255 * np.arange(MR) / MR)
    wheel[col:col + MR, 0] = 255
    return wheel


def flow_to_rgb(flow: FlowField, max_mag: float | None = None) -> np.ndarray:
    """Middlebury colour coding as uint8 (H, W, 3); invalid pixels black."""
    mag = flow.magnitude
    if max_mag is None:
        max_mag = float(mag[flow.valid].max()) if flow.valid.any() else 1.0
    max_mag = max(max_mag, 1e-9)
    u = flow.du / max_mag
    v = flow.dv / max_mag
    rad = np.sqrt(u * u + v * v)
    wheel = _color_wheel()
    ncols = wheel.shape[0]
    a = np.arctan2(-v, -u) / np.pi
    fk = (a + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = fk - k0
    img = np.zeros(flow.shape + (3,), dtype=np.uint8)
    for i in range(3):
        c0 = wheel[k0, i] / 255.0
        c1 = wheel[k1, i] / 255.0
        col = (1 - f) * c0 + f * c1
        small = rad <= 1
        col = np.where(small, 1 - rad * (1 - col), col * 0.75)
        img[..., i] = np.floor(255 * col).astype(np.uint8)
    img[~flow.valid] = 0
    return img
