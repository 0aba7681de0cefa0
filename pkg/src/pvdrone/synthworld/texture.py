"""Seedable multi-octave value noise evaluated at world coordinates."""
from __future__ import annotations

import numpy as np

_M1 = np.uint64(0x8DA6B343)
_M2 = np.uint64(0xD8163841)
_M3 = np.uint64(0xCB1AB31F)
_MIX = np.uint64(0x5BD1E995)
_LOW24 = np.uint64(0xFFFFFF)


def _lattice(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    h = (ix.astype(np.int64).astype(np.uint64) * _M1) ^ (iy.astype(np.int64).astype(np.uint64) * _M2)
    h ^= np.uint64(seed & 0xFFFFFFFF) * _M3
    h ^= h >> np.uint64(13)
    h *= _MIX
    h ^= h >> np.uint64(15)
    h *= _MIX
    h ^= h >> np.uint64(17)
    return (h & _LOW24).astype(np.float64) / float(0xFFFFFF)


def _fade(t):
    # quintic: C2-continuous so bilinear resampling error stays small
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def value_noise(x, y, seed: int, cell: float) -> np.ndarray:
    """Single-octave value noise in [0, 1] with lattice spacing ``cell``."""
    gx = np.asarray(x, dtype=float) / cell
    gy = np.asarray(y, dtype=float) / cell
    ix = np.floor(gx)
    iy = np.floor(gy)
    fx = _fade(gx - ix)
    fy = _fade(gy - iy)
    ix = ix.astype(np.int64)
    iy = iy.astype(np.int64)
    v00 = _lattice(ix, iy, seed)
    v10 = _lattice(ix + 1, iy, seed)
    v01 = _lattice(ix, iy + 1, seed)
    v11 = _lattice(ix + 1, iy + 1, seed)
    a = v00 + (v10 - v00) * fx
    b = v01 + (v11 - v01) * fx
    return a + (b - a) * fy


def fractal_noise(x, y, seed: int, cells=(4.0, 2.0, 1.0, 0.5),
                  weights=(0.4, 0.3, 0.2, 0.1)) -> np.ndarray:
    """Weighted octave sum, normalised to [0, 1]."""
    total = np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape)
    for k, (cell, w) in enumerate(zip(cells, weights)):
        total += w * value_noise(x, y, seed * 7919 + k * 104729 + 1, cell)
    return total / float(sum(weights))
