from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import PvdError

MIN_LEVEL_SIZE = 8


class TooSmall(PvdError):
    pass


@dataclass
class Pyramid:
    """Feature grids (3, H, W) per level, finest first.

    Channels are intensity and its central-difference x and y derivatives.
    """

    levels: list

    def __len__(self) -> int:
        return len(self.levels)

    def shape(self, level: int) -> tuple[int, int]:
        return self.levels[level].shape[1:]


def gradient_channels(image: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(image)
    return np.stack([image, gx, gy]).astype(np.float32)


def downsample(image: np.ndarray) -> np.ndarray:
    """2x2 average pooling; odd sizes are edge-padded first."""
    h, w = image.shape
    if h % 2 or w % 2:
        image = np.pad(image, ((0, h % 2), (0, w % 2)), mode="edge")
    return 0.25 * (image[0::2, 0::2] + image[1::2, 0::2] + image[0::2, 1::2] + image[1::2, 1::2])


def level_shapes(shape, levels: int) -> list[tuple[int, int]]:
    shapes = [tuple(shape)]
    for _ in range(levels - 1):
        h, w = shapes[-1]
        shapes.append(((h + 1) // 2, (w + 1) // 2))
    return shapes


def build_pyramid(image, levels: int) -> Pyramid:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.size == 0:
        raise ValueError("expected a non-empty grayscale image")
    if levels < 2:
        raise ValueError("a pyramid needs at least two levels")
    coarsest = level_shapes(image.shape, levels)[-1]
    if min(coarsest) < MIN_LEVEL_SIZE:
        raise TooSmall(f"coarsest level {coarsest} below {MIN_LEVEL_SIZE}x{MIN_LEVEL_SIZE}")
    grids = []
    current = image
    for _ in range(levels):
        grids.append(gradient_channels(current))
        current = downsample(current)
    return Pyramid(grids)
