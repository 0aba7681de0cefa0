"""Image files (PGM/PPM/PNG, via Pillow) as float arrays in [0, 1]."""
from __future__ import annotations

import numpy as np
from PIL import Image


def to_uint8(image) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def read_gray(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def write_gray(path, image) -> None:
    """Grayscale; the format follows the suffix (``.pgm`` writes binary P5)."""
    Image.fromarray(to_uint8(image), mode="L").save(path)


def write_rgb(path, image) -> None:
    """(H, W, 3) image, uint8 or float in [0, 1]; ``.ppm`` writes binary P6."""
    Image.fromarray(to_uint8(image), mode="RGB").save(path)
