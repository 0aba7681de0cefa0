"""Corner keypoints with normalised patch descriptors, and their matching."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..core import BoundingBox2D, Category
from ..flow.matching import bilinear_sample

PATCH = 8
DESCRIPTOR_SIZE = PATCH * PATCH
_OFFSETS = np.arange(PATCH) - (PATCH - 1) / 2.0


@dataclass
class Keypoint:
    position: np.ndarray           # (u, v) pixels
    descriptor: np.ndarray         # unit-norm, length 64
    response: float = 0.0
    box_tag: int | None = None     # index of the containing 2D box
    excluded: bool = False         # inside a moving-car box


@dataclass
class CorrespondenceSet:
    """Pairs ``(i, j)``: query keypoint ``i`` against reference item ``j``."""

    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=int))
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=int).reshape(-1, 2)
        if self.inliers is None or len(self.inliers) != len(self.pairs):
            self.inliers = np.ones(len(self.pairs), dtype=bool)
        self.inliers = np.asarray(self.inliers, dtype=bool)
        for side in (0, 1):
            if len(np.unique(self.pairs[:, side])) != len(self.pairs):
                raise ValueError("correspondence indices must be unique per side")

    def __len__(self) -> int:
        return len(self.pairs)

    def inlier_pairs(self) -> np.ndarray:
        return self.pairs[self.inliers]

    def subset(self, mask) -> "CorrespondenceSet":
        mask = np.asarray(mask, dtype=bool)
        return CorrespondenceSet(self.pairs[mask], self.inliers[mask])


def harris_response(image: np.ndarray, sigma: float = 1.5, k: float = 0.04) -> np.ndarray:
    smooth = ndimage.gaussian_filter(image, 0.7)
    gy, gx = np.gradient(smooth)
    Sxx = ndimage.gaussian_filter(gx * gx, sigma)
    Syy = ndimage.gaussian_filter(gy * gy, sigma)
    Sxy = ndimage.gaussian_filter(gx * gy, sigma)
    return Sxx * Syy - Sxy * Sxy - k * (Sxx + Syy) ** 2


def patch_descriptors(image: np.ndarray, positions: np.ndarray):
    """Zero-mean unit-norm 8x8 patches centred on ``positions``.

    Returns the descriptors and a mask of patches with any contrast.
    """
    if len(positions) == 0:
        return np.zeros((0, DESCRIPTOR_SIZE)), np.zeros(0, dtype=bool)
    dy, dx = np.meshgrid(_OFFSETS, _OFFSETS, indexing="ij")
    x = positions[:, 0, None] + dx.ravel()[None]
    y = positions[:, 1, None] + dy.ravel()[None]
    patches, _ = bilinear_sample(image, x, y)
    patches = patches - patches.mean(axis=1, keepdims=True)
    norm = np.linalg.norm(patches, axis=1)
    ok = norm > 1e-9
    patches[ok] /= norm[ok, None]
    return patches, ok


def _subpixel(R: np.ndarray, ys: np.ndarray, xs: np.ndarray):
    def vertex(lo, c, hi):
        den = lo - 2 * c + hi
        with np.errstate(divide="ignore", invalid="ignore"):
            off = np.where(den < 0, 0.5 * (lo - hi) / den, 0.0)
        return np.clip(off, -0.5, 0.5)

    ox = vertex(R[ys, xs - 1], R[ys, xs], R[ys, xs + 1])
    oy = vertex(R[ys - 1, xs], R[ys, xs], R[ys + 1, xs])
    return xs + ox, ys + oy


def extract_keypoints(image, boxes2d=(), rel_threshold: float = 0.1, nms_radius: int = 2,
                      max_keypoints: int = 2000, border: int = 6) -> list[Keypoint]:
    """Harris corners above ``rel_threshold`` times the 99th response percentile.

    A percentile reference keeps the count stable when a few very strong
    corners (car outlines) dominate the frame.

    Keypoints falling in a box are tagged with its index (the smallest box
    wins when boxes overlap); those inside MC boxes are flagged excluded.
    """
    image = np.asarray(image, dtype=float)
    R = harris_response(image)
    ref = np.percentile(R, 99.0)
    if not np.isfinite(ref) or ref <= 1e-14:
        return []
    is_max = R == ndimage.maximum_filter(R, size=2 * nms_radius + 1, mode="nearest")
    strong = is_max & (R > rel_threshold * ref)
    strong[:border] = strong[-border:] = False
    strong[:, :border] = strong[:, -border:] = False
    ys, xs = np.nonzero(strong)
    order = np.lexsort((xs, ys, -R[ys, xs]))[:max_keypoints]
    ys, xs = ys[order], xs[order]
    u, v = _subpixel(R, ys, xs)
    pos = np.column_stack([u, v])
    desc, ok = patch_descriptors(image, pos)

    boxes = list(boxes2d)
    tag = np.full(len(pos), -1)
    excluded = np.zeros(len(pos), dtype=bool)
    # larger boxes first so the smallest containing box is written last
    for i in sorted(range(len(boxes)), key=lambda i: (-boxes[i].area, -i)):
        inside = boxes[i].contains(pos[:, 0], pos[:, 1])
        tag[inside] = i
        excluded |= inside & (boxes[i].category == Category.MC)
    resp = R[ys, xs]
    out = [Keypoint(pos[k], desc[k], float(resp[k]), None if tag[k] < 0 else int(tag[k]), bool(excluded[k]))
           for k in np.nonzero(ok)[0]]
    return out


def descriptor_matrix(items) -> np.ndarray:
    if len(items) == 0:
        return np.zeros((0, DESCRIPTOR_SIZE))
    return np.stack([it.descriptor for it in items])


def match_candidates(A: np.ndarray, B: np.ndarray, ii, jj, ratio: float = 0.8) -> np.ndarray:
    """Mutual nearest neighbours among candidate pairs ``(ii[k], jj[k])``.

    The ratio test compares each row's best and second-best candidate;
    a row with a single candidate passes it. Ties go to the smaller index.
    """
    ii = np.asarray(ii, dtype=int)
    jj = np.asarray(jj, dtype=int)
    if len(ii) == 0:
        return np.zeros((0, 2), dtype=int)
    # unit vectors: distance = sqrt(2 - 2 cos)
    d = np.sqrt(np.maximum(2.0 - 2.0 * np.einsum("ij,ij->i", A[ii], B[jj]), 0.0))
    by_row = np.lexsort((jj, d, ii))
    first = np.ones(len(ii), dtype=bool)
    first[1:] = ii[by_row][1:] != ii[by_row][:-1]
    rows = ii[by_row][first]
    best_j = jj[by_row][first]
    best_d = d[by_row][first]
    pos = np.nonzero(first)[0]
    second = np.full(len(rows), np.inf)
    has2 = pos + 1 < len(by_row)
    has2[has2] &= ii[by_row][pos[has2] + 1] == rows[has2]
    second[has2] = d[by_row][pos[has2] + 1]
    by_col = np.lexsort((ii, d, jj))
    cfirst = np.ones(len(jj), dtype=bool)
    cfirst[1:] = jj[by_col][1:] != jj[by_col][:-1]
    col_best = dict(zip(jj[by_col][cfirst].tolist(), ii[by_col][cfirst].tolist()))
    mutual = np.fromiter((col_best[b] == a for a, b in zip(rows.tolist(), best_j.tolist())), dtype=bool,
                         count=len(rows))
    ok = mutual & (~np.isfinite(second) | (best_d < ratio * second))
    return np.column_stack([rows[ok], best_j[ok]])


def match_arrays(A: np.ndarray, B: np.ndarray, ratio: float = 0.8, allowed: np.ndarray | None = None,
                 usable_a=None, usable_b=None) -> np.ndarray:
    """Mutual nearest neighbours passing the ratio test; returns (M, 2) index pairs.

    ``allowed`` optionally restricts candidate pairs (e.g. to a search
    radius); the ratio test is applied within the allowed candidates.
    """
    if len(A) == 0 or len(B) == 0:
        return np.zeros((0, 2), dtype=int)
    mask = np.ones((len(A), len(B)), dtype=bool) if allowed is None else np.asarray(allowed, dtype=bool).copy()
    if usable_a is not None:
        mask &= np.asarray(usable_a, dtype=bool)[:, None]
    if usable_b is not None:
        mask &= np.asarray(usable_b, dtype=bool)[None, :]
    D = np.where(mask, np.sqrt(np.maximum(2.0 - 2.0 * (A @ B.T), 0.0)), np.inf)
    rows = np.arange(len(A))
    best_b = np.argmin(D, axis=1)
    best_a = np.argmin(D, axis=0)
    d1 = D[rows, best_b]
    D[rows, best_b] = np.inf
    second = D.min(axis=1)
    ok = np.isfinite(d1) & (best_a[best_b] == rows)
    with np.errstate(invalid="ignore"):
        ok &= ~np.isfinite(second) | (d1 < ratio * second)
    return np.column_stack([rows[ok], best_b[ok]])


def match_descriptors(a, b, ratio: float = 0.8, allowed=None) -> CorrespondenceSet:
    """Match keypoints ``a`` against keypoints or map points ``b``.

    Excluded keypoints on either side never take part.
    """
    usable_a = [not getattr(k, "excluded", False) for k in a]
    usable_b = [not getattr(k, "excluded", False) for k in b]
    pairs = match_arrays(descriptor_matrix(a), descriptor_matrix(b), ratio, allowed, usable_a, usable_b)
    return CorrespondenceSet(pairs)
