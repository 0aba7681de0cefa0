"""Flow-gated car classification into moving, legally parked and suspect."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from shapely.geometry import Polygon

from ..core import BoundingBox2D, CameraIntrinsics, Category, Pose, PvdError, unproject_to_plane
from ..flow.field import FlowField
from ..synthworld.scene import spot_overlap

BASE_WIDTH = 960


class InsufficientBackground(PvdError):
    pass


class EmptyBox(PvdError):
    pass


class DomainError(PvdError, ValueError):
    pass


@dataclass
class DetectConfig:
    tau_mc: float = 3.0            # px at BASE_WIDTH, scaled with image width
    tau_spot: float = 0.7
    gamma: float = 2.0
    alpha: float = 0.25
    proposal_mode: str = "oracle_jitter"
    jitter: float = 0.1            # oracle boxes: total size change per axis
    footprint_height: float = 0.75  # m, plane the box is unprojected onto
    mc_margin_scale: float = 1.0   # px at BASE_WIDTH
    spot_margin_scale: float = 0.1
    min_background: float = 0.1

    def __post_init__(self):
        if self.tau_mc <= 0:
            raise ValueError("tau_mc must be positive")
        if not 0 < self.tau_spot <= 1:
            raise ValueError("tau_spot must lie in (0, 1]")
        if self.gamma < 0 or not 0 < self.alpha <= 1:
            raise ValueError("focal loss needs gamma >= 0 and alpha in (0, 1]")
        if self.proposal_mode not in ("oracle_jitter", "blob"):
            raise ValueError(f"unknown proposal mode {self.proposal_mode!r}")
        if not 0 <= self.jitter <= 0.1:
            raise ValueError("jitter must lie in [0, 0.1]")

    def tau_mc_px(self, width: int) -> float:
        return self.tau_mc * width / BASE_WIDTH

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class FlowStats:
    mean_mag: float
    median_mag: float
    std_mag: float
    residual_mag: float
    coverage: float
    residual: tuple = (0.0, 0.0)


# ---------------------------------------------------------------- proposals

def propose_boxes(image, truth_boxes=None, cfg: DetectConfig | None = None, rng=None) -> list[BoundingBox2D]:
    """Uncategorised car proposals for one frame.

    ``oracle_jitter`` moves every edge of each true box by at most
    ``jitter / 2`` of the box size (so each side changes by at most
    ``jitter``) and scores it ``1 - jitter_drawn``, the mean relative edge
    shift. ``blob`` returns connected components of strong image gradient.
    """
    cfg = cfg or DetectConfig()
    if cfg.proposal_mode == "blob":
        return blob_proposals(image)
    if not truth_boxes:
        return []
    rng = rng if rng is not None else np.random.default_rng(0)
    h, w = np.asarray(image).shape[:2]
    out = []
    for b in truth_boxes:
        e = rng.uniform(-cfg.jitter / 2, cfg.jitter / 2, size=4) if cfg.jitter > 0 else np.zeros(4)
        x0 = b.x_min + e[0] * b.width
        x1 = b.x_max + e[1] * b.width
        y0 = b.y_min + e[2] * b.height
        y1 = b.y_max + e[3] * b.height
        box = BoundingBox2D(x0, y0, x1, y1, score=float(1.0 - np.abs(e).mean())).clipped(w, h)
        if box is not None:
            out.append(box)
    return out


def blob_proposals(image, grad_percentile: float = 90.0, min_area: int = 30) -> list[BoundingBox2D]:
    """Connected components of the thresholded, closed gradient magnitude."""
    img = np.asarray(image, dtype=float)
    gy, gx = np.gradient(ndimage.gaussian_filter(img, 0.7))
    mag = np.hypot(gx, gy)
    mask = mag > max(np.percentile(mag, grad_percentile), 0.25 * mag.max())
    mask = ndimage.binary_fill_holes(ndimage.binary_closing(mask, iterations=2))
    mask = ndimage.binary_opening(mask, iterations=1)
    labels, n = ndimage.label(mask)
    out = []
    for sl in ndimage.find_objects(labels):
        ys, xs = sl
        if (ys.stop - ys.start) * (xs.stop - xs.start) < min_area:
            continue
        out.append(BoundingBox2D(xs.start - 0.5, ys.start - 0.5, xs.stop - 0.5, ys.stop - 0.5, score=0.5))
    return out


# ---------------------------------------------------------------- flow statistics

def _box_mask(shape, box: BoundingBox2D) -> np.ndarray:
    v, u = np.mgrid[0:shape[0], 0:shape[1]]
    return box.contains(u, v)


def ego_flow_estimate(F: FlowField, exclude=(), min_fraction: float = 0.1) -> np.ndarray:
    """Componentwise median of valid flow outside every ``exclude`` box."""
    keep = F.valid.copy()
    for b in exclude:
        keep &= ~_box_mask(F.shape, b)
    if keep.sum() < min_fraction * keep.size:
        raise InsufficientBackground(f"only {keep.mean():.1%} of pixels are background")
    return np.array([np.median(F.du[keep]), np.median(F.dv[keep])])


def flow_stats(F: FlowField, box: BoundingBox2D, ego) -> FlowStats:
    inside = _box_mask(F.shape, box)
    n_in = int(inside.sum())
    sel = inside & F.valid
    if not sel.any():
        raise EmptyBox(f"no valid flow inside {box.as_list()}")
    mag = np.hypot(F.du[sel], F.dv[sel])
    res = np.array([np.median(F.du[sel]), np.median(F.dv[sel])]) - np.asarray(ego, dtype=float)
    return FlowStats(
        mean_mag=float(mag.mean()),
        median_mag=float(np.median(mag)),
        std_mag=float(mag.std()),
        residual_mag=float(np.hypot(*res)),
        coverage=float(sel.sum() / max(n_in, 1)),
        residual=(float(res[0]), float(res[1])),
    )


# ---------------------------------------------------------------- classification

def box_footprint(box: BoundingBox2D, K: CameraIntrinsics, pose: Pose, height: float) -> Polygon:
    """Ground-plane polygon under a box: its corners unprojected at ``height``.

    Looking down, a car's box spans its roof and the walls facing the
    camera, so mid-height is where the box outline best matches the
    footprint.
    """
    uv = np.array([[box.x_min, box.y_min], [box.x_max, box.y_min],
                   [box.x_max, box.y_max], [box.x_min, box.y_max]])
    X = unproject_to_plane(uv, K, pose, height)
    return Polygon(X[:, :2])


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


@dataclass(frozen=True)
class Decision:
    category: Category
    score: float
    overlap: float


def classify_box(box: BoundingBox2D, stats: FlowStats, spots, cfg: DetectConfig, K: CameraIntrinsics,
                 pose: Pose) -> Decision:
    """MC above the residual threshold, else LPC or IPC candidate by spot overlap.

    The score is the proposal score times a sigmoid of the signed distance
    to whichever threshold decided the label, so boxes close to a decision
    boundary come out less confident.
    """
    tau = cfg.tau_mc_px(K.width)
    scale = cfg.mc_margin_scale * K.width / BASE_WIDTH
    mc_margin = (stats.residual_mag - tau) / scale
    if mc_margin > 0:
        return Decision(Category.MC, box.score * _sigmoid(mc_margin), float("nan"))
    fp = box_footprint(box, K, pose, cfg.footprint_height)
    overlap = spot_overlap(fp, spots)
    spot_margin = abs(overlap - cfg.tau_spot) / cfg.spot_margin_scale
    category = Category.LPC if overlap >= cfg.tau_spot else Category.IPC_CANDIDATE
    return Decision(category, box.score * _sigmoid(min(-mc_margin, spot_margin)), overlap)


def classify_frame(F: FlowField, proposals, spots, cfg: DetectConfig, K: CameraIntrinsics,
                   pose: Pose) -> list[BoundingBox2D]:
    """Label every proposal; boxes without valid flow keep the static default."""
    ego = ego_flow_estimate(F, proposals, cfg.min_background)
    out = []
    for b in proposals:
        try:
            stats = flow_stats(F, b, ego)
        except EmptyBox:
            stats = FlowStats(0.0, 0.0, 0.0, 0.0, 0.0)
        d = classify_box(b, stats, spots, cfg, K, pose)
        out.append(b.with_category(d.category, d.score))
    return out


# ---------------------------------------------------------------- focal loss

def focal_loss(p, gamma: float = 2.0, alpha: float = 0.25):
    """``-alpha (1 - p)^gamma ln p`` for the probability of the true class."""
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0) or np.any(p > 1):
        raise DomainError("probability must lie in (0, 1]")
    out = -alpha * (1.0 - p) ** gamma * np.log(p)
    return float(out) if out.ndim == 0 else out
