"""Top-down renderings of a world map: a plain PPM raster and a matplotlib figure."""
from __future__ import annotations

import csv

import numpy as np

from ..core import BoxState
from ..imageio import write_rgb

COLORS = {
    "ground": (235, 235, 230),
    "spot": (150, 150, 150),
    "point": (90, 90, 90),
    "tagged": (230, 150, 20),
    "camera": (40, 90, 220),
    "candidate": (240, 200, 0),
    "confirmed": (220, 30, 30),
    "truth": (20, 160, 60),
}


class _Canvas:
    def __init__(self, lo, hi, px_per_m: float):
        self.lo = np.asarray(lo, dtype=float)
        self.s = px_per_m
        w, h = np.ceil((np.asarray(hi) - self.lo) * px_per_m).astype(int) + 1
        self.img = np.empty((h, w, 3), dtype=np.uint8)
        self.img[:] = COLORS["ground"]

    def px(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        col = (xy[:, 0] - self.lo[0]) * self.s
        row = self.img.shape[0] - 1 - (xy[:, 1] - self.lo[1]) * self.s   # north up
        return np.rint(np.column_stack([col, row])).astype(int)

    def dots(self, xy, color, r: int = 1) -> None:
        h, w = self.img.shape[:2]
        for c, rr in self.px(xy):
            self.img[max(rr - r, 0):min(rr + r + 1, h), max(c - r, 0):min(c + r + 1, w)] = color

    def polygon(self, xy, color, width: int = 1) -> None:
        P = self.px(xy)
        for a, b in zip(P, np.roll(P, -1, axis=0)):
            n = int(max(abs(b - a).max(), 1))
            pts = np.rint(a + np.outer(np.linspace(0, 1, n + 1), b - a)).astype(int)
            for c, rr in pts:
                self.img[max(rr - width + 1, 0):rr + width, max(c - width + 1, 0):c + width] = color


def _box_outline(box) -> np.ndarray:
    c, e, yaw = np.asarray(box["center"]), np.asarray(box["extents"]), float(box["yaw"])
    local = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]]) * e[:2] / 2
    cs, sn = np.cos(yaw), np.sin(yaw)
    return local @ np.array([[cs, sn], [-sn, cs]]) + c[:2]


def _extent(wmap, spots, truth) -> tuple[np.ndarray, np.ndarray]:
    xy = [kf.pose.center[:2] for kf in wmap.keyframes.values()]
    xy += [b.center[:2] for b in wmap.boxes3d.values()]
    xy += [np.asarray(v, dtype=float) for p in spots for v in p]
    xy += [np.asarray(t, dtype=float)[:2] for t in truth]
    if wmap.points:
        P = wmap.positions(wmap.point_ids())[:, :2]
        xy += list(np.percentile(P, [1, 99], axis=0))
    xy = np.array(xy).reshape(-1, 2)
    if not len(xy):
        return np.array([-10.0, -10.0]), np.array([10.0, 10.0])
    return xy.min(axis=0) - 3.0, xy.max(axis=0) + 3.0


def render_topdown(wmap, spots=(), truth=(), px_per_m: float = 20.0) -> np.ndarray:
    """RGB raster, north up: spots, map points, camera track, candidate and confirmed boxes.

    ``truth`` are optional true IPC centres, drawn as green crosses.
    """
    lo, hi = _extent(wmap, spots, truth)
    cv = _Canvas(lo, hi, px_per_m)
    for p in spots:
        cv.polygon(p, COLORS["spot"])
    if wmap.points:
        ids = wmap.point_ids()
        P = wmap.positions(ids)[:, :2]
        tagged = wmap.tags(ids) >= 0
        cv.dots(P[~tagged], COLORS["point"], 0)
        cv.dots(P[tagged], COLORS["tagged"], 0)
    for _, kf in sorted(wmap.keyframes.items()):
        cv.dots(kf.pose.center[:2], COLORS["camera"], 2)
    for _, b in sorted(wmap.boxes3d.items()):
        color = COLORS["confirmed"] if b.state == BoxState.CONFIRMED_IPC else COLORS["candidate"]
        cv.polygon(_box_outline(b.to_dict()), color, 2)
    for t in truth:
        c = np.asarray(t, dtype=float)[:2]
        for d in np.linspace(-0.5, 0.5, 11):
            cv.dots([c + (d, d), c + (d, -d)], COLORS["truth"], 0)
    return cv.img


def write_topdown_ppm(path, wmap, spots=(), truth=(), px_per_m: float = 20.0) -> None:
    write_rgb(path, render_topdown(wmap, spots, truth, px_per_m))


def plot_topdown(path, wmap, spots=(), truth=(), title: str = "") -> None:
    """Same content as ``render_topdown`` as a matplotlib figure with a legend."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rgb = {k: np.array(v) / 255.0 for k, v in COLORS.items()}
    fig, ax = plt.subplots(figsize=(10, 6))
    for p in spots:
        q = np.array(p + [p[0]], dtype=float)
        ax.plot(q[:, 0], q[:, 1], color=rgb["spot"], lw=0.8)
    if wmap.points:
        ids = wmap.point_ids()
        P = wmap.positions(ids)
        tagged = wmap.tags(ids) >= 0
        ax.scatter(P[~tagged, 0], P[~tagged, 1], s=1, color=rgb["point"], label="map points")
        ax.scatter(P[tagged, 0], P[tagged, 1], s=3, color=rgb["tagged"], label="car points")
    C = np.array([kf.pose.center for _, kf in sorted(wmap.keyframes.items())]).reshape(-1, 3)
    ax.plot(C[:, 0], C[:, 1], "o-", ms=3, color=rgb["camera"], label="keyframes")
    for state, key, label in ((BoxState.CANDIDATE, "candidate", "candidate"),
                              (BoxState.CONFIRMED_IPC, "confirmed", "confirmed IPC")):
        boxes = [b for _, b in sorted(wmap.boxes3d.items()) if b.state == state]
        for i, b in enumerate(boxes):
            q = _box_outline(b.to_dict())
            q = np.vstack([q, q[:1]])
            ax.plot(q[:, 0], q[:, 1], color=rgb[key], lw=2, label=label if i == 0 else None)
    if len(truth):
        T = np.array([np.asarray(t, dtype=float)[:2] for t in truth])
        ax.scatter(T[:, 0], T[:, 1], marker="x", s=60, color=rgb["truth"], label="true IPC")
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    if title:
        ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_boxes_csv(path, wmap, matched_ids=()) -> None:
    """One row per 3D box; ``matched`` marks boxes paired with a true IPC."""
    matched = set(matched_ids)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "state", "category", "x", "y", "z", "length", "width", "height", "yaw",
                    "first_seen", "last_seen", "matched"])
        for _, b in sorted(wmap.boxes3d.items()):
            w.writerow([b.id, b.state.value, b.category.value, *(f"{v:.4f}" for v in b.center),
                        *(f"{v:.4f}" for v in b.extents), f"{b.yaw:.4f}", b.first_seen, b.last_seen,
                        int(b.id in matched)])
