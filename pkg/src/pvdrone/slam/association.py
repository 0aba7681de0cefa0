"""2D/3D box association by tagged inlier counts, and IPC re-identification."""
from __future__ import annotations

import numpy as np

from ..core import BoxState, Category


def association_counts(uv, tags, boxes2d, box_ids) -> np.ndarray:
    """``K[i, j]``: inliers tagged with 3D box ``box_ids[i]`` lying in 2D box ``j``."""
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    tags = np.asarray(tags, dtype=int).reshape(-1)
    K = np.zeros((len(box_ids), len(boxes2d)), dtype=int)
    for j, b in enumerate(boxes2d):
        inside = b.contains(uv[:, 0], uv[:, 1])
        for i, bid in enumerate(box_ids):
            K[i, j] = int(np.count_nonzero(inside & (tags == bid)))
    return K


def associate_boxes(uv, tags, boxes2d, box_ids, delta_obj: int = 8) -> list[tuple[int, int]]:
    """Pairs ``(3D id, 2D index)`` with strictly more than ``delta_obj`` shared inliers.

    ``uv`` are the image positions of the inlier correspondences and
    ``tags`` the 3D box id of their map points (-1 when untagged). Each 2D
    box goes to the 3D box with the largest count; ties go to the smaller id.
    """
    box_ids = [int(b) for b in box_ids]
    if not box_ids or not len(boxes2d):
        return []
    K = association_counts(uv, tags, boxes2d, box_ids)
    order = np.argsort(box_ids, kind="stable")
    out = []
    for j in range(len(boxes2d)):
        best, best_n = None, delta_obj
        for i in order:
            if K[i, j] > best_n:
                best, best_n = box_ids[i], K[i, j]
        if best is not None:
            out.append((best, j))
    return out


def reidentify(wmap, associations, n_confirm: int = 2):
    """Confirm candidates associated in at least ``n_confirm`` distinct frames.

    ``associations`` is a sequence of ``(frame, [(3D id, 2D index), ...])``.
    Candidates never associated stay candidates (the car left).
    """
    frames: dict[int, set] = {}
    for frame, pairs in associations:
        for bid, _ in pairs:
            frames.setdefault(int(bid), set()).add(int(frame))
    for bid, seen in sorted(frames.items()):
        box = wmap.boxes3d.get(bid)
        if box is None or box.state != BoxState.CANDIDATE:
            continue
        if len(seen) >= n_confirm:
            box.state = BoxState.CONFIRMED_IPC
            box.category = Category.IPC
            box.last_seen = max(box.last_seen, max(seen))
    return wmap
