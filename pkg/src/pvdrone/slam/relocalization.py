"""Place recognition by descriptor voting and RANSAC pose recovery."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import DepthNonPositive, Pose, PvdError
from .features import descriptor_matrix, match_arrays
from .geometry import MIN_PNP_POINTS, Degenerate, Diverged, reprojection_residuals, solve_pnp
from .map import SlamConfig, WorldMap


class RelocalizationFailed(PvdError):
    pass


@dataclass
class Relocalization:
    pose: Pose
    inliers: np.ndarray        # (M, 2) pairs: keypoint index, map point id
    keyframe: int              # the voted keyframe the model was seeded from
    votes: dict


def keyframe_votes(keypoints, wmap: WorldMap, cfg: SlamConfig) -> dict[int, np.ndarray]:
    """Descriptor matches of the query against each keyframe's map points.

    Returns keyframe id -> (M, 2) array of (keypoint index, map point id).
    """
    usable = np.array([not k.excluded for k in keypoints], dtype=bool)
    Q = descriptor_matrix(keypoints)
    out = {}
    for kf_id, kf in sorted(wmap.keyframes.items()):
        pids = sorted(kf.point_of.values())
        if not pids or not len(Q):
            out[kf_id] = np.zeros((0, 2), dtype=int)
            continue
        pairs = match_arrays(Q, wmap.descriptors(pids), cfg.ratio_test, usable_a=usable)
        out[kf_id] = np.column_stack([pairs[:, 0], np.asarray(pids)[pairs[:, 1]]]) if len(pairs) else \
            np.zeros((0, 2), dtype=int)
    return out


def _errors(pose: Pose, X, uv, K) -> np.ndarray:
    try:
        return np.linalg.norm(reprojection_residuals(pose, X, uv, K), axis=1)
    except DepthNonPositive:
        Xc = pose.apply(X)
        err = np.full(len(X), np.inf)
        ok = Xc[:, 2] > 1e-9
        if ok.any():
            err[ok] = np.linalg.norm(reprojection_residuals(pose, X[ok], uv[ok], K), axis=1)
        return err


def ransac_pnp(X, uv, K, init: Pose, cfg: SlamConfig, rng) -> tuple[Pose, np.ndarray]:
    """Six-point hypotheses refined from ``init``; consensus below ``eps_inlier``.

    The best hypothesis is re-solved on its consensus set. Returns the pose
    and the inlier mask.
    """
    n = len(X)
    if n < MIN_PNP_POINTS:
        raise RelocalizationFailed(f"{n} correspondences, need {MIN_PNP_POINTS}")
    best_pose, best_inl = None, np.zeros(n, dtype=bool)
    for _ in range(cfg.ransac_iters):
        sample = rng.choice(n, MIN_PNP_POINTS, replace=False)
        try:
            hyp = solve_pnp(X[sample], uv[sample], K, init, cfg.eps_inlier, cfg.huber_delta, 20,
                            refine_inliers=False).pose
        except (Degenerate, Diverged, DepthNonPositive):
            continue
        inl = _errors(hyp, X, uv, K) < cfg.eps_inlier
        if inl.sum() > best_inl.sum():
            best_pose, best_inl = hyp, inl
            if inl.mean() > 0.9:
                break
    if best_pose is None or best_inl.sum() < MIN_PNP_POINTS:
        raise RelocalizationFailed("no hypothesis gathered a consensus")
    for _ in range(3):
        try:
            fit = solve_pnp(X[best_inl], uv[best_inl], K, best_pose, cfg.eps_inlier, cfg.huber_delta,
                            cfg.max_gn_iters)
        except (Degenerate, Diverged, DepthNonPositive):
            break
        inl = _errors(fit.pose, X, uv, K) < cfg.eps_inlier
        if inl.sum() < best_inl.sum():
            break
        grew = inl.sum() > best_inl.sum()
        best_pose, best_inl = fit.pose, inl
        if not grew:
            break
    return best_pose, best_inl


def relocalize(keypoints, wmap: WorldMap, cfg: SlamConfig | None = None, rng=None) -> Relocalization:
    """Pose of a query frame against the map, seeded from the best-voted keyframes.

    Candidates are tried in order of vote count (ties by keyframe id) and
    the first whose model reaches ``min_reloc_inliers`` wins.
    """
    cfg = cfg or SlamConfig()
    if not wmap.keyframes or not wmap.points:
        raise RelocalizationFailed("empty map")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    votes = keyframe_votes(keypoints, wmap, cfg)
    ranked = sorted(votes, key=lambda k: (-len(votes[k]), k))[:cfg.reloc_candidates]
    K = wmap.intrinsics
    uv_all = np.array([k.position for k in keypoints]).reshape(-1, 2)
    best = None
    for kf_id in ranked:
        pairs = votes[kf_id]
        if len(pairs) < cfg.min_reloc_inliers:
            break
        X = wmap.positions(pairs[:, 1])
        uv = uv_all[pairs[:, 0]]
        try:
            pose, inl = ransac_pnp(X, uv, K, wmap.keyframes[kf_id].pose, cfg, rng)
        except RelocalizationFailed:
            continue
        if inl.sum() >= cfg.min_reloc_inliers:
            best = Relocalization(pose, pairs[inl], kf_id, {k: len(v) for k, v in votes.items()})
            break
    if best is None:
        raise RelocalizationFailed(f"no keyframe model reached {cfg.min_reloc_inliers} inliers")
    return best
