"""Local bundle adjustment over a keyframe window."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import DepthNonPositive
from .geometry import REL_TOL, Diverged, MAX_BAD_STEPS, huber_cost, huber_weight, pose_jacobian, projection_jacobian
from .map import SlamConfig, WorldMap


@dataclass
class BundleResult:
    costs: list = field(default_factory=list)   # robust cost before and after every accepted step
    iterations: int = 0
    rms_before: float = 0.0
    rms_after: float = 0.0


class _Problem:
    """Flattened observations of the points seen by the window."""

    def __init__(self, wmap: WorldMap, window, fixed):
        self.wmap = wmap
        window = sorted(set(window))
        self.free = [k for k in window if k not in fixed]
        pose_index = {k: i for i, k in enumerate(self.free)}
        pids = sorted({pid for k in window for pid in wmap.keyframes[k].point_of.values()})
        self.pids = pids
        point_index = {p: i for i, p in enumerate(pids)}
        kf_ids, pt, uv, pose_col = [], [], [], []
        for p in pids:
            for kf_id, idx in wmap.points[p].observations:
                kf_ids.append(kf_id)
                pt.append(point_index[p])
                uv.append(wmap.keyframes[kf_id].keypoints[idx].position)
                pose_col.append(pose_index.get(kf_id, -1))
        self.kf_ids = np.array(kf_ids, dtype=int)
        self.pt = np.array(pt, dtype=int)
        self.uv = np.array(uv, dtype=float).reshape(-1, 2)
        self.pose_col = np.array(pose_col, dtype=int)
        self.poses = {k: wmap.keyframes[k].pose for k in set(kf_ids)}
        self.X = wmap.positions(pids)
        if len(set(zip(kf_ids, pt))) != len(kf_ids):
            raise ValueError("a keyframe observes the same map point twice")
        # pairs of free-pose observations sharing a point, for the reduced system
        o1, o2 = [], []
        by_point: dict[int, list] = {}
        for o in np.nonzero(self.pose_col >= 0)[0]:
            by_point.setdefault(int(self.pt[o]), []).append(int(o))
        for obs in by_point.values():
            for a in obs:
                for b in obs:
                    o1.append(a)
                    o2.append(b)
        self.pairs = (np.array(o1, dtype=int), np.array(o2, dtype=int))

    def residuals(self, poses, X):
        K = self.wmap.intrinsics
        r = np.empty_like(self.uv)
        Xc_all = np.empty((len(self.uv), 3))
        for k in np.unique(self.kf_ids):
            sel = self.kf_ids == k
            Xc_all[sel] = poses[k].apply(X[self.pt[sel]])
        if np.any(Xc_all[:, 2] <= 1e-9):
            raise DepthNonPositive("map point behind a keyframe")
        r[:, 0] = self.uv[:, 0] - (K.fx * Xc_all[:, 0] / Xc_all[:, 2] + K.cx)
        r[:, 1] = self.uv[:, 1] - (K.fy * Xc_all[:, 1] / Xc_all[:, 2] + K.cy)
        return r, Xc_all

    def cost(self, poses, X, delta):
        try:
            r, _ = self.residuals(poses, X)
        except DepthNonPositive:
            return np.inf
        return float(huber_cost(np.linalg.norm(r, axis=1), delta).sum())


def _group_sum(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """Sum ``values`` (N, ...) into ``n`` bins by ``index``."""
    flat = values.reshape(len(values), -1)
    out = np.empty((n, flat.shape[1]))
    for c in range(flat.shape[1]):
        out[:, c] = np.bincount(index, weights=flat[:, c], minlength=n)
    return out.reshape((n,) + values.shape[1:])


def reprojection_rms(wmap: WorldMap, window=None) -> float:
    """Root mean square reprojection error (per coordinate) of the window's points."""
    window = sorted(wmap.keyframes) if window is None else window
    prob = _Problem(wmap, window, set())
    if len(prob.uv) == 0:
        return 0.0
    r, _ = prob.residuals(prob.poses, prob.X)
    return float(np.sqrt(np.mean(r ** 2)))


def local_bundle_adjust(wmap: WorldMap, window, cfg: SlamConfig | None = None, fixed=None,
                        max_iters: int | None = None) -> BundleResult:
    """Damped Gauss-Newton over the window's poses and every point they observe.

    Observations from keyframes outside the window constrain the points but
    their poses stay put, as do the ``fixed`` keyframes (default: the first
    keyframe of the map). Point blocks are eliminated with the Schur
    complement so only the 6n x 6n pose system is solved densely.
    """
    cfg = cfg or SlamConfig()
    window = list(window)
    if not window:
        raise ValueError("empty bundle adjustment window")
    fixed = {min(wmap.keyframes)} if fixed is None else set(fixed)
    prob = _Problem(wmap, window, fixed)
    res = BundleResult()
    if len(prob.uv) == 0:
        return res
    delta = cfg.huber_delta
    n_pose, n_pt = len(prob.free), len(prob.pids)
    poses, X = dict(prob.poses), prob.X.copy()
    cost = prob.cost(poses, X, delta)
    if not np.isfinite(cost):
        raise DepthNonPositive("map point behind a keyframe before adjustment")
    r0, _ = prob.residuals(poses, X)
    res.rms_before = float(np.sqrt(np.mean(r0 ** 2)))
    res.costs.append(cost)
    lam = 1e-4
    bad = 0
    for it in range(1, (max_iters or cfg.ba_iters) + 1):
        res.iterations = it
        r, Xc = prob.residuals(poses, X)
        w = huber_weight(np.linalg.norm(r, axis=1), delta)
        Jproj = projection_jacobian(Xc, wmap.intrinsics)
        # point Jacobian: d r / d X = -Jproj R
        kf_list = sorted(poses)
        R_of = np.stack([poses[k].R for k in kf_list])
        Jx = -Jproj @ R_of[np.searchsorted(kf_list, prob.kf_ids)]
        wJx = w[:, None, None] * Jx
        V = _group_sum(prob.pt, np.matmul(wJx.transpose(0, 2, 1), Jx), n_pt)
        bx = _group_sum(prob.pt, np.matmul(wJx.transpose(0, 2, 1), r[:, :, None])[..., 0], n_pt)
        has_pose = prob.pose_col >= 0
        U = np.zeros((n_pose, 6, 6))
        bp = np.zeros((n_pose, 6))
        Wobs = np.zeros((len(r), 6, 3))
        if has_pose.any():
            Jp = np.zeros((len(r), 2, 6))
            for k in prob.free:
                sel = prob.kf_ids == k
                Jp[sel] = pose_jacobian(poses[k], X[prob.pt[sel]], wmap.intrinsics)
            wJpT = (w[:, None, None] * Jp).transpose(0, 2, 1)
            U = _group_sum(prob.pose_col[has_pose], np.matmul(wJpT, Jp)[has_pose], n_pose)
            bp = _group_sum(prob.pose_col[has_pose], np.matmul(wJpT, r[:, :, None])[has_pose, :, 0], n_pose)
            Wobs = np.matmul(wJpT, Jx)
            Wobs[~has_pose] = 0.0
        grad = np.sqrt(np.sum(bx ** 2) + np.sum(bp ** 2))
        while True:
            Vinv = np.linalg.inv(V + lam * (V * np.eye(3)) + 1e-12 * np.eye(3))
            rhs_x = -bx
            dp = np.zeros((n_pose, 6))
            if n_pose:
                o1, o2 = prob.pairs
                WV = np.matmul(Wobs, Vinv[prob.pt])
                pair_key = prob.pose_col[o1] * n_pose + prob.pose_col[o2]
                S = -_group_sum(pair_key, np.matmul(WV[o1], Wobs[o2].transpose(0, 2, 1)), n_pose * n_pose)
                S = S.reshape(n_pose, n_pose, 6, 6)
                idx = np.arange(n_pose)
                S[idx, idx] += U + lam * U * np.eye(6)
                rhs = -bp + _group_sum(prob.pose_col[has_pose],
                                       np.matmul(WV, bx[prob.pt][:, :, None])[has_pose, :, 0], n_pose)
                S = S.transpose(0, 2, 1, 3).reshape(6 * n_pose, 6 * n_pose)
                dp = np.linalg.solve(S, rhs.reshape(-1)).reshape(n_pose, 6)
                # back-substitution: V dx = -bx - sum_a W_ap^T dp_a
                dp_obs = np.where(has_pose[:, None], dp[np.maximum(prob.pose_col, 0)], 0.0)
                rhs_x = -bx - _group_sum(prob.pt, np.matmul(Wobs.transpose(0, 2, 1), dp_obs[:, :, None])[..., 0], n_pt)
            dx = np.matmul(Vinv, rhs_x[:, :, None])[..., 0]
            step = np.sqrt(np.sum(dp ** 2) + np.sum(dx ** 2))
            if step < 1e-10:
                _commit(wmap, prob, poses, X, res)
                return res
            cand_poses = dict(poses)
            for a, k in enumerate(prob.free):
                cand_poses[k] = poses[k].retract(dp[a])
            cand_X = X + dx
            new = prob.cost(cand_poses, cand_X, delta)
            if new <= cost:
                converged = cost - new <= REL_TOL * max(cost, 1.0)
                poses, X, cost = cand_poses, cand_X, new
                res.costs.append(cost)
                lam = max(lam / 10, 1e-10)
                bad = 0
                if converged:
                    _commit(wmap, prob, poses, X, res)
                    return res
                break
            bad += 1
            lam *= 10
            if bad >= MAX_BAD_STEPS:
                # rises at roundoff level or a vanished gradient mean convergence
                if new - cost <= REL_TOL * max(cost, 1.0) or grad <= 1e-8 * max(1.0, cost):
                    _commit(wmap, prob, poses, X, res)
                    return res
                raise Diverged("bundle adjustment cost rose on five consecutive damped steps")
    _commit(wmap, prob, poses, X, res)
    return res


def _commit(wmap: WorldMap, prob: _Problem, poses, X, res: BundleResult) -> None:
    for k in prob.free:
        wmap.keyframes[k].pose = poses[k]
    for i, p in enumerate(prob.pids):
        wmap.points[p].position = X[i]
    r, _ = prob.residuals(poses, X)
    res.rms_after = float(np.sqrt(np.mean(r ** 2)))
