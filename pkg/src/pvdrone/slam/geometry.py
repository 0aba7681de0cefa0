"""Robust pose estimation and two-view triangulation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import CameraIntrinsics, DepthNonPositive, Pose, PvdError


class Degenerate(PvdError):
    pass


class Diverged(PvdError):
    pass


class DegenerateBaseline(PvdError):
    pass


class NegativeDepth(PvdError):
    pass


class ReprojectionTooLarge(PvdError):
    pass


MAX_BAD_STEPS = 5
REL_TOL = 1e-10     # relative cost change treated as roundoff
MIN_PNP_POINTS = 6


def huber_cost(e: np.ndarray, delta: float) -> np.ndarray:
    """Huber penalty of residual norms ``e`` (quadratic below ``delta``)."""
    return np.where(e <= delta, 0.5 * e * e, delta * (e - 0.5 * delta))


def huber_weight(e: np.ndarray, delta: float) -> np.ndarray:
    return np.where(e <= delta, 1.0, delta / np.maximum(e, 1e-300))


def projection_jacobian(Xc: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """d pi / d X_cam, shape (N, 2, 3)."""
    x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    J = np.zeros((len(Xc), 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * x / (z * z)
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * y / (z * z)
    return J


def project_points(Xc: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    return np.column_stack([K.fx * Xc[:, 0] / Xc[:, 2] + K.cx, K.fy * Xc[:, 1] / Xc[:, 2] + K.cy])


def reprojection_residuals(pose: Pose, X: np.ndarray, uv: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """``uv - pi(T X)``, shape (N, 2)."""
    Xc = pose.apply(X)
    if np.any(Xc[:, 2] <= 1e-9):
        raise DepthNonPositive("map point behind the camera")
    return uv - project_points(Xc, K)


def pose_jacobian(pose: Pose, X: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """d residual / d xi for the left perturbation ``exp(xi) T``, shape (N, 2, 6)."""
    Xc = pose.apply(X)
    Jp = projection_jacobian(Xc, K)
    x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    D = np.zeros((len(X), 3, 6))
    D[:, :, :3] = np.eye(3)
    # d(exp(xi) Xc) / d phi = -[Xc]x
    D[:, 0, 4], D[:, 0, 5] = z, -y
    D[:, 1, 3], D[:, 1, 5] = -z, x
    D[:, 2, 3], D[:, 2, 4] = y, -x
    return -Jp @ D


@dataclass
class PnPResult:
    pose: Pose
    inliers: np.ndarray      # bool per correspondence
    errors: np.ndarray       # final reprojection error per correspondence, px
    iterations: int
    costs: list              # robust cost after every accepted step


def solve_pnp(X, uv, K: CameraIntrinsics, init: Pose, eps_inlier: float = 2.0, huber_delta: float = 1.345,
              max_iters: int = 50, refine_inliers: bool = True) -> PnPResult:
    """Pose from 3D-2D correspondences by damped Gauss-Newton on se(3).

    Residuals are Huber-weighted. A step that raises the robust cost is
    retried with ten times more damping; five such rejections in a row
    raise ``Diverged``. With ``refine_inliers`` the solve is repeated on
    the correspondences below ``eps_inlier`` once the first pass settles,
    which removes the residual pull of gross outliers.
    """
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    if len(X) < MIN_PNP_POINTS:
        raise Degenerate(f"{len(X)} correspondences, need {MIN_PNP_POINTS}")
    pose, costs, it = _gauss_newton(X, uv, K, init, huber_delta, max_iters)
    err = np.linalg.norm(reprojection_residuals(pose, X, uv, K), axis=1)
    inl = err < eps_inlier
    if refine_inliers and MIN_PNP_POINTS <= inl.sum() < len(X):
        pose, more, it2 = _gauss_newton(X[inl], uv[inl], K, pose, huber_delta, max_iters)
        costs += more
        it += it2
        err = np.linalg.norm(reprojection_residuals(pose, X, uv, K), axis=1)
        inl = err < eps_inlier
    return PnPResult(pose, inl, err, it, costs)


def _robust_cost(pose, X, uv, K, delta):
    try:
        r = reprojection_residuals(pose, X, uv, K)
    except DepthNonPositive:
        return np.inf
    return float(huber_cost(np.linalg.norm(r, axis=1), delta).sum())


def _gauss_newton(X, uv, K, pose, delta, max_iters):
    cost = _robust_cost(pose, X, uv, K, delta)
    if not np.isfinite(cost):
        raise DepthNonPositive("map point behind the initial camera")
    lam = 1e-6
    bad = 0
    costs = [cost]
    it = 0
    for it in range(1, max_iters + 1):
        r = reprojection_residuals(pose, X, uv, K)
        w = huber_weight(np.linalg.norm(r, axis=1), delta)
        J = pose_jacobian(pose, X, K)
        Jw = (w[:, None, None] * J).reshape(-1, 6)
        H = Jw.T @ J.reshape(-1, 6)
        g = Jw.T @ r.reshape(-1)
        if it == 1 and np.linalg.cond(H) > 1e12:
            raise Degenerate("normal matrix is ill-conditioned")
        while True:
            step = np.linalg.solve(H + lam * np.diag(np.diag(H)), -g)
            if np.linalg.norm(step) < 1e-8:
                return pose, costs, it
            cand = pose.retract(step)
            new = _robust_cost(cand, X, uv, K, delta)
            if new <= cost:
                converged = cost - new <= REL_TOL * max(cost, 1.0)
                pose, cost = cand, new
                costs.append(cost)
                lam = max(lam / 10, 1e-12)
                bad = 0
                if converged:
                    return pose, costs, it
                break
            bad += 1
            lam *= 10
            if bad >= MAX_BAD_STEPS:
                # rises at roundoff level or a vanished gradient mean convergence
                if new - cost <= REL_TOL * max(cost, 1.0) or np.linalg.norm(g) <= 1e-9 * max(1.0, cost):
                    return pose, costs, it
                raise Diverged("robust cost rose on five consecutive damped steps")
    return pose, costs, it


TRI_OK, TRI_DEGENERATE, TRI_BEHIND, TRI_REPROJECTION = 0, 1, 2, 3


def triangulate_many(uv_a, pose_a: Pose, uv_b, pose_b: Pose, K: CameraIntrinsics, eps_inlier: float = 2.0,
                     min_angle_deg: float = 0.5):
    """Vectorised ``triangulate``: points (N, 3) and a status code per point."""
    uv_a = np.asarray(uv_a, dtype=float).reshape(-1, 2)
    uv_b = np.asarray(uv_b, dtype=float).reshape(-1, 2)
    n = len(uv_a)
    Kinv = np.linalg.inv(K.matrix)
    ha = np.column_stack([uv_a, np.ones(n)])
    hb = np.column_stack([uv_b, np.ones(n)])
    ra = ha @ Kinv.T @ pose_a.R
    rb = hb @ Kinv.T @ pose_b.R
    cosang = np.sum(ra * rb, axis=1) / (np.linalg.norm(ra, axis=1) * np.linalg.norm(rb, axis=1))
    status = np.zeros(n, dtype=int)
    status[np.degrees(np.arccos(np.clip(cosang, -1, 1))) <= min_angle_deg] = TRI_DEGENERATE
    if np.linalg.norm(pose_a.center - pose_b.center) < 1e-9:
        status[:] = TRI_DEGENERATE
    Pa = K.matrix @ np.column_stack([pose_a.R, pose_a.t])
    Pb = K.matrix @ np.column_stack([pose_b.R, pose_b.t])
    A = np.stack([uv_a[:, :1] * Pa[2] - Pa[0], uv_a[:, 1:] * Pa[2] - Pa[1],
                  uv_b[:, :1] * Pb[2] - Pb[0], uv_b[:, 1:] * Pb[2] - Pb[1]], axis=1)
    # row scaling keeps the SVD well conditioned for pixel coordinates
    A /= np.linalg.norm(A, axis=2, keepdims=True)
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[:, -1]
    far = np.abs(Xh[:, 3]) < 1e-12
    status[far & (status == TRI_OK)] = TRI_DEGENERATE
    X = Xh[:, :3] / np.where(far, 1.0, Xh[:, 3])[:, None]
    for pose, uv in ((pose_a, uv_a), (pose_b, uv_b)):
        Xc = pose.apply(X)
        behind = Xc[:, 2] <= 0
        status[behind & (status == TRI_OK)] = TRI_BEHIND
        z = np.where(behind, 1.0, Xc[:, 2])
        err = np.hypot(K.fx * Xc[:, 0] / z + K.cx - uv[:, 0], K.fy * Xc[:, 1] / z + K.cy - uv[:, 1])
        status[(err > eps_inlier) & (status == TRI_OK)] = TRI_REPROJECTION
    return X, status


def triangulate(uv_a, pose_a: Pose, uv_b, pose_b: Pose, K: CameraIntrinsics, eps_inlier: float = 2.0,
                min_angle_deg: float = 0.5) -> np.ndarray:
    """Linear (DLT) triangulation with angle, depth and reprojection checks."""
    X, status = triangulate_many(uv_a, pose_a, uv_b, pose_b, K, eps_inlier, min_angle_deg)
    if status[0] == TRI_DEGENERATE:
        raise DegenerateBaseline("rays are (nearly) parallel")
    if status[0] == TRI_BEHIND:
        raise NegativeDepth("triangulated point behind a camera")
    if status[0] == TRI_REPROJECTION:
        raise ReprojectionTooLarge("triangulated point does not reproject")
    return X[0]
