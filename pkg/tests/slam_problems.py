"""Synthetic PnP, bundle-adjustment and map problems with known answers."""
import numpy as np

from pvdrone.core import CameraIntrinsics, Pose, nadir_rotation, project, so3_exp
from pvdrone.slam.features import DESCRIPTOR_SIZE, Keypoint
from pvdrone.slam.map import WorldMap

K_HALF = CameraIntrinsics(400.0, 400.0, 239.5, 134.5, 480, 270)


def unit_vector(rng, n=3):
    v = rng.normal(size=n)
    return v / np.linalg.norm(v)


def perturb(pose: Pose, rng, degrees: float, metres: float) -> Pose:
    """Rotate by exactly ``degrees`` about a random axis and shift the centre by ``metres``."""
    R = so3_exp(unit_vector(rng) * np.radians(degrees)) @ pose.R
    return Pose.from_camera_center(R, pose.center + metres * unit_vector(rng))


def pnp_problem(rng, n=80, noise=0.0, outlier_frac=0.0, K=K_HALF):
    """A random camera looking at points 4-12 m ahead.

    Returns ``(pose, X, uv, outlier_mask, scene_scale)``; the scale is the
    median camera-to-point distance.
    """
    axis = unit_vector(rng)
    pose = Pose.from_matrix(so3_exp(axis * rng.uniform(0, np.pi)), rng.uniform(-5, 5, 3))
    Xc = np.column_stack([rng.uniform(-4, 4, n), rng.uniform(-2.5, 2.5, n), rng.uniform(4, 12, n)])
    X = pose.inverse().apply(Xc)
    uv = project(Xc, K) + rng.normal(0.0, noise, (n, 2)) if noise else project(Xc, K)
    out = np.zeros(n, dtype=bool)
    out[rng.choice(n, int(round(outlier_frac * n)), replace=False)] = True
    uv[out] = np.column_stack([rng.uniform(0, K.width - 1, out.sum()), rng.uniform(0, K.height - 1, out.sum())])
    return pose, X, uv, out, float(np.median(np.linalg.norm(Xc, axis=1)))


def _flat_descriptor():
    return np.full(DESCRIPTOR_SIZE, 1.0 / np.sqrt(DESCRIPTOR_SIZE))


def ba_problem(rng, n_kf=5, n_pts=200, noise=0.5, perturb_poses=True, K=K_HALF):
    """Nadir keyframes along x observing every point, with pixel noise ``noise``.

    The first keyframe keeps its true pose; the others and all points start
    perturbed. Returns ``(map, true poses, true points)``.
    """
    wmap = WorldMap(K)
    X = np.column_stack([rng.uniform(-8, 14, n_pts), rng.uniform(-6, 6, n_pts), rng.uniform(0, 1.5, n_pts)])
    poses = [Pose.from_camera_center(nadir_rotation(rng.uniform(-0.05, 0.05)),
                                     [0.6 * k, rng.normal(0, 0.1), 20 + rng.normal(0, 0.1)]) for k in range(n_kf)]
    for k, P in enumerate(poses):
        uv = project(P.apply(X), K)
        if noise:
            uv = uv + rng.normal(0, noise, uv.shape)
        kps = [Keypoint(u, _flat_descriptor()) for u in uv]
        init = P
        if k > 0 and perturb_poses:
            init = P.retract(np.r_[rng.normal(0, 0.05, 3), rng.normal(0, 0.002, 3)])
        wmap.add_keyframe(init, kps, [])
    for j in range(n_pts):
        start = X[j] + (rng.normal(0, 0.05, 3) if perturb_poses else 0.0)
        wmap.add_point(start, _flat_descriptor(), [(k, j) for k in range(n_kf)])
    return wmap, poses, X


def descriptor_map(rng, n_pts=600, n_kf=6, K=K_HALF):
    """A map whose points carry random unit descriptors, seen by nadir keyframes.

    Returns ``(map, keyframe poses, points, descriptors)``.
    """
    X = np.column_stack([rng.uniform(-10, 16, n_pts), rng.uniform(-7, 7, n_pts), rng.uniform(0, 1.5, n_pts)])
    D = rng.normal(size=(n_pts, DESCRIPTOR_SIZE))
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    wmap = WorldMap(K)
    poses = [Pose.from_camera_center(nadir_rotation(0.0), [1.2 * k, 0.0, 20.0]) for k in range(n_kf)]
    seen_by = {}
    for k, P in enumerate(poses):
        idx, uv = visible(P, X, K)
        kf = wmap.add_keyframe(P, [Keypoint(u, D[i]) for i, u in zip(idx, uv)], [], frame=k)
        for slot, i in enumerate(idx):
            seen_by.setdefault(int(i), []).append((kf.id, slot))
    for i in range(n_pts):
        obs = seen_by.get(i, [])
        if len(obs) >= 2:
            wmap.add_point(X[i], D[i], obs)
    return wmap, poses, X, D


def visible(pose: Pose, X, K=K_HALF, margin=5.0):
    Xc = pose.apply(X)
    front = Xc[:, 2] > 0.1
    uv = np.full((len(X), 2), -1e9)
    uv[front] = project(Xc[front], K)
    inside = front & (uv[:, 0] > margin) & (uv[:, 0] < K.width - 1 - margin) & \
        (uv[:, 1] > margin) & (uv[:, 1] < K.height - 1 - margin)
    idx = np.nonzero(inside)[0]
    return idx, uv[idx]
