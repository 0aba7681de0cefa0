"""Ray-cast renderer producing images with exact motion-field ground truth."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..core import BoundingBox2D, Category, Pose, pixel_rays
from ..flow.field import FlowField
from .scene import Car, SceneModel, TimeOutOfRange
from .texture import fractal_noise

GROUND = 0
# faces per car: -x, +x, -y, +y, bottom, roof
_FACES = 6


@dataclass
class Track:
    track_id: int
    uv: np.ndarray
    world: np.ndarray


@dataclass
class FrameTruth:
    image: np.ndarray
    gt_flow: FlowField
    gt_boxes: list
    gt_tracks: list
    pose: Pose
    time: float
    occluded: np.ndarray = field(repr=False, default=None)
    depth: np.ndarray = field(repr=False, default=None)
    surface: np.ndarray = field(repr=False, default=None)
    car_ids: list = field(default_factory=list)

    def truth_dict(self, index: int) -> dict:
        return {
            "frame": index,
            "time": self.time,
            "pose": self.pose.to_dict(),
            "gt_boxes": [dict(b.to_dict(), car_id=cid) for b, cid in zip(self.gt_boxes, self.car_ids)],
            "gt_tracks": [{"id": tr.track_id, "uv": tr.uv.tolist(), "world": tr.world.tolist()}
                          for tr in self.gt_tracks],
        }


def _pixel_grid(h: int, w: int) -> np.ndarray:
    v, u = np.mgrid[0:h, 0:w].astype(float)
    return np.stack([u, v], axis=-1)


def _car_frame(car: Car, t: float):
    c = car.center_at(t)
    cs, sn = math.cos(car.yaw), math.sin(car.yaw)
    R = np.array([[cs, sn, 0.0], [-sn, cs, 0.0], [0.0, 0.0, 1.0]])  # world -> car
    return R, np.array([c[0], c[1], 0.0])


def trace(scene: SceneModel, pose: Pose, t: float, uv: np.ndarray):
    """Nearest hit per ray: (depth, surface id, world point, car-local point)."""
    K = scene.intrinsics
    origin, d = pixel_rays(uv, K, pose)
    shape = uv.shape[:-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(d[..., 2] < 0, (0.0 - origin[2]) / d[..., 2], np.inf)
    surface = np.zeros(shape, dtype=np.int32)
    local = np.zeros(shape + (3,))

    for k, car in enumerate(scene.cars):
        if not car.present(t):
            continue
        R, c = _car_frame(car, t)
        o_l = R @ (origin - c)
        d_l = d @ R.T
        lo = np.array([-car.length / 2, -car.width / 2, 0.0])
        hi = np.array([car.length / 2, car.width / 2, car.height])
        safe = np.where(np.abs(d_l) < 1e-12, 1e-12, d_l)
        t1 = (lo - o_l) / safe
        t2 = (hi - o_l) / safe
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        t_near = tmin.max(axis=-1)
        t_far = tmax.min(axis=-1)
        axis = tmin.argmax(axis=-1)
        hit = (t_near <= t_far) & (t_near > 1e-6) & (t_near < depth)
        if not hit.any():
            continue
        # entering face: lower slab if the ray travels in +axis direction
        comp = np.take_along_axis(d_l, axis[..., None], axis=-1)[..., 0]
        face = 2 * axis + (comp < 0).astype(np.int32)
        depth = np.where(hit, t_near, depth)
        surface = np.where(hit, 1 + _FACES * k + face, surface)
        p_local = o_l + t_near[..., None] * d_l
        local = np.where(hit[..., None], p_local, local)

    world = origin + depth[..., None] * d
    return depth, surface, world, local


# coarsest cell (m), weight exponent, finest cell (px)
ROOF_OCTAVES = (2.0, 0.0, 5.0)
ROOF_CONTRAST = 0.8


def octaves(scene: SceneModel, coarsest: float, power: float = 0.5, finest_px: float = 5.0) -> tuple[tuple, tuple]:
    """Octave cells from ``coarsest`` down to about ``finest_px`` pixels on the ground.

    Truncating at a fixed pixel footprint band-limits the texture for the
    scene's resolution, so bilinear resampling stays accurate.
    """
    K = scene.intrinsics
    finest = finest_px * scene.params.altitude / K.fx
    cells = [coarsest]
    while cells[-1] / 2 >= finest * 0.999:
        cells.append(cells[-1] / 2)
    weights = [c ** power for c in cells]
    return tuple(cells), tuple(weights)


def shade(scene: SceneModel, surface: np.ndarray, world: np.ndarray, local: np.ndarray) -> np.ndarray:
    img = np.empty(surface.shape)
    g = surface == GROUND
    cells, weights = octaves(scene, 4.0)
    n = fractal_noise(world[..., 0][g], world[..., 1][g], scene.texture_seed, cells, weights)
    img[g] = 0.5 + 1.8 * (n - 0.5)
    roof_cells, roof_weights = octaves(scene, *ROOF_OCTAVES)
    for k, car in enumerate(scene.cars):
        base = 1 + _FACES * k
        roof = surface == base + 5
        if roof.any():
            n = fractal_noise(local[..., 0][roof], local[..., 1][roof], scene.texture_seed * 31 + 7 * car.id + 3,
                              cells=roof_cells, weights=roof_weights)
            img[roof] = car.shade + ROOF_CONTRAST * (n - 0.5)
        for f in range(4):
            m = surface == base + f
            if not m.any():
                continue
            a = local[..., 1][m] if f < 2 else local[..., 0][m]
            # walls are seen at grazing angles: vary along the wall only
            n = fractal_noise(a + 11.0 * f, 0.0, scene.texture_seed * 37 + 5 * car.id + f,
                              cells=(1.6, 0.8), weights=(0.5, 0.5))
            img[m] = 0.6 * car.shade + 0.6 * (n - 0.5) + 0.05 * local[..., 2][m]
    return np.clip(img, 0.0, 1.0)


def render_image(scene: SceneModel, t: float) -> np.ndarray:
    return render_view(scene, t)[0]


def render_view(scene: SceneModel, t: float):
    """``(image, gt_boxes, car_ids, pose)`` without the flow ground truth, which costs a second trace."""
    K = scene.intrinsics
    pose = scene.pose_at(t)
    depth, surface, world, local = trace(scene, pose, t, _pixel_grid(K.height, K.width))
    boxes, ids = _gt_boxes(scene, pose, t, surface)
    return shade(scene, surface, world, local), boxes, ids, pose


def _gt_boxes(scene: SceneModel, pose: Pose, t: float, surface: np.ndarray):
    K = scene.intrinsics
    boxes, ids = [], []
    for k, car in enumerate(scene.cars):
        if not car.present(t):
            continue
        cam = pose.apply(car.corners3d(t))
        if np.any(cam[:, 2] <= 0.1):
            continue
        uv = np.column_stack([K.fx * cam[:, 0] / cam[:, 2] + K.cx, K.fy * cam[:, 1] / cam[:, 2] + K.cy])
        full = BoundingBox2D(uv[:, 0].min(), uv[:, 1].min(), uv[:, 0].max(), uv[:, 1].max(),
                             scene.category_at(car, t))
        clipped = full.clipped(K.width, K.height)
        if clipped is None or clipped.area < 0.6 * full.area:
            continue
        seen = np.count_nonzero((surface > _FACES * k) & (surface <= _FACES * (k + 1)))
        if seen < 0.3 * full.area:
            continue
        boxes.append(clipped)
        ids.append(car.id)
    return boxes, ids


def landmarks(scene: SceneModel):
    """Fixed world landmarks: ground grid plus points on every car roof."""
    rng = np.random.default_rng(scene.seed + 9173)
    xs = np.arange(-16.0, scene.params.speed * scene.suspicion_times[-1] + 16.0, 1.0)
    ys = np.arange(-8.0, 8.01, 1.0)
    gx, gy = np.meshgrid(xs, ys)
    ground = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])
    ground[:, :2] += rng.uniform(-0.3, 0.3, size=(len(ground), 2))
    out = [(i, None, p) for i, p in enumerate(ground)]
    for car in scene.cars:
        for j in range(12):
            p = np.array([rng.uniform(-0.45, 0.45) * car.length, rng.uniform(-0.45, 0.45) * car.width, car.height])
            out.append((100000 + 1000 * car.id + j, car, p))
    return out


def _tracks(scene: SceneModel, pose: Pose, t: float, depth: np.ndarray):
    K = scene.intrinsics
    tracks = []
    for tid, car, p in landmarks(scene):
        if car is None:
            X = p
        else:
            if not car.present(t):
                continue
            R, c = _car_frame(car, t)
            X = R.T @ p + c
        xc = pose.apply(X)
        if xc[2] <= 0.1:
            continue
        uv = np.array([K.fx * xc[0] / xc[2] + K.cx, K.fy * xc[1] / xc[2] + K.cy])
        if not (0 <= uv[0] <= K.width - 1 and 0 <= uv[1] <= K.height - 1):
            continue
        iu, iv = int(round(uv[0])), int(round(uv[1]))
        if depth[iv, iu] < xc[2] - 0.05:
            continue
        tracks.append(Track(tid, uv, X))
    return tracks


def render_frame(scene: SceneModel, t: float) -> FrameTruth:
    """Render the frame at ``t`` with flow to the frame at ``t + frame_dt``.

    Flow is valid where the imaged surface point stays visible and the
    bilinear stencil at its target lies on the same surface face; pixels
    whose target is in-frame but fails that test are ``occluded``.
    """
    times = [w for w, _ in scene.trajectory]
    if t < times[0] - 1e-9 or t > times[-1] + 1e-9:
        raise TimeOutOfRange(f"t={t} outside trajectory span")
    K = scene.intrinsics
    dt = scene.frame_dt
    pose = scene.pose_at(t)
    pose2 = scene.pose_at(t + dt)
    uv = _pixel_grid(K.height, K.width)

    depth, surface, world, local = trace(scene, pose, t, uv)
    image = shade(scene, surface, world, local)

    moved = world.copy()
    for k, car in enumerate(scene.cars):
        if car.is_static or not car.present(t):
            continue
        m = (surface > _FACES * k) & (surface <= _FACES * (k + 1))
        moved[m, 0] += car.velocity[0] * dt
        moved[m, 1] += car.velocity[1] * dt
    cam2 = pose2.apply(moved)
    z2 = cam2[..., 2]
    ok = z2 > 1e-6
    zs = np.where(ok, z2, 1.0)
    u2 = K.fx * cam2[..., 0] / zs + K.cx
    v2 = K.fy * cam2[..., 1] / zs + K.cy
    du = np.where(ok, u2 - uv[..., 0], 0.0)
    dv = np.where(ok, v2 - uv[..., 1], 0.0)

    inside = ok & (u2 >= 0) & (u2 <= K.width - 1) & (v2 >= 0) & (v2 <= K.height - 1)
    _, surface2, _, _ = trace(scene, pose2, t + dt, uv)
    u0 = np.clip(np.floor(np.where(inside, u2, 0)).astype(int), 0, K.width - 1)
    v0 = np.clip(np.floor(np.where(inside, v2, 0)).astype(int), 0, K.height - 1)
    u1 = np.minimum(u0 + 1, K.width - 1)
    v1 = np.minimum(v0 + 1, K.height - 1)
    same = ((surface2[v0, u0] == surface) & (surface2[v0, u1] == surface)
            & (surface2[v1, u0] == surface) & (surface2[v1, u1] == surface))
    valid = inside & same
    occluded = inside & ~same
    flow = FlowField(np.where(inside, du, 0.0), np.where(inside, dv, 0.0), valid)

    boxes, ids = _gt_boxes(scene, pose, t, surface)
    return FrameTruth(image=image, gt_flow=flow, gt_boxes=boxes, gt_tracks=_tracks(scene, pose, t, depth),
                      pose=pose, time=t, occluded=occluded, depth=depth, surface=surface, car_ids=ids)
