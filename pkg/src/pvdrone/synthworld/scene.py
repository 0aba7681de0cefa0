"""Scene model and seeded generator for top-down drone sequences."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from shapely.geometry import Polygon
from shapely.ops import unary_union

from ..core import CameraIntrinsics, Category, Pose, PvdError, nadir_rotation, quat_normalize

SCHEMA_VERSION = 1


class InfeasiblePlacement(PvdError):
    pass


class TimeOutOfRange(PvdError):
    pass


@dataclass
class Car:
    """Cuboid vehicle; ``center`` is the footprint centre at ``ref_time``."""

    id: int
    category: Category
    center: tuple
    length: float
    width: float
    height: float
    yaw: float
    velocity: tuple = (0.0, 0.0)
    ref_time: float = 0.0
    appear_time: float | None = None
    depart_time: float | None = None
    shade: float = 0.5

    def __post_init__(self):
        self.category = Category(self.category)
        self.center = tuple(float(v) for v in self.center)
        self.velocity = tuple(float(v) for v in self.velocity)
        if self.length <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("degenerate car footprint")

    @property
    def is_static(self) -> bool:
        return self.velocity == (0.0, 0.0)

    def present(self, t: float) -> bool:
        if self.appear_time is not None and t < self.appear_time:
            return False
        if self.depart_time is not None and t >= self.depart_time:
            return False
        return True

    def center_at(self, t: float) -> np.ndarray:
        return np.array(self.center) + np.array(self.velocity) * (t - self.ref_time)

    def footprint(self, t: float | None = None) -> np.ndarray:
        """Footprint corners (4, 2) in world x, y."""
        c = self.center_at(self.ref_time if t is None else t)
        hl, hw = self.length / 2, self.width / 2
        local = np.array([[-hl, -hw], [hl, -hw], [hl, hw], [-hl, hw]])
        cs, sn = math.cos(self.yaw), math.sin(self.yaw)
        R = np.array([[cs, -sn], [sn, cs]])
        return local @ R.T + c

    def corners3d(self, t: float) -> np.ndarray:
        fp = self.footprint(t)
        lo = np.column_stack([fp, np.zeros(4)])
        hi = np.column_stack([fp, np.full(4, self.height)])
        return np.vstack([lo, hi])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["category"] = self.category.value
        d["center"] = list(self.center)
        d["velocity"] = list(self.velocity)
        # derived, for readers of the scene file; ignored on load
        d["footprint"] = self.footprint().tolist()
        d["motion"] = "static" if self.is_static else list(self.velocity)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Car":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class SceneParams:
    n_mc: int = 1
    n_lpc: int = 1
    n_ipc: int = 1
    n_ipc_departing: int = 0
    n_tall: int = 0
    mc_both_phases: bool = False
    altitude: float = 20.0
    speed: float = 3.0
    fps: float = 5.0
    n_frames: int = 12
    n_frames_investigation: int = 8
    grace_period_s: float = 300.0
    investigation_offset: tuple = (0.3, 0.4, 0.5)
    image_scale: float = 0.25
    spot_width: float = 2.8
    spot_length: float = 5.6
    mc_speed: tuple = (4.0, 6.0)
    max_retries: int = 200

    def __post_init__(self):
        for name in ("n_mc", "n_lpc", "n_ipc", "n_ipc_departing", "n_tall"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.n_ipc_departing > self.n_ipc:
            raise ValueError("more departing IPCs than IPCs")
        if self.n_frames < 2 or self.n_frames_investigation < 1:
            raise ValueError("need at least two suspicion frames")
        if self.altitude <= 0 or self.fps <= 0 or self.image_scale <= 0:
            raise ValueError("altitude, fps and image_scale must be positive")
        self.investigation_offset = tuple(self.investigation_offset)
        self.mc_speed = tuple(self.mc_speed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["investigation_offset"] = list(self.investigation_offset)
        d["mc_speed"] = list(self.mc_speed)
        return d


BASE_INTRINSICS = CameraIntrinsics(fx=800.0, fy=800.0, cx=479.5, cy=269.5, width=960, height=540)

# y-bands of the street layout (metres)
SPOT_ROW_Y = (0.9, 6.5)
MC_LANES_Y = (-0.6, -2.6)
CURB_Y = -5.4


@dataclass
class SceneModel:
    seed: int
    params: SceneParams
    intrinsics: CameraIntrinsics
    parking_spots: list
    cars: list
    trajectory: list
    frame_dt: float
    suspicion_times: list
    investigation_times: list
    investigation_start: float

    def __post_init__(self):
        ts = [t for t, _ in self.trajectory]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("trajectory timestamps must be strictly increasing")

    @property
    def texture_seed(self) -> int:
        return self.seed

    def spot_polygons(self) -> list[Polygon]:
        return [Polygon(p) for p in self.parking_spots]

    def pose_at(self, t: float) -> Pose:
        """Interpolated drone pose; linear beyond the last waypoint by at most one frame."""
        times = np.array([k for k, _ in self.trajectory])
        if t < times[0] - 1e-9 or t > times[-1] + self.frame_dt + 1e-9:
            raise TimeOutOfRange(f"t={t} outside [{times[0]}, {times[-1]}]")
        i = int(np.searchsorted(times, t, side="right")) - 1
        i = min(max(i, 0), len(times) - 2)
        (t0, p0), (t1, p1) = self.trajectory[i], self.trajectory[i + 1]
        a = (t - t0) / (t1 - t0)
        c = (1 - a) * p0.center + a * p1.center
        q = _slerp(np.array(p0.rotation), np.array(p1.rotation), min(max(a, 0.0), 1.0))
        return Pose.from_camera_center(Pose(tuple(q), (0, 0, 0)).R, c)

    def category_at(self, car: Car, t: float) -> Category:
        if car.category == Category.IPC and t < self.investigation_start:
            return Category.IPC_CANDIDATE
        return car.category

    def gt_ipcs(self) -> list[Car]:
        """Illegally parked cars still present when investigated."""
        return [c for c in self.cars if c.category == Category.IPC and c.present(self.investigation_start)]

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "seed": self.seed,
            "ground_plane_texture_seed": self.texture_seed,
            "params": self.params.to_dict(),
            "intrinsics": self.intrinsics.to_dict(),
            "parking_spots": [[list(map(float, v)) for v in p] for p in self.parking_spots],
            "cars": [c.to_dict() for c in self.cars],
            "trajectory": [{"time": t, "pose": p.to_dict()} for t, p in self.trajectory],
            "frame_dt": self.frame_dt,
            "suspicion_times": list(self.suspicion_times),
            "investigation_times": list(self.investigation_times),
            "investigation_start": self.investigation_start,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneModel":
        params = SceneParams(**d["params"])
        return cls(
            seed=int(d["seed"]),
            params=params,
            intrinsics=CameraIntrinsics.from_dict(d["intrinsics"]),
            parking_spots=[[tuple(v) for v in p] for p in d["parking_spots"]],
            cars=[Car.from_dict(c) for c in d["cars"]],
            trajectory=[(float(w["time"]), Pose.from_dict(w["pose"])) for w in d["trajectory"]],
            frame_dt=float(d["frame_dt"]),
            suspicion_times=[float(t) for t in d["suspicion_times"]],
            investigation_times=[float(t) for t in d["investigation_times"]],
            investigation_start=float(d["investigation_start"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "SceneModel":
        return cls.from_dict(json.loads(text))


def _slerp(q0, q1, a):
    d = float(np.dot(q0, q1))
    if d < 0:
        q1, d = -q1, -d
    if d > 0.9995:
        return quat_normalize(q0 + a * (q1 - q0))
    th = math.acos(d)
    return quat_normalize((math.sin((1 - a) * th) * q0 + math.sin(a * th) * q1) / math.sin(th))


def spot_overlap(footprint: np.ndarray | Polygon, spots) -> float:
    """Fraction of a footprint's area covered by the union of parking spots."""
    fp = footprint if isinstance(footprint, Polygon) else Polygon(footprint)
    if fp.area <= 0:
        return 0.0
    polys = [p if isinstance(p, Polygon) else Polygon(p) for p in spots]
    if not polys:
        return 0.0
    return float(fp.intersection(unary_union(polys)).area / fp.area)


def generate_scene(seed: int, params: SceneParams | None = None) -> SceneModel:
    """Lay out a street segment with parking spots, cars and two drone passes.

    The suspicion pass flies along +x at constant altitude; the investigation
    pass repeats it ``grace_period_s`` later with a small pose offset. Cars are
    placed by rejection sampling and ``InfeasiblePlacement`` is raised once
    ``max_retries`` draws fail for any car.
    """
    p = params or SceneParams()
    rng = np.random.default_rng(seed)
    dt = 1.0 / p.fps
    K = BASE_INTRINSICS.scaled(p.image_scale) if p.image_scale != 1.0 else BASE_INTRINSICS

    run = p.speed * dt * (p.n_frames - 1)
    t_sus = [k * dt for k in range(p.n_frames)]
    t_inv0 = t_sus[-1] + p.grace_period_s
    t_inv = [t_inv0 + k * dt for k in range(p.n_frames_investigation)]

    R = nadir_rotation(0.0)
    traj = []
    for t in t_sus:
        traj.append((t, Pose.from_camera_center(R, [p.speed * t, 0.0, p.altitude])))
    ox, oy, oz = p.investigation_offset
    inv_run = p.speed * dt * (p.n_frames_investigation - 1)
    x_start = max(0.0, 0.5 * (run - inv_run)) + ox
    yaw_inv = math.radians(2.0)
    R_inv = nadir_rotation(yaw_inv)
    for k, t in enumerate(t_inv):
        traj.append((t, Pose.from_camera_center(R_inv, [x_start + p.speed * dt * k, oy, p.altitude + oz])))

    # parking spots cover the flown segment plus margin
    x_lo, x_hi = -7.0, run + 7.0
    n_spots = int(math.floor((x_hi - x_lo) / p.spot_width))
    spots = []
    for k in range(n_spots):
        x0 = x_lo + k * p.spot_width
        y0, y1 = SPOT_ROW_Y[0], SPOT_ROW_Y[0] + p.spot_length
        spots.append([(x0, y0), (x0 + p.spot_width, y0), (x0 + p.spot_width, y1), (x0, y1)])

    cars: list[Car] = []
    placed: list[tuple[Car, list[tuple[float, float]]]] = []
    tall_left = p.n_tall
    free_spots = list(range(n_spots))
    # keep parked cars well inside the camera footprint of both passes
    park_lo, park_hi = -4.0, run + 4.0

    def dims(tall: bool):
        if tall:
            return rng.uniform(5.5, 6.5), rng.uniform(2.0, 2.3), rng.uniform(2.6, 3.2)
        return rng.uniform(4.2, 4.8), rng.uniform(1.75, 1.95), rng.uniform(1.4, 1.6)

    def collides(car: Car, windows) -> bool:
        for other, other_windows in placed:
            for (a0, a1) in windows:
                for (b0, b1) in other_windows:
                    lo, hi = max(a0, b0), min(a1, b1)
                    if lo > hi:
                        continue
                    for t in np.linspace(lo, hi, 9):
                        if Polygon(car.footprint(t)).buffer(0.2).intersects(Polygon(other.footprint(t))):
                            return True
        return False

    all_window = [(t_sus[0], t_inv[-1] + dt)]

    def add(car: Car, windows):
        cars.append(car)
        placed.append((car, windows))

    # legally parked: centred in a free spot, long axis along y
    for _ in range(p.n_lpc):
        for attempt in range(p.max_retries):
            cand = [s for s in free_spots if park_lo <= spots[s][0][0] + p.spot_width / 2 <= park_hi]
            if not cand:
                raise InfeasiblePlacement("no free parking spot in view")
            s = int(rng.choice(cand))
            L, W, H = dims(tall_left > 0)
            if L > p.spot_length - 0.3 or W > p.spot_width - 0.4:
                L, W = min(L, p.spot_length - 0.6), min(W, p.spot_width - 0.6)
            cx = spots[s][0][0] + p.spot_width / 2 + rng.uniform(-0.1, 0.1)
            cy = SPOT_ROW_Y[0] + p.spot_length / 2 + rng.uniform(-0.15, 0.15)
            car = Car(len(cars), Category.LPC, (cx, cy), L, W, H, math.pi / 2, shade=rng.uniform(0.25, 0.8))
            if not collides(car, all_window):
                tall_left -= int(H > 2.0)
                free_spots.remove(s)
                add(car, all_window)
                break
        else:
            raise InfeasiblePlacement("could not place LPC")

    # illegally parked along the curb, outside every spot
    for k in range(p.n_ipc):
        departing = k < p.n_ipc_departing
        for attempt in range(p.max_retries):
            L, W, H = dims(tall_left > 0)
            cx = rng.uniform(park_lo, park_hi)
            cy = CURB_Y + rng.uniform(-0.15, 0.15)
            car = Car(len(cars), Category.IPC, (cx, cy), L, W, H, rng.uniform(-0.05, 0.05),
                      depart_time=(t_sus[-1] + 0.5 * p.grace_period_s) if departing else None,
                      shade=rng.uniform(0.25, 0.8))
            if not collides(car, all_window):
                tall_left -= int(H > 2.0)
                add(car, all_window)
                break
        else:
            raise InfeasiblePlacement("could not place IPC")

    # moving cars drive along a lane and stay in view during their pass
    phases = [(t_sus[0], t_sus[-1] + dt)]
    if p.mc_both_phases:
        phases.append((t_inv[0], t_inv[-1] + dt))
    for k in range(p.n_mc):
        t0, t1 = phases[k % len(phases)]
        for attempt in range(p.max_retries):
            lane = MC_LANES_Y[int(rng.integers(len(MC_LANES_Y)))]
            direction = 1.0 if rng.random() < 0.5 else -1.0
            v = direction * rng.uniform(*p.mc_speed)
            L, W, H = dims(False)
            cam_x0 = x_start if t0 >= t_inv[0] else 0.0
            # mid-pass position near the drone's ground track
            tm = 0.5 * (t0 + t1)
            xm = cam_x0 + p.speed * (tm - t0) + rng.uniform(-4.0, 4.0)
            car = Car(len(cars), Category.MC, (xm, lane + rng.uniform(-0.1, 0.1)), L, W, H,
                      0.0 if direction > 0 else math.pi, velocity=(v, 0.0), ref_time=tm,
                      appear_time=t0, depart_time=t1, shade=rng.uniform(0.25, 0.8))
            if not collides(car, [(t0, t1)]):
                add(car, [(t0, t1)])
                break
        else:
            raise InfeasiblePlacement("could not place MC")

    return SceneModel(
        seed=seed, params=p, intrinsics=K, parking_spots=spots, cars=cars, trajectory=traj,
        frame_dt=dt, suspicion_times=t_sus, investigation_times=t_inv, investigation_start=t_inv[0],
    )
