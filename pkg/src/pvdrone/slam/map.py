"""World map: keyframes, tagged map points and 3D car boxes."""
from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..core import BoundingBox2D, BoundingBox3D, BoxState, CameraIntrinsics, Pose
from .features import DESCRIPTOR_SIZE, Keypoint


@dataclass
class SlamConfig:
    delta_obj: int = 8             # association needs strictly more tagged inliers
    eps_inlier: float = 2.0        # px
    huber_delta: float = 1.345     # px
    max_gn_iters: int = 50
    ratio_test: float = 0.8
    n_confirm: int = 2
    min_reloc_inliers: int = 20
    ransac_iters: int = 150
    reloc_candidates: int = 3
    ba_window: int = 5
    ba_iters: int = 10
    search_radius: float = 30.0    # px, matching radius without a motion prior
    guided_radius: float = 4.0     # px, around flow or projection predictions
    min_angle_deg: float = 0.5
    min_tag_height: float = 0.3    # m, tagged points must sit on the car body
    box_merge_radius: float = 1.5  # m
    min_candidate_frames: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.delta_obj < 1:
            raise ValueError("delta_obj must be >= 1")
        if self.eps_inlier <= 0 or self.huber_delta <= 0:
            raise ValueError("eps_inlier and huber_delta must be positive")
        if not 0 < self.ratio_test <= 1:
            raise ValueError("ratio_test must lie in (0, 1]")
        if self.n_confirm < 1:
            raise ValueError("n_confirm must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SlamConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class MapPoint:
    id: int
    position: np.ndarray
    descriptor: np.ndarray
    observations: list = field(default_factory=list)   # (keyframe id, keypoint index)
    box3d_tag: int | None = None

    def observed_in(self, kf_id: int) -> int | None:
        for k, i in self.observations:
            if k == kf_id:
                return i
        return None


@dataclass
class Keyframe:
    id: int
    pose: Pose
    keypoints: list
    boxes2d: list
    frame: int = -1
    point_of: dict = field(default_factory=dict)   # keypoint index -> map point id

    def uv(self) -> np.ndarray:
        if not self.keypoints:
            return np.zeros((0, 2))
        return np.stack([k.position for k in self.keypoints])


def _pack(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _unpack(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").reshape(shape).copy()


class WorldMap:
    """Single-writer map; ids are dense and assigned in insertion order."""

    def __init__(self, intrinsics: CameraIntrinsics):
        self.intrinsics = intrinsics
        self.keyframes: dict[int, Keyframe] = {}
        self.points: dict[int, MapPoint] = {}
        self.boxes3d: dict[int, BoundingBox3D] = {}
        self.meta: dict = {}       # JSON-safe annotations, e.g. when the pass ended
        self._next_point = 0

    # ------------------------------------------------------------ building
    def add_keyframe(self, pose: Pose, keypoints, boxes2d, frame: int = -1) -> Keyframe:
        kf = Keyframe(len(self.keyframes), pose, list(keypoints), list(boxes2d), frame)
        self.keyframes[kf.id] = kf
        return kf

    def add_point(self, position, descriptor, observations, box3d_tag=None) -> MapPoint:
        mp = MapPoint(self._next_point, np.asarray(position, dtype=float), np.asarray(descriptor, dtype=float),
                      [], box3d_tag)
        self._next_point += 1
        self.points[mp.id] = mp
        for kf_id, idx in observations:
            self.add_observation(mp.id, kf_id, idx)
        return mp

    def add_observation(self, point_id: int, kf_id: int, kp_index: int) -> None:
        kf = self.keyframes[kf_id]
        if kf.keypoints[kp_index].excluded:
            raise ValueError("excluded keypoints cannot observe map points")
        if kp_index in kf.point_of:
            raise ValueError("keypoint already observes a map point")
        kf.point_of[kp_index] = point_id
        self.points[point_id].observations.append((kf_id, kp_index))

    def remove_point(self, point_id: int) -> None:
        mp = self.points.pop(point_id)
        for kf_id, idx in mp.observations:
            self.keyframes[kf_id].point_of.pop(idx, None)

    def add_box3d(self, box: BoundingBox3D) -> BoundingBox3D:
        box.id = len(self.boxes3d)
        self.boxes3d[box.id] = box
        return box

    # ------------------------------------------------------------ queries
    def point_ids(self) -> list[int]:
        return sorted(self.points)

    def positions(self, ids) -> np.ndarray:
        return np.array([self.points[i].position for i in ids]).reshape(-1, 3)

    def descriptors(self, ids) -> np.ndarray:
        return np.array([self.points[i].descriptor for i in ids]).reshape(-1, DESCRIPTOR_SIZE)

    def tags(self, ids) -> np.ndarray:
        return np.array([-1 if self.points[i].box3d_tag is None else self.points[i].box3d_tag for i in ids],
                        dtype=int)

    def candidates(self) -> list[BoundingBox3D]:
        return [b for _, b in sorted(self.boxes3d.items()) if b.state == BoxState.CANDIDATE]

    def confirmed(self) -> list[BoundingBox3D]:
        return [b for _, b in sorted(self.boxes3d.items()) if b.state == BoxState.CONFIRMED_IPC]

    def check_invariants(self) -> None:
        """Raise ``AssertionError`` if an observation is dangling or excluded."""
        for mp in self.points.values():
            assert np.all(np.isfinite(mp.position)), f"point {mp.id} not finite"
            for kf_id, idx in mp.observations:
                kf = self.keyframes.get(kf_id)
                assert kf is not None and 0 <= idx < len(kf.keypoints), f"point {mp.id} dangling"
                assert not kf.keypoints[idx].excluded, f"point {mp.id} observes an excluded keypoint"
                assert kf.point_of.get(idx) == mp.id
            if mp.box3d_tag is not None:
                assert mp.box3d_tag in self.boxes3d

    # ------------------------------------------------------------ persistence
    def to_dict(self) -> dict:
        kfs = []
        for _, kf in sorted(self.keyframes.items()):
            kps = kf.keypoints
            kfs.append({
                "id": kf.id, "frame": kf.frame, "pose": kf.pose.to_dict(),
                "boxes2d": [b.to_dict() for b in kf.boxes2d],
                "keypoints": {
                    "uv": [[float(v) for v in k.position] for k in kps],
                    "excluded": [bool(k.excluded) for k in kps],
                    "box_tag": [k.box_tag for k in kps],
                    "response": [float(k.response) for k in kps],
                    "descriptors": _pack(np.array([k.descriptor for k in kps]).reshape(-1, DESCRIPTOR_SIZE)),
                },
            })
        pts = []
        for _, mp in sorted(self.points.items()):
            pts.append({"id": mp.id, "position": mp.position.tolist(), "tag": mp.box3d_tag,
                        "observations": [list(o) for o in mp.observations], "descriptor": _pack(mp.descriptor)})
        return {"intrinsics": self.intrinsics.to_dict(), "keyframes": kfs, "map_points": pts,
                "boxes3d": [b.to_dict() for _, b in sorted(self.boxes3d.items())], "next_point": self._next_point,
                "meta": dict(self.meta)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldMap":
        m = cls(CameraIntrinsics.from_dict(d["intrinsics"]))
        for k in d["keyframes"]:
            kp = k["keypoints"]
            n = len(kp["uv"])
            desc = _unpack(kp["descriptors"], (n, DESCRIPTOR_SIZE))
            kps = [Keypoint(np.array(kp["uv"][i]), desc[i], kp["response"][i], kp["box_tag"][i],
                            kp["excluded"][i]) for i in range(n)]
            kf = Keyframe(int(k["id"]), Pose.from_dict(k["pose"]), kps,
                          [BoundingBox2D.from_dict(b) for b in k["boxes2d"]], int(k["frame"]))
            m.keyframes[kf.id] = kf
        for b in d["boxes3d"]:
            box = BoundingBox3D.from_dict(b)
            m.boxes3d[box.id] = box
        for p in d["map_points"]:
            mp = MapPoint(int(p["id"]), np.array(p["position"], dtype=float),
                          _unpack(p["descriptor"], (DESCRIPTOR_SIZE,)), [], p["tag"])
            m.points[mp.id] = mp
            for kf_id, idx in p["observations"]:
                m.add_observation(mp.id, int(kf_id), int(idx))
        m._next_point = int(d.get("next_point", max(m.points, default=-1) + 1))
        m.meta = dict(d.get("meta", {}))
        return m

    @classmethod
    def from_json(cls, text: str) -> "WorldMap":
        return cls.from_dict(json.loads(text))
