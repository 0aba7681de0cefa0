"""Shared geometric types: intrinsics, SE(3) poses, boxes and projection.

Pose convention: a ``Pose`` maps world coordinates into the camera frame,
``x_cam = R @ x_world + t``. Image coordinates are continuous with pixel
centres at integer positions.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np


class PvdError(Exception):
    """Base class for every error raised by this package."""


class DepthNonPositive(PvdError):
    pass


class Category(str, enum.Enum):
    MC = "MC"
    LPC = "LPC"
    IPC_CANDIDATE = "IPCCandidate"
    IPC = "IPC"


class BoxState(str, enum.Enum):
    CANDIDATE = "Candidate"
    CONFIRMED_IPC = "ConfirmedIPC"


# ---------------------------------------------------------------------------
# rotations

def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    # canonical hemisphere keeps serialisation stable
    if q[0] < 0:
        q = -q
    return q


def quat_multiply(a, b) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi) -> np.ndarray:
    """Rodrigues' formula for a rotation vector."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-12:
        return np.eye(3) + K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta ** 2
    return np.eye(3) + a * K + b * K @ K


def so3_log(R) -> np.ndarray:
    q = matrix_to_quat(R)
    v = q[1:]
    s = np.linalg.norm(v)
    if s < 1e-15:
        return 2.0 * v
    return 2.0 * np.arctan2(s, q[0]) * v / s


def rotation_angle(R) -> float:
    """Angle of a rotation matrix in radians."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


# ---------------------------------------------------------------------------
# types

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics for an image resized by ``factor`` (pixel centres kept)."""
        w = int(round(self.width * factor))
        h = int(round(self.height * factor))
        return CameraIntrinsics(
            fx=self.fx * factor, fy=self.fy * factor,
            cx=(self.cx + 0.5) * factor - 0.5, cy=(self.cy + 0.5) * factor - 0.5,
            width=w, height=h,
        )

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class Pose:
    """Rigid world-to-camera transform stored as a unit quaternion (w, x, y, z)."""

    rotation: tuple
    translation: tuple

    def __post_init__(self):
        q = quat_normalize(self.rotation)
        object.__setattr__(self, "rotation", tuple(float(v) for v in q))
        object.__setattr__(self, "translation", tuple(float(v) for v in self.translation))

    @classmethod
    def identity(cls) -> "Pose":
        return cls((1.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0))

    @classmethod
    def from_matrix(cls, R, t) -> "Pose":
        return cls(tuple(matrix_to_quat(R)), tuple(np.asarray(t, dtype=float)))

    @classmethod
    def from_camera_center(cls, R_cw, center) -> "Pose":
        R_cw = np.asarray(R_cw, dtype=float)
        return cls.from_matrix(R_cw, -R_cw @ np.asarray(center, dtype=float))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return np.array(self.translation)

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.R.T @ self.t

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: apply ``other`` first, then ``self``."""
        q = quat_multiply(self.rotation, other.rotation)
        t = self.R @ other.t + self.t
        return Pose(tuple(q), tuple(t))

    def inverse(self) -> "Pose":
        w, x, y, z = self.rotation
        Rt = self.R.T
        return Pose((w, -x, -y, -z), tuple(-Rt @ self.t))

    def apply(self, X) -> np.ndarray:
        """Transform points (..., 3) from world to camera frame."""
        X = np.asarray(X, dtype=float)
        return X @ self.R.T + self.t

    def retract(self, xi) -> "Pose":
        """Left perturbation ``exp(xi) * self`` with ``xi = (rho, phi)``."""
        dR = so3_exp(xi[3:])
        R = dR @ self.R
        t = dR @ self.t + np.asarray(xi[:3])
        return Pose.from_matrix(R, t)

    def to_dict(self) -> dict:
        return {"quaternion": list(self.rotation), "translation": list(self.translation)}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(tuple(d["quaternion"]), tuple(d["translation"]))


def pose_error(a: Pose, b: Pose) -> tuple[float, float]:
    """Rotation error in degrees and camera-centre distance."""
    dR = a.R @ b.R.T
    return np.degrees(rotation_angle(dR)), float(np.linalg.norm(a.center - b.center))


@dataclass(frozen=True)
class BoundingBox2D:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    category: Category | None = None
    score: float = 1.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_list()}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score outside [0, 1]")
        if self.category is not None:
            object.__setattr__(self, "category", Category(self.category))

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def contains(self, u, v) -> np.ndarray:
        u = np.asarray(u)
        v = np.asarray(v)
        return (u >= self.x_min) & (u <= self.x_max) & (v >= self.y_min) & (v <= self.y_max)

    def with_category(self, category, score: float | None = None) -> "BoundingBox2D":
        return BoundingBox2D(self.x_min, self.y_min, self.x_max, self.y_max, category,
                             self.score if score is None else score)

    def clipped(self, width: int, height: int) -> "BoundingBox2D | None":
        x0, y0 = max(self.x_min, -0.5), max(self.y_min, -0.5)
        x1, y1 = min(self.x_max, width - 0.5), min(self.y_max, height - 0.5)
        if x1 - x0 < 1.0 or y1 - y0 < 1.0:
            return None
        return BoundingBox2D(x0, y0, x1, y1, self.category, self.score)

    def to_dict(self) -> dict:
        return {"box": self.as_list(),
                "category": None if self.category is None else self.category.value,
                "score": self.score}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundingBox2D":
        return cls(*map(float, d["box"]), category=d.get("category"), score=float(d.get("score", 1.0)))


@dataclass
class BoundingBox3D:
    center: np.ndarray
    extents: np.ndarray
    yaw: float
    category: Category
    state: BoxState
    id: int
    first_seen: int = -1
    last_seen: int = -1

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.extents = np.asarray(self.extents, dtype=float)
        if np.any(self.extents <= 0):
            raise ValueError("3D box extents must be positive")
        self.category = Category(self.category)
        self.state = BoxState(self.state)

    def to_dict(self) -> dict:
        return {"id": self.id, "center": self.center.tolist(), "extents": self.extents.tolist(),
                "yaw": float(self.yaw), "category": self.category.value, "state": self.state.value,
                "first_seen": self.first_seen, "last_seen": self.last_seen}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundingBox3D":
        return cls(np.array(d["center"]), np.array(d["extents"]), float(d["yaw"]), d["category"],
                   d["state"], int(d["id"]), int(d.get("first_seen", -1)), int(d.get("last_seen", -1)))


# ---------------------------------------------------------------------------
# operations

def project(X, K: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of camera-frame points (..., 3) to pixels (..., 2)."""
    X = np.asarray(X, dtype=float)
    z = X[..., 2]
    if np.any(z <= 1e-9):
        raise DepthNonPositive("point at or behind the camera")
    return np.stack([K.fx * X[..., 0] / z + K.cx, K.fy * X[..., 1] / z + K.cy], axis=-1)


def unproject(uv, depth, K: CameraIntrinsics) -> np.ndarray:
    """Back-project pixels at known camera-frame depth."""
    uv = np.asarray(uv, dtype=float)
    depth = np.asarray(depth, dtype=float)
    x = (uv[..., 0] - K.cx) / K.fx * depth
    y = (uv[..., 1] - K.cy) / K.fy * depth
    return np.stack([x, y, depth * np.ones_like(x)], axis=-1)


def pixel_rays(uv, K: CameraIntrinsics, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """World-frame camera centre and (unnormalised) ray directions for pixels."""
    uv = np.asarray(uv, dtype=float)
    d_cam = np.stack([(uv[..., 0] - K.cx) / K.fx, (uv[..., 1] - K.cy) / K.fy,
                      np.ones(uv.shape[:-1])], axis=-1)
    return pose.center, d_cam @ pose.R


def unproject_to_plane(uv, K: CameraIntrinsics, pose: Pose, z: float = 0.0) -> np.ndarray:
    """Intersect pixel rays with the horizontal world plane at height ``z``."""
    c, d = pixel_rays(uv, K, pose)
    s = (z - c[2]) / d[..., 2]
    if np.any(s <= 0):
        raise DepthNonPositive("plane is behind the camera")
    return c + s[..., None] * d


def transform_point(P: Pose, X) -> np.ndarray:
    return P.apply(X)


def iou(a: BoundingBox2D, b: BoundingBox2D) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: Iterable[BoundingBox2D], b: Iterable[BoundingBox2D]) -> np.ndarray:
    A = np.array([x.as_list() for x in a], dtype=float).reshape(-1, 4)
    B = np.array([x.as_list() for x in b], dtype=float).reshape(-1, 4)
    iw = np.minimum(A[:, None, 2], B[None, :, 2]) - np.maximum(A[:, None, 0], B[None, :, 0])
    ih = np.minimum(A[:, None, 3], B[None, :, 3]) - np.maximum(A[:, None, 1], B[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (A[:, 2] - A[:, 0]) * (A[:, 3] - A[:, 1])
    area_b = (B[:, 2] - B[:, 0]) * (B[:, 3] - B[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nadir_rotation(yaw: float = 0.0) -> np.ndarray:
    """World-to-camera rotation for a camera looking straight down.

    Camera x follows the world heading ``yaw``; the optical axis is world -z.
    """
    c, s = np.cos(yaw), np.sin(yaw)
    R_wc = np.array([[c, s, 0.0], [s, -c, 0.0], [0.0, 0.0, -1.0]])
    return R_wc.T
