"""Frame sequences for one drone pass, rendered from a scene or read from disk."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core import BoundingBox2D, CameraIntrinsics, Pose
from ..flow.field import FlowField, read_flo, write_flo
from ..imageio import read_gray, write_gray
from ..synthworld.render import render_frame, render_view
from ..synthworld.scene import SceneModel

PHASES = ("suspicion", "investigation")


@dataclass
class SequenceFrame:
    index: int
    time: float
    image: np.ndarray
    truth_boxes: list             # proposals are drawn around these
    pose: Pose | None = None      # navigation prior; only the first frames of a pass use it
    flow: FlowField | None = None  # ground-truth flow to the next frame, when known
    car_ids: list = field(default_factory=list)


@dataclass
class Sequence:
    phase: str
    intrinsics: CameraIntrinsics
    parking_spots: list
    frame_dt: float
    frames: list

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def start_time(self) -> float:
        return self.frames[0].time

    @property
    def end_time(self) -> float:
        return self.frames[-1].time

    @classmethod
    def from_scene(cls, scene: SceneModel, phase: str, first_index: int | None = None,
                   keep_flow: bool = False) -> "Sequence":
        """Render one pass. Investigation frames are numbered after the suspicion frames."""
        if phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")
        times = scene.suspicion_times if phase == "suspicion" else scene.investigation_times
        if first_index is None:
            first_index = 0 if phase == "suspicion" else len(scene.suspicion_times)
        frames = []
        for k, t in enumerate(times):
            if keep_flow:
                f = render_frame(scene, t)
                frames.append(SequenceFrame(first_index + k, t, f.image, f.gt_boxes, f.pose, f.gt_flow,
                                            list(f.car_ids)))
            else:
                image, boxes, ids, pose = render_view(scene, t)
                frames.append(SequenceFrame(first_index + k, t, image, boxes, pose, None, list(ids)))
        return cls(phase, scene.intrinsics, [list(map(tuple, p)) for p in scene.parking_spots],
                   scene.frame_dt, frames)

    # ------------------------------------------------------------ disk layout
    def write(self, directory) -> Path:
        """``frame_%05d.pgm``, ``flow_%05d.flo`` (when known), ``truth_%05d.json`` and ``sequence.json``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for f in self.frames:
            write_gray(d / f"frame_{f.index:05d}.pgm", f.image)
            if f.flow is not None:
                write_flo(d / f"flow_{f.index:05d}.flo", f.flow)
            truth = {
                "frame": f.index, "time": f.time, "pose": None if f.pose is None else f.pose.to_dict(),
                "gt_boxes": [dict(b.to_dict(), car_id=c) for b, c in zip(f.truth_boxes, f.car_ids)],
            }
            (d / f"truth_{f.index:05d}.json").write_text(json.dumps(truth, indent=2, sort_keys=True))
        meta = {"phase": self.phase, "intrinsics": self.intrinsics.to_dict(), "frame_dt": self.frame_dt,
                "parking_spots": [[list(map(float, v)) for v in p] for p in self.parking_spots],
                "frames": [f.index for f in self.frames]}
        (d / "sequence.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return d

    @classmethod
    def read(cls, directory) -> "Sequence":
        d = Path(directory)
        meta_path = d / "sequence.json"
        if not meta_path.exists():
            raise FileNotFoundError(f"{meta_path} not found; not a sequence directory")
        meta = json.loads(meta_path.read_text())
        frames = []
        for i in meta["frames"]:
            truth = json.loads((d / f"truth_{i:05d}.json").read_text())
            flo = d / f"flow_{i:05d}.flo"
            boxes = [BoundingBox2D.from_dict(b) for b in truth["gt_boxes"]]
            frames.append(SequenceFrame(
                int(i), float(truth["time"]), read_gray(d / f"frame_{i:05d}.pgm"), boxes,
                None if truth["pose"] is None else Pose.from_dict(truth["pose"]),
                read_flo(flo) if flo.exists() else None,
                [b.get("car_id") for b in truth["gt_boxes"]]))
        return cls(meta["phase"], CameraIntrinsics.from_dict(meta["intrinsics"]),
                   [[tuple(v) for v in p] for p in meta["parking_spots"]], float(meta["frame_dt"]), frames)
