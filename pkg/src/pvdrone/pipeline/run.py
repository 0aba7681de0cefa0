"""Two-pass suspect-and-investigate orchestration and end-task scoring."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np
from shapely.geometry import Polygon

from ..core import BoxState, Category, PvdError
from ..detect.gating import (
    EmptyBox,
    FlowStats,
    classify_box,
    ego_flow_estimate,
    flow_stats,
    propose_boxes,
)
from ..flow.estimator import estimate_flow, upsample_flow
from ..flow.field import FlowField
from ..flow.pyramid import downsample
from ..slam.map import WorldMap
from ..slam.relocalization import RelocalizationFailed
from ..slam.tracker import FrameInput, Investigator, Mapper
from ..synthworld.scene import InfeasiblePlacement, SceneModel, generate_scene
from .config import PipelineConfig
from .sequence import Sequence

MATCH_RADIUS = 1.5   # m, confirmed box centre to true footprint centre


class StageError(PvdError):
    """A pipeline stage failed on a given frame."""

    def __init__(self, stage: str, frame: int, cause: Exception):
        super().__init__(f"{stage} failed on frame {frame}: {cause}")
        self.stage = stage
        self.frame = frame


class GracePeriodNotElapsed(PvdError):
    pass


class _Timer:
    def __init__(self, timing: dict | None):
        self.timing = timing

    def add(self, key: str, t0: float) -> None:
        if self.timing is not None:
            self.timing[key] = self.timing.get(key, 0.0) + 1000.0 * (time.perf_counter() - t0)


# ---------------------------------------------------------------- flow and detection

def pipeline_flow(I1, I2, cfg: PipelineConfig) -> FlowField:
    """Flow estimated ``flow_downsample`` octaves down and brought back to image resolution."""
    a, b = np.asarray(I1, dtype=float), np.asarray(I2, dtype=float)
    shapes = []
    for _ in range(cfg.flow_downsample):
        shapes.append(a.shape)
        a, b = downsample(a), downsample(b)
    F = estimate_flow(a, b, cfg.flow)
    for shape in reversed(shapes):
        F = upsample_flow(F, shape)
    h, w = F.shape
    v, u = np.mgrid[0:h, 0:w]
    x, y = u + F.du, v + F.dv
    return FlowField(F.du, F.dv, (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1))


def sequence_flows(seq: Sequence, cfg: PipelineConfig) -> list[FlowField]:
    """Flow of every frame to the next; the last frame looks back instead."""
    imgs = [f.image for f in seq.frames]
    if len(imgs) < 2:
        raise StageError("flow", seq.frames[0].index if imgs else -1, ValueError("need two frames"))
    out = []
    for k in range(len(imgs)):
        j = k + 1 if k + 1 < len(imgs) else k - 1
        out.append(pipeline_flow(imgs[k], imgs[j], cfg))
    return out


@dataclass
class FrameDetection:
    """Proposals of one frame with their flow statistics.

    ``gated`` separates moving cars, which needs flow only; the parked boxes
    carry a provisional IPC-candidate label until ``labels`` sees a pose.
    """

    frame: int
    proposals: list
    stats: list
    gated: list
    spots: list
    cfg: object
    intrinsics: object

    def labels(self, pose) -> list:
        return [b.with_category(d.category, d.score) for b, d in
                ((b, classify_box(b, s, self.spots, self.cfg, self.intrinsics, pose))
                 for b, s in zip(self.proposals, self.stats))]


def detect_frame(frame, flow: FlowField, seq: Sequence, cfg: PipelineConfig) -> FrameDetection:
    K = seq.intrinsics
    rng = np.random.default_rng([cfg.seed, frame.index])
    proposals = propose_boxes(frame.image, frame.truth_boxes, cfg.detect, rng)
    stats = []
    if proposals:
        ego = ego_flow_estimate(flow, proposals, cfg.detect.min_background)
        for b in proposals:
            try:
                stats.append(flow_stats(flow, b, ego))
            except EmptyBox:
                stats.append(FlowStats(0.0, 0.0, 0.0, 0.0, 0.0))
    tau = cfg.detect.tau_mc_px(K.width)
    gated = [b.with_category(Category.MC if s.residual_mag > tau else Category.IPC_CANDIDATE)
             for b, s in zip(proposals, stats)]
    spots = [Polygon(p) for p in seq.parking_spots]
    return FrameDetection(frame.index, proposals, stats, gated, spots, cfg.detect, K)


def detect_sequence(seq: Sequence, cfg: PipelineConfig, flows=None, timing: dict | None = None):
    """Flow and gated detections for every frame of a pass."""
    timer = _Timer(timing)
    t0 = time.perf_counter()
    flows = flows if flows is not None else sequence_flows(seq, cfg)
    timer.add(f"{seq.phase}.flow", t0)
    t0 = time.perf_counter()
    dets = []
    for f, F in zip(seq.frames, flows):
        try:
            dets.append(detect_frame(f, F, seq, cfg))
        except PvdError as e:
            raise StageError("detect", f.index, e) from e
    timer.add(f"{seq.phase}.detect", t0)
    return flows, dets


# ---------------------------------------------------------------- the two passes

def run_suspicion(seq: Sequence, cfg: PipelineConfig | None = None, timing: dict | None = None,
                  logs: list | None = None) -> WorldMap:
    """Map the first pass and mark IPC candidates.

    The first two frames take their navigation pose as a prior, which
    fixes the map's scale; the rest are tracked.
    """
    cfg = cfg or PipelineConfig()
    if len(seq) < 2 or any(f.pose is None for f in seq.frames[:2]):
        raise StageError("suspicion", seq.frames[0].index if len(seq) else -1,
                         ValueError("the first two frames need a pose prior"))
    flows, dets = detect_sequence(seq, cfg, timing=timing)
    timer = _Timer(timing)
    t0 = time.perf_counter()
    wmap = WorldMap(seq.intrinsics)
    mapper = Mapper(wmap, cfg.slam, cfg.detect.footprint_height)
    for k, (f, F, d) in enumerate(zip(seq.frames, flows, dets)):
        try:
            log = mapper.process(FrameInput(f.index, f.image, d.gated, F, f.pose if k < 2 else None, d.labels))
        except PvdError as e:
            raise StageError("suspicion", f.index, e) from e
        if logs is not None:
            logs.append(log)
    mapper.finish()
    wmap.meta["suspicion_end_time"] = float(seq.end_time)
    wmap.meta["suspicion_frames"] = [f.index for f in seq.frames]
    timer.add("suspicion.slam", t0)
    return wmap


def run_investigation(wmap: WorldMap, seq: Sequence, cfg: PipelineConfig | None = None,
                      timing: dict | None = None, logs: list | None = None) -> WorldMap:
    """Relocalize the second pass in ``wmap`` and confirm candidates still parked.

    Raises ``RelocalizationFailed`` when the first frame cannot be placed
    in the map, and ``GracePeriodNotElapsed`` when the pass comes too early.
    """
    cfg = cfg or PipelineConfig()
    end = wmap.meta.get("suspicion_end_time")
    if end is not None and seq.start_time - end < cfg.grace_period_s - 1e-9:
        raise GracePeriodNotElapsed(
            f"investigation starts {seq.start_time - end:.1f} s after suspicion, grace period {cfg.grace_period_s} s")
    flows, dets = detect_sequence(seq, cfg, timing=timing)
    timer = _Timer(timing)
    t0 = time.perf_counter()
    inv = Investigator(wmap, replace(cfg.slam, seed=cfg.seed))
    for f, F, d in zip(seq.frames, flows, dets):
        try:
            log = inv.process(FrameInput(f.index, f.image, d.gated, F))
        except RelocalizationFailed as e:
            raise RelocalizationFailed(f"frame {f.index}: {e}") from e
        except PvdError as e:
            raise StageError("investigation", f.index, e) from e
        if logs is not None:
            logs.append(log)
    inv.finish()
    wmap.meta["investigation_frames"] = [f.index for f in seq.frames]
    wmap.meta["investigation_lost_frames"] = inv.failures
    timer.add("investigation.slam", t0)
    return wmap


# ---------------------------------------------------------------- scoring

def _centers(items) -> np.ndarray:
    out = []
    for c in items:
        if hasattr(c, "center") and callable(getattr(c, "footprint", None)):
            out.append(np.asarray(c.footprint(), dtype=float).mean(axis=0))   # a scene car
        elif hasattr(c, "center"):
            out.append(np.asarray(c.center, dtype=float)[:2])
        else:
            out.append(np.asarray(c, dtype=float)[:2])
    return np.array(out, dtype=float).reshape(-1, 2)


def evaluate_pvd(confirmed, ground_truth, radius: float = MATCH_RADIUS) -> dict:
    """Per-car precision, recall and F1 with greedy one-to-one matching.

    ``confirmed`` is a ``PvdReport``, 3D boxes or centres; ``ground_truth``
    holds scene cars or footprint centres. Distances are horizontal. Pairs
    are taken in order of increasing distance.
    """
    if isinstance(confirmed, PvdReport):
        confirmed = [np.array(b["center"]) for b in confirmed.confirmed]
    P, G = _centers(confirmed), _centers(ground_truth)
    D = np.linalg.norm(P[:, None, :] - G[None, :, :], axis=2) if len(P) and len(G) else np.zeros((len(P), len(G)))
    used_p, used_g, matches = set(), set(), []
    for i, j in sorted(zip(*np.nonzero(D <= radius)), key=lambda ij: (D[ij], ij[0], ij[1])):
        if i in used_p or j in used_g:
            continue
        used_p.add(int(i))
        used_g.add(int(j))
        matches.append((int(i), int(j), float(D[i, j])))
    tp = len(matches)
    fp, fn = len(P) - tp, len(G) - tp
    # an empty prediction set is only perfect when there was nothing to find
    precision = tp / len(P) if len(P) else float(len(G) == 0)
    recall = tp / len(G) if len(G) else float(len(P) == 0)
    return {"precision": precision, "recall": recall, "f1": f1_score(precision, recall),
            "tp": tp, "fp": fp, "fn": fn, "matches": matches}


def f1_score(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class PvdReport:
    confirmed: list                 # box dicts with first/last seen frame
    unconfirmed: list
    precision: float
    recall: float
    f1: float
    seed: int = 0
    status: str = "ok"
    counts: dict = field(default_factory=dict)
    phases: dict = field(default_factory=dict)
    timing_ms: dict = field(default_factory=dict)   # kept out of the JSON, which must be reproducible

    def __post_init__(self):
        for name in ("precision", "recall", "f1"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if abs(self.f1 - f1_score(self.precision, self.recall)) > 1e-12:
            raise ValueError("f1 disagrees with precision and recall")

    @classmethod
    def from_map(cls, wmap: WorldMap, ground_truth=None, seed: int = 0, status: str = "ok",
                 timing_ms: dict | None = None) -> "PvdReport":
        confirmed = [b.to_dict() for b in wmap.confirmed()]
        unconfirmed = [b.to_dict() for b in wmap.candidates()]
        if ground_truth is None:
            scores = {"precision": 0.0, "recall": 0.0, "f1": 0.0}
            counts = {}
        else:
            scores = evaluate_pvd([np.array(b["center"]) for b in confirmed], ground_truth)
            counts = {k: scores[k] for k in ("tp", "fp", "fn")}
            counts["n_gt"] = counts["tp"] + counts["fn"]
        phases = {"keyframes": len(wmap.keyframes), "map_points": len(wmap.points),
                  "investigation_lost_frames": wmap.meta.get("investigation_lost_frames", 0)}
        return cls(confirmed, unconfirmed, scores["precision"], scores["recall"], scores["f1"], seed, status,
                   counts, phases, dict(timing_ms or {}))

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {"seed": self.seed, "status": self.status, "confirmed_ipcs": self.confirmed,
             "unconfirmed_candidates": self.unconfirmed, "precision": self.precision, "recall": self.recall,
             "f1": self.f1, "counts": self.counts, "phases": self.phases}
        if include_timing:
            d["timing_ms"] = {k: round(v, 3) for k, v in sorted(self.timing_ms.items())}
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)


# ---------------------------------------------------------------- scenarios

def simulate(cfg: PipelineConfig, seed: int | None = None, params=None) -> SceneModel:
    return generate_scene(cfg.seed if seed is None else seed, params or cfg.scene)


def run_scene(scene: SceneModel, cfg: PipelineConfig | None = None):
    """Both passes over a simulated scene; returns ``(report, map)``.

    A relocalization failure yields a report with status
    ``relocalization_failed`` and no confirmations.
    """
    cfg = cfg or PipelineConfig()
    timing: dict = {}
    t0 = time.perf_counter()
    sus = Sequence.from_scene(scene, "suspicion")
    inv = Sequence.from_scene(scene, "investigation")
    timing["render"] = 1000.0 * (time.perf_counter() - t0)
    wmap = run_suspicion(sus, cfg, timing)
    status = "ok"
    try:
        run_investigation(wmap, inv, cfg, timing)
    except RelocalizationFailed:
        status = "relocalization_failed"
        for b in wmap.boxes3d.values():
            if b.state == BoxState.CONFIRMED_IPC:
                b.state = BoxState.CANDIDATE
    return PvdReport.from_map(wmap, scene.gt_ipcs(), scene.seed, status, timing), wmap


SCENARIO_KINDS = {
    "ipc_present": dict(n_mc=1, n_lpc=2, n_ipc=2, n_ipc_departing=0),
    "ipc_departed": dict(n_mc=1, n_lpc=1, n_ipc=2, n_ipc_departing=1),
    "mc_heavy": dict(n_mc=3, n_lpc=1, n_ipc=1, n_ipc_departing=0, mc_both_phases=True),
    "occlusion": dict(n_mc=2, n_lpc=2, n_ipc=2, n_ipc_departing=1, n_tall=1, mc_both_phases=True),
}


def benchmark_scenarios(n: int = 20, base_seed: int = 0, cfg: PipelineConfig | None = None):
    """``n`` seeded scenarios cycling through the scenario kinds: ``(name, seed, SceneParams)``.

    A seed whose layout cannot be placed is replaced by ``seed + 1000``,
    and so on, so the suite is the same on every run.
    """
    cfg = cfg or PipelineConfig()
    kinds = list(SCENARIO_KINDS)
    out = []
    for k in range(n):
        kind = kinds[k % len(kinds)]
        base = cfg.scene.to_dict()
        base.update(SCENARIO_KINDS[kind])
        params = type(cfg.scene)(**base)
        seed = base_seed + k
        for _ in range(10):
            try:
                generate_scene(seed, params)
                break
            except InfeasiblePlacement:
                seed += 1000
        else:
            raise InfeasiblePlacement(f"no feasible layout for scenario {kind}_{k:02d}")
        out.append((f"{kind}_{k:02d}", seed, params))
    return out


def run_benchmark(n: int = 20, cfg: PipelineConfig | None = None, base_seed: int = 0, progress=None) -> dict:
    """Pooled per-car precision/recall/F1 over the scenario suite."""
    cfg = cfg or PipelineConfig()
    rows = []
    tp = fp = fn = 0
    t_start = time.perf_counter()
    for name, seed, params in benchmark_scenarios(n, base_seed, cfg):
        t0 = time.perf_counter()
        scene = generate_scene(seed, params)
        report, _ = run_scene(scene, cfg)
        c = report.counts
        tp, fp, fn = tp + c["tp"], fp + c["fp"], fn + c["fn"]
        row = {"scenario": name, "seed": seed, "status": report.status, "tp": c["tp"], "fp": c["fp"],
               "fn": c["fn"], "precision": report.precision, "recall": report.recall, "f1": report.f1,
               "seconds": time.perf_counter() - t0}
        rows.append(row)
        if progress is not None:
            progress(row)
    precision = tp / (tp + fp) if tp + fp else float(fn == 0)
    recall = tp / (tp + fn) if tp + fn else float(fp == 0)
    return {"scenarios": rows, "tp": tp, "fp": fp, "fn": fn, "precision": precision, "recall": recall,
            "f1": f1_score(precision, recall), "seconds": time.perf_counter() - t_start}
