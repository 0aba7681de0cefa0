"""Suspicion-phase mapping and investigation-phase localization."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..core import BoundingBox2D, BoundingBox3D, BoxState, Category, DepthNonPositive, Pose, PvdError, \
    unproject_to_plane
from ..flow.matching import bilinear_sample
from .association import associate_boxes, reidentify
from .bundle import local_bundle_adjust
from .features import descriptor_matrix, extract_keypoints, match_candidates
from .geometry import TRI_OK, Degenerate, Diverged, project_points, solve_pnp, triangulate_many
from .map import SlamConfig, WorldMap
from .relocalization import RelocalizationFailed, relocalize


class TrackingLost(PvdError):
    pass


@dataclass
class FrameInput:
    index: int
    image: np.ndarray
    boxes: list                   # classified 2D boxes
    flow: object = None           # FlowField to the next frame, guides matching
    pose_prior: Pose | None = None
    relabel: object = None        # optional callable(pose) -> boxes, same order as ``boxes``


@dataclass
class FrameLog:
    index: int
    pose: Pose | None
    keypoints: int = 0
    matches: int = 0
    inliers: int = 0
    new_points: int = 0
    relocalized: bool = False
    associations: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"index": self.index, "pose": None if self.pose is None else self.pose.to_dict(),
                "keypoints": self.keypoints, "matches": self.matches, "inliers": self.inliers,
                "new_points": self.new_points, "relocalized": self.relocalized,
                "associations": [list(a) for a in self.associations]}


def _radius_pairs(query: np.ndarray, ref: np.ndarray, radius: float):
    """Index pairs (query, ref) closer than ``radius``."""
    if len(query) == 0 or len(ref) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    hits = cKDTree(ref).query_ball_point(query, radius)
    qi = np.repeat(np.arange(len(query)), [len(h) for h in hits])
    ri = np.fromiter((j for h in hits for j in h), dtype=int, count=len(qi))
    return qi, ri


def _footprint_box(box: BoundingBox2D, wmap: WorldMap, pose: Pose, height: float):
    uv = np.array([[box.x_min, box.y_min], [box.x_max, box.y_min], [box.x_max, box.y_max], [box.x_min, box.y_max]])
    X = unproject_to_plane(uv, wmap.intrinsics, pose, height)
    lo, hi = X[:, :2].min(axis=0), X[:, :2].max(axis=0)
    return np.array([*(lo + hi) / 2, height]), np.array([*(hi - lo), 2 * height])


class Mapper:
    """Builds the suspicion map frame by frame; every frame becomes a keyframe.

    Poses of the first two frames come from ``pose_prior`` (this fixes the
    metric scale); later poses come from PnP against the map, followed by
    triangulation of fresh matches and a local bundle adjustment.
    """

    def __init__(self, wmap: WorldMap, cfg: SlamConfig | None = None, footprint_height: float = 0.75):
        self.map = wmap
        self.cfg = cfg or SlamConfig()
        self.footprint_height = footprint_height
        self.prev: FrameInput | None = None
        self.logs: list[FrameLog] = []
        self.box_frames: dict[int, set] = {}
        self.fixed: set = set()
        self._next_box = 0

    def _predict(self, kf_id: int) -> Pose:
        kfs = self.map.keyframes
        if kf_id >= 1:
            delta = kfs[kf_id].pose.compose(kfs[kf_id - 1].pose.inverse())
            return delta.compose(kfs[kf_id].pose)
        return kfs[kf_id].pose

    def process(self, frame: FrameInput) -> FrameLog:
        cfg = self.cfg
        K = self.map.intrinsics
        kps = extract_keypoints(frame.image, frame.boxes)
        log = FrameLog(frame.index, None, keypoints=len(kps))
        if not self.map.keyframes:
            pose = frame.pose_prior or Pose.identity()
            kf = self.map.add_keyframe(pose, kps, self._labels(frame, pose), frame.index)
            self.fixed.add(kf.id)
            log.pose = pose
            self._boxes(kf, np.zeros((0, 2), dtype=int))
            self._finish_frame(frame, log)
            return log

        prev_kf = self.map.keyframes[max(self.map.keyframes)]
        prev_uv = prev_kf.uv()
        cur_uv = np.array([k.position for k in kps]).reshape(-1, 2)
        if self.prev is not None and self.prev.flow is not None and len(prev_uv):
            f = self.prev.flow
            du, _ = bilinear_sample(f.du, prev_uv[:, 0], prev_uv[:, 1])
            dv, _ = bilinear_sample(f.dv, prev_uv[:, 0], prev_uv[:, 1])
            ii, jj = _radius_pairs(cur_uv, prev_uv + np.column_stack([du, dv]), cfg.guided_radius)
        else:
            ii, jj = _radius_pairs(cur_uv, prev_uv, cfg.search_radius)
        usable = np.array([not kps[i].excluded and not prev_kf.keypoints[j].excluded for i, j in zip(ii, jj)],
                          dtype=bool).reshape(-1)
        pairs = match_candidates(descriptor_matrix(kps), descriptor_matrix(prev_kf.keypoints), ii[usable],
                                 jj[usable], cfg.ratio_test)
        log.matches = len(pairs)
        tracked = [(i, prev_kf.point_of[j]) for i, j in pairs if j in prev_kf.point_of]
        fresh = [(i, j) for i, j in pairs if j not in prev_kf.point_of]

        inlier_pairs = np.zeros((0, 2), dtype=int)
        if frame.pose_prior is not None and len(self.map.keyframes) < 2:
            pose = frame.pose_prior
            fixed = True
        else:
            fixed = False
            if len(tracked) < cfg.min_reloc_inliers:
                raise TrackingLost(f"frame {frame.index}: {len(tracked)} map points tracked")
            t_idx = np.array(tracked)
            X = self.map.positions(t_idx[:, 1])
            try:
                res = solve_pnp(X, cur_uv[t_idx[:, 0]], K, self._predict(prev_kf.id), cfg.eps_inlier,
                                cfg.huber_delta, cfg.max_gn_iters)
            except (Degenerate, Diverged, DepthNonPositive) as e:
                raise TrackingLost(f"frame {frame.index}: {e}") from e
            if res.inliers.sum() < cfg.min_reloc_inliers:
                raise TrackingLost(f"frame {frame.index}: {int(res.inliers.sum())} PnP inliers")
            pose = res.pose
            inlier_pairs = t_idx[res.inliers]
        log.pose = pose
        log.inliers = len(inlier_pairs)

        kf = self.map.add_keyframe(pose, kps, self._labels(frame, pose), frame.index)
        if fixed:
            self.fixed.add(kf.id)
        for i, pid in inlier_pairs:
            if self.map.points[pid].observed_in(kf.id) is None:
                self.map.add_observation(int(pid), kf.id, int(i))
        if fresh:
            fi = np.array(fresh)
            Xs, status = triangulate_many(prev_uv[fi[:, 1]], prev_kf.pose, cur_uv[fi[:, 0]], pose, K,
                                          cfg.eps_inlier, cfg.min_angle_deg)
            for (i, j), X, st in zip(fresh, Xs, status):
                if st == TRI_OK:
                    self.map.add_point(X, kps[i].descriptor, [(prev_kf.id, int(j)), (kf.id, int(i))])
                    log.new_points += 1

        window = sorted(self.map.keyframes)[-cfg.ba_window:]
        if len(self.map.keyframes) > 1:
            try:
                local_bundle_adjust(self.map, window, cfg, fixed=self.fixed)
            except Diverged:
                pass   # keep the unrefined estimate; the next window revisits it
            self._cull(window)
        pairs_now = np.array([(idx, pid) for idx, pid in sorted(kf.point_of.items())], dtype=int).reshape(-1, 2)
        self._boxes(kf, pairs_now)
        self._finish_frame(frame, log)
        return log

    @staticmethod
    def _labels(frame: FrameInput, pose: Pose) -> list:
        if frame.relabel is None:
            return frame.boxes
        boxes = list(frame.relabel(pose))
        if len(boxes) != len(frame.boxes):
            raise ValueError("relabel must keep one box per input box")
        return boxes

    def _finish_frame(self, frame: FrameInput, log: FrameLog) -> None:
        self.prev = frame
        self.logs.append(log)

    def _cull(self, window) -> None:
        """Drop points that reproject badly in any window keyframe after adjustment."""
        K = self.map.intrinsics
        limit = 2.0 * self.cfg.eps_inlier
        for k in window:
            kf = self.map.keyframes[k]
            if not kf.point_of:
                continue
            idx = np.array(sorted(kf.point_of))
            pids = [kf.point_of[i] for i in idx]
            Xc = kf.pose.apply(self.map.positions(pids))
            bad = Xc[:, 2] <= 1e-6
            ok = ~bad
            err = np.zeros(len(pids))
            err[ok] = np.linalg.norm(project_points(Xc[ok], K) - kf.uv()[idx[ok]], axis=1)
            for pid, b, e in zip(pids, bad, err):
                if (b or e > limit) and pid in self.map.points:
                    self.map.remove_point(pid)
        for pid in [p for p, mp in self.map.points.items() if len(mp.observations) < 2]:
            self.map.remove_point(pid)

    def _boxes(self, kf, pairs: np.ndarray) -> None:
        """Link this frame's IPC-candidate boxes to 3D candidates and tag their points."""
        cfg = self.cfg
        cand = [j for j, b in enumerate(kf.boxes2d) if b.category == Category.IPC_CANDIDATE]
        if not cand:
            return
        uv = kf.uv()[pairs[:, 0]] if len(pairs) else np.zeros((0, 2))
        tags = self.map.tags(pairs[:, 1]) if len(pairs) else np.zeros(0, dtype=int)
        ids = [b.id for b in self.map.candidates()]
        linked = {j: bid for bid, j in associate_boxes(uv, tags, [kf.boxes2d[j] for j in cand], ids, cfg.delta_obj)}
        linked = {cand[j]: bid for j, bid in linked.items()}
        for j in cand:
            center, extents = _footprint_box(kf.boxes2d[j], self.map, kf.pose, self.footprint_height)
            bid = linked.get(j)
            if bid is None:
                near = [(np.linalg.norm(b.center[:2] - center[:2]), b.id) for b in self.map.candidates()]
                near = [n for n in near if n[0] <= cfg.box_merge_radius]
                bid = min(near)[1] if near else None
            if bid is None:
                box = BoundingBox3D(center, extents, 0.0, Category.IPC_CANDIDATE, BoxState.CANDIDATE,
                                    self._next_box, kf.frame, kf.frame)
                self._next_box += 1
                self.map.boxes3d[box.id] = box
                bid = box.id
            box = self.map.boxes3d[bid]
            box.last_seen = max(box.last_seen, kf.frame)
            self.box_frames.setdefault(bid, set()).add(kf.frame)
            for i, kp in enumerate(kf.keypoints):
                pid = kf.point_of.get(i)
                if pid is None or kp.box_tag != j:
                    continue
                mp = self.map.points[pid]
                if mp.box3d_tag is None and mp.position[2] > cfg.min_tag_height:
                    mp.box3d_tag = bid

    def finish(self) -> WorldMap:
        """Drop candidates seen too rarely and centre the rest on their tagged points.

        A candidate with no more than ``delta_obj`` tagged points could never pass
        association later, so it carries no static structure worth keeping; this
        is what removes moving cars whose flow was mistaken for ego-motion.
        """
        tagged = {}
        for mp in self.map.points.values():
            if mp.box3d_tag is not None:
                tagged[mp.box3d_tag] = tagged.get(mp.box3d_tag, 0) + 1
        for bid in sorted(self.map.boxes3d):
            if (len(self.box_frames.get(bid, ())) < self.cfg.min_candidate_frames
                    or tagged.get(bid, 0) <= self.cfg.delta_obj):
                for mp in self.map.points.values():
                    if mp.box3d_tag == bid:
                        mp.box3d_tag = None
                del self.map.boxes3d[bid]
        for bid, box in sorted(self.map.boxes3d.items()):
            P = np.array([mp.position for mp in self.map.points.values() if mp.box3d_tag == bid]).reshape(-1, 3)
            if len(P) >= 5:
                # corners cluster on the outline, so take the middle of the robust extent
                lo, hi = np.percentile(P[:, :2], [10, 90], axis=0)
                box.center = np.array([*(lo + hi) / 2, box.center[2]])
        return self.map


class Investigator:
    """Localizes investigation frames in a fixed map and re-identifies candidates."""

    def __init__(self, wmap: WorldMap, cfg: SlamConfig | None = None):
        self.map = wmap
        self.cfg = cfg or SlamConfig()
        self.rng = np.random.default_rng(self.cfg.seed)
        self.poses: list[Pose] = []
        self.logs: list[FrameLog] = []
        self.associations: list = []
        self.failures = 0

    def _predict(self) -> Pose | None:
        if not self.poses:
            return None
        if len(self.poses) >= 2:
            delta = self.poses[-1].compose(self.poses[-2].inverse())
            return delta.compose(self.poses[-1])
        return self.poses[-1]

    def _track(self, kps, pred: Pose, radius: float):
        cfg = self.cfg
        K = self.map.intrinsics
        pids = np.array(self.map.point_ids())
        X = self.map.positions(pids)
        Xc = pred.apply(X)
        front = Xc[:, 2] > 1e-3
        pids, X, Xc = pids[front], X[front], Xc[front]
        proj = project_points(Xc, K)
        margin = 2 * cfg.search_radius
        vis = (proj[:, 0] > -margin) & (proj[:, 0] < K.width + margin) & \
              (proj[:, 1] > -margin) & (proj[:, 1] < K.height + margin)
        pids, X, proj = pids[vis], X[vis], proj[vis]
        uv = np.array([k.position for k in kps]).reshape(-1, 2)
        ii, jj = _radius_pairs(uv, proj, radius)
        usable = np.array([not kps[i].excluded for i in ii], dtype=bool).reshape(-1)
        pairs = match_candidates(descriptor_matrix(kps), self.map.descriptors(pids), ii[usable], jj[usable],
                                 cfg.ratio_test)
        if len(pairs) < cfg.min_reloc_inliers:
            raise TrackingLost(f"{len(pairs)} projected matches")
        try:
            res = solve_pnp(X[pairs[:, 1]], uv[pairs[:, 0]], K, pred, cfg.eps_inlier, cfg.huber_delta,
                            cfg.max_gn_iters)
        except (Degenerate, Diverged, DepthNonPositive) as e:
            raise TrackingLost(str(e)) from e
        if res.inliers.sum() < cfg.min_reloc_inliers:
            raise TrackingLost(f"{int(res.inliers.sum())} PnP inliers")
        return res.pose, np.column_stack([pairs[res.inliers, 0], pids[pairs[res.inliers, 1]]]), len(pairs)

    def process(self, frame: FrameInput) -> FrameLog:
        cfg = self.cfg
        parked = [b for b in frame.boxes if b.category != Category.MC]
        kps = extract_keypoints(frame.image, frame.boxes)
        log = FrameLog(frame.index, None, keypoints=len(kps))
        pred = self._predict()
        result = None
        if pred is not None:
            try:
                # without a velocity estimate the prediction is only the last pose
                radius = 2 * cfg.guided_radius if len(self.poses) >= 2 else cfg.search_radius
                result = self._track(kps, pred, radius)
            except TrackingLost:
                result = None
        if result is None:
            try:
                rel = relocalize(kps, self.map, cfg, self.rng)
            except RelocalizationFailed:
                if not self.poses:
                    raise
                self.failures += 1
                self.logs.append(log)
                return log
            result = (rel.pose, rel.inliers, len(rel.inliers))
            log.relocalized = True
        pose, inliers, log.matches = result
        log.pose = pose
        log.inliers = len(inliers)
        self.poses.append(pose)
        uv = np.array([kps[i].position for i in inliers[:, 0]]).reshape(-1, 2)
        tags = self.map.tags(inliers[:, 1])
        ids = [b.id for b in self.map.candidates()]
        pairs = associate_boxes(uv, tags, parked, ids, cfg.delta_obj)
        log.associations = pairs
        self.associations.append((frame.index, pairs))
        self.logs.append(log)
        return log

    def finish(self) -> WorldMap:
        return reidentify(self.map, self.associations, self.cfg.n_confirm)
