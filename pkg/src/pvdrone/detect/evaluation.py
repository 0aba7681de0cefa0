"""Average precision over the 0.50:0.95 IoU sweep and detection files."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ..core import BoundingBox2D, Category, iou_matrix

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))
MAP_CLASSES = (Category.MC, Category.LPC, Category.IPC_CANDIDATE)


@dataclass(frozen=True)
class Detection:
    frame: int
    box: BoundingBox2D

    @property
    def category(self) -> Category:
        return self.box.category

    def to_dict(self) -> dict:
        return {"frame": self.frame, "box": self.box.as_list(), "category": self.category.value,
                "score": self.box.score}

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(int(d["frame"]), BoundingBox2D(*map(float, d["box"]), category=d["category"],
                                                  score=float(d.get("score", 1.0))))


def fold_ipc(category: Category) -> Category:
    """Confirmed IPCs count as IPC candidates for detection scoring."""
    return Category.IPC_CANDIDATE if category == Category.IPC else Category(category)


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the all-point interpolated precision envelope."""
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    step = np.nonzero(r[1:] != r[:-1])[0]
    return float(np.sum((r[step + 1] - r[step]) * p[step + 1]))


def _match(dets: list[Detection], gts: list[Detection], thr: float):
    """Greedy score-ordered matching; returns TP flags in score order."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].box.score)  # stable on ties
    by_frame: dict[int, list[int]] = {}
    for j, g in enumerate(gts):
        by_frame.setdefault(g.frame, []).append(j)
    taken = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        cands = by_frame.get(dets[i].frame, [])
        if not cands:
            continue
        ious = iou_matrix([dets[i].box], [gts[j].box for j in cands])[0]
        best, best_iou = -1, thr
        for j, o in zip(cands, ious):
            if not taken[j] and o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = j, o
        if best >= 0:
            taken[best] = True
            tp[rank] = True
    return tp


def class_ap(dets: list[Detection], gts: list[Detection], thr: float) -> float:
    if not gts:
        return 0.0
    tp = _match(dets, gts, thr)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / len(gts)
    precision = ctp / np.arange(1, len(tp) + 1)
    return average_precision(recall, precision)


def evaluate_map(detections, ground_truth, thresholds=IOU_THRESHOLDS) -> dict:
    """mAP over classes that have ground truth and over all IoU thresholds.

    ``detections`` and ``ground_truth`` are sequences of ``Detection``; IPC
    labels on either side are folded into IPC candidates first.
    """
    dets = [Detection(d.frame, d.box.with_category(fold_ipc(d.category))) for d in detections]
    gts = [Detection(g.frame, g.box.with_category(fold_ipc(g.category))) for g in ground_truth]
    per_class = {}
    for c in MAP_CLASSES:
        g = [x for x in gts if x.category == c]
        if not g:
            continue
        d = [x for x in dets if x.category == c]
        per_class[c.value] = {f"{t:.2f}": class_ap(d, g, t) for t in thresholds}
    ap = {c: float(np.mean(list(v.values()))) for c, v in per_class.items()}
    return {"mAP": float(np.mean(list(ap.values()))) if ap else 0.0, "per_class": ap,
            "per_threshold": per_class}


def write_detections(path, detections) -> None:
    with open(path, "w") as f:
        for d in detections:
            f.write(json.dumps(d.to_dict(), sort_keys=True) + "\n")


def read_detections(path) -> list[Detection]:
    with open(path) as f:
        return [Detection.from_dict(json.loads(line)) for line in f if line.strip()]
