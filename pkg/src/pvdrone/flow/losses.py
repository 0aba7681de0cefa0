"""Unsupervised flow objectives, evaluated as functionals of a flow estimate."""
from __future__ import annotations

import numpy as np

from ..core import PvdError
from .field import FlowField
from .matching import bilinear_sample

CHARBONNIER_EPS = 0.001
CHARBONNIER_Q = 0.45
OCC_ALPHA1 = 0.01
OCC_ALPHA2 = 0.5
EDGE_BETA = 10.0


class EmptyMask(PvdError):
    """No pixel is left to average over."""


def charbonnier(x, eps: float = CHARBONNIER_EPS, q: float = CHARBONNIER_Q):
    return (np.square(x) + eps * eps) ** q


def loss_floor(eps: float = CHARBONNIER_EPS, q: float = CHARBONNIER_Q) -> float:
    """Value of every Charbonnier loss at zero residual."""
    return eps ** (2 * q)


def _targets(flow: FlowField):
    h, w = flow.shape
    v, u = np.mgrid[0:h, 0:w]
    return u + flow.du, v + flow.dv


def occlusion_mask(F_fw: FlowField, F_bw: FlowField, alpha1: float = OCC_ALPHA1,
                   alpha2: float = OCC_ALPHA2) -> np.ndarray:
    """Forward-backward consistency check; True marks occluded pixels."""
    if F_fw.shape != F_bw.shape:
        raise ValueError("flow fields differ in size")
    x, y = _targets(F_fw)
    (bu, bv), _ = bilinear_sample(np.stack([F_bw.du, F_bw.dv]), x, y)
    lhs = (F_fw.du + bu) ** 2 + (F_fw.dv + bv) ** 2
    rhs = alpha1 * (F_fw.du ** 2 + F_fw.dv ** 2 + bu ** 2 + bv ** 2) + alpha2
    return lhs > rhs


def photometric_loss(I_t, I_t1, F: FlowField, occluded=None) -> float:
    """Mean Charbonnier brightness difference after warping ``I_t1`` by ``F``.

    Pixels flagged in ``occluded``, invalid in ``F`` or sampling outside the
    second image are left out.
    """
    I_t = np.asarray(I_t, dtype=np.float64)
    I_t1 = np.asarray(I_t1, dtype=np.float64)
    if I_t.shape != I_t1.shape or I_t.shape != F.shape:
        raise ValueError("images and flow differ in size")
    x, y = _targets(F)
    warped, inside = bilinear_sample(I_t1, x, y)
    keep = inside & F.valid
    if occluded is not None:
        keep &= ~np.asarray(occluded, dtype=bool)
    if not keep.any():
        raise EmptyMask("no pixel survives the occlusion and validity masks")
    return float(charbonnier(I_t - warped)[keep].mean())


def smoothness_loss(F: FlowField, I, beta: float = EDGE_BETA) -> float:
    """Edge-aware first-order smoothness.

    Forward differences of each flow component, weighted per axis by
    ``exp(-beta |dI|)`` and averaged separately along x and y.
    """
    I = np.asarray(I, dtype=np.float64)
    if I.shape != F.shape:
        raise ValueError("image and flow differ in size")
    total = 0.0
    for axis in (1, 0):
        if I.shape[axis] < 2:
            continue
        w = np.exp(-beta * np.abs(np.diff(I, axis=axis)))
        g = np.abs(np.diff(F.du, axis=axis)) + np.abs(np.diff(F.dv, axis=axis))
        total += float((w * g).mean())
    return total


def self_supervision_loss(F_student: FlowField, F_teacher: FlowField, mask=None) -> float:
    """Mean Charbonnier distance between two flow fields over ``mask``."""
    if F_student.shape != F_teacher.shape:
        raise ValueError("flow fields differ in size")
    keep = np.ones(F_student.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not keep.any():
        raise EmptyMask("self-supervision mask is empty")
    d = np.hypot(F_student.du - F_teacher.du, F_student.dv - F_teacher.dv)
    return float(charbonnier(d)[keep].mean())


def crop_flow(F: FlowField, box) -> FlowField:
    """Restrict a field to ``box = (x0, y0, x1, y1)``, half-open pixel bounds."""
    x0, y0, x1, y1 = box
    return FlowField(F.du[y0:y1, x0:x1], F.dv[y0:y1, x0:x1], F.valid[y0:y1, x0:x1])


def teacher_student_loss(I_t, I_t1, box, estimate, cfg=None) -> float:
    """Self-supervision between a full-frame estimate and one made on a crop.

    The teacher sees the whole frame; the student only the crop, so it lacks
    context at the crop border. Pixels where either estimate is invalid are
    ignored.
    """
    x0, y0, x1, y1 = box
    teacher = crop_flow(estimate(I_t, I_t1, cfg), box)
    student = estimate(np.asarray(I_t)[y0:y1, x0:x1], np.asarray(I_t1)[y0:y1, x0:x1], cfg)
    return self_supervision_loss(student, teacher, student.valid & teacher.valid)


def lambda_schedule(progress: float, cfg=None) -> tuple[float, float, float]:
    """Loss weights over training progress in [0, 1].

    The self-supervision weight is off for the first half, ramps linearly
    to its maximum over the next tenth and then holds.
    """
    if not 0.0 <= progress <= 1.0:
        raise ValueError("progress must lie in [0, 1]")
    photo = 1.0 if cfg is None else cfg.lambda_photo
    smooth = 2.0 if cfg is None else cfg.lambda_smooth
    top = 0.3 if cfg is None else cfg.lambda_self_max
    ramp = min(max((progress - 0.5) / 0.1, 0.0), 1.0)
    return photo, smooth, top * ramp


def total_loss(components, weights) -> float:
    photo, smooth, self_sup = components
    if not np.all(np.isfinite([photo, smooth, self_sup])):
        raise ValueError("loss components must be finite")
    w_photo, w_smooth, w_self = weights
    return w_photo * photo + w_smooth * smooth + w_self * self_sup
