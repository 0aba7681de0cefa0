from __future__ import annotations

import numpy as np

from .field import FlowField


def outliers(F: FlowField, F_gt: FlowField) -> np.ndarray:
    """Outlier rule: error above 3 px and above 5% of the true magnitude."""
    epe = np.hypot(F.du - F_gt.du, F.dv - F_gt.dv)
    return (epe > 3.0) & (epe > 0.05 * F_gt.magnitude)


def flow_metrics(F: FlowField, F_gt: FlowField, valid=None, occluded=None) -> dict:
    """Endpoint error and outlier percentages.

    ``valid`` marks pixels with ground truth (default ``F_gt.valid``);
    ``f1_all`` counts outliers over all of them, ``out_noc`` only over those
    not flagged in ``occluded``. Percentages are in [0, 100].
    """
    if F.shape != F_gt.shape:
        raise ValueError("flow fields differ in size")
    valid = F_gt.valid if valid is None else np.asarray(valid, dtype=bool)
    noc = valid if occluded is None else valid & ~np.asarray(occluded, dtype=bool)
    epe = np.hypot(F.du - F_gt.du, F.dv - F_gt.dv)
    bad = outliers(F, F_gt)

    def pct(mask):
        return 100.0 * float(bad[mask].mean()) if mask.any() else 0.0

    return {
        "epe_mean": float(epe[valid].mean()) if valid.any() else 0.0,
        "f1_all": pct(valid),
        "out_noc": pct(noc),
    }
