import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pvdrone.core import BoundingBox2D, Category, iou
from pvdrone.detect import (
    DetectConfig,
    Detection,
    DomainError,
    EmptyBox,
    FlowStats,
    InsufficientBackground,
    classify_box,
    ego_flow_estimate,
    evaluate_map,
    flow_stats,
    focal_loss,
    propose_boxes,
    read_detections,
    write_detections,
)
from pvdrone.flow import FlowField
from pvdrone.synthworld.render import render_frame
from pvdrone.synthworld.scene import SceneParams, generate_scene

# ---------------------------------------------------------------- proposals


@pytest.fixture(scope="module")
def three_car_frame():
    s = generate_scene(21, SceneParams(n_mc=1, n_lpc=1, n_ipc=1))
    return s, render_frame(s, s.suspicion_times[5])


def test_zero_jitter_returns_truth(three_car_frame):
    _, f = three_car_frame
    props = propose_boxes(f.image, f.gt_boxes, DetectConfig(jitter=0.0))
    assert [p.as_list() for p in props] == [b.as_list() for b in f.gt_boxes]
    assert all(p.score == 1.0 and p.category is None for p in props)


def test_empty_scene_has_no_proposals():
    assert propose_boxes(np.zeros((20, 20)), [], DetectConfig()) == []


def test_jittered_proposals_overlap_truth(three_car_frame):
    _, f = three_car_frame
    assert len(f.gt_boxes) == 3
    for seed in range(20):
        props = propose_boxes(f.image, f.gt_boxes, DetectConfig(jitter=0.1), np.random.default_rng(seed))
        assert len(props) == 3
        for p, b in zip(props, f.gt_boxes):
            assert iou(p, b) >= 0.7
            assert 0.95 <= p.score <= 1.0


def test_blob_mode_finds_bright_square():
    img = np.zeros((60, 80))
    img[20:35, 30:50] = 1.0
    props = propose_boxes(img, None, DetectConfig(proposal_mode="blob"))
    assert any(iou(p, BoundingBox2D(29.5, 19.5, 49.5, 34.5)) > 0.5 for p in props)


# ---------------------------------------------------------------- flow statistics

def test_ego_flow_constant_background():
    F = FlowField.constant((30, 40), 3, 1)
    np.testing.assert_allclose(ego_flow_estimate(F), [3, 1])


def test_ego_flow_median_resists_outliers():
    rng = np.random.default_rng(0)
    F = FlowField.constant((30, 40), 3, 1)
    out = rng.random(F.shape) < 0.3
    F.du[out] = 50
    F.dv[out] = 50
    np.testing.assert_allclose(ego_flow_estimate(F), [3, 1])


def test_ego_flow_needs_background():
    F = FlowField.constant((30, 40), 3, 1)
    with pytest.raises(InsufficientBackground):
        ego_flow_estimate(F, [BoundingBox2D(-0.5, -0.5, 39.5, 27.5)])


def test_flow_stats_residual():
    F = FlowField.constant((30, 40), 3, 1)
    box = BoundingBox2D(10, 5, 20, 15)
    assert flow_stats(F, box, (3, 1)).residual_mag == 0
    F.du[5:16, 10:21] += 6
    F.dv[5:16, 10:21] += 8
    st_ = flow_stats(F, box, (3, 1))
    assert st_.residual_mag == pytest.approx(10.0)
    assert st_.coverage == 1.0
    F.valid[:] = False
    with pytest.raises(EmptyBox):
        flow_stats(F, box, (3, 1))


# ---------------------------------------------------------------- classification

def stats(residual):
    return FlowStats(residual, residual, 0.0, residual, 1.0)


def test_classify_rules(three_car_frame):
    s, f = three_car_frame
    K = s.intrinsics.scaled(4.0)  # thresholds are stated at 960 px width
    spot = np.array(s.parking_spots[5])
    cfg = DetectConfig()
    # a box whose footprint lies inside the chosen spot, seen from straight above
    from pvdrone.core import Pose, nadir_rotation, project
    centre = spot.mean(axis=0)
    pose = Pose.from_camera_center(nadir_rotation(0.0), [centre[0], centre[1], 20.0])
    inner = np.array([[centre[0] - 0.8, centre[1] - 2.0, 0.75], [centre[0] + 0.8, centre[1] + 2.0, 0.75]])
    uv = project(pose.apply(inner), K)
    box = BoundingBox2D(uv[:, 0].min(), uv[:, 1].min(), uv[:, 0].max(), uv[:, 1].max())
    assert classify_box(box, stats(12.0), s.parking_spots, cfg, K, pose).category == Category.MC
    d = classify_box(box, stats(0.0), s.parking_spots, cfg, K, pose)
    assert d.category == Category.LPC and d.overlap == pytest.approx(1.0)
    far = Pose.from_camera_center(nadir_rotation(0.0), [centre[0], centre[1] - 12.0, 20.0])
    d = classify_box(box, stats(0.0), s.parking_spots, cfg, K, far)
    assert d.category == Category.IPC_CANDIDATE and d.overlap == 0.0


def test_classification_invariant_to_common_flow_offset(three_car_frame):
    s, f = three_car_frame
    rng = np.random.default_rng(5)
    F = FlowField(rng.normal(0, 1, f.image.shape), rng.normal(0, 1, f.image.shape), np.ones(f.image.shape, bool))
    for b in f.gt_boxes:
        F.du[b.contains(*np.meshgrid(np.arange(F.shape[1]), np.arange(F.shape[0])))] += 4.0
    cfg = DetectConfig()
    base = [classify_box(b, flow_stats(F, b, ego_flow_estimate(F, f.gt_boxes)), s.parking_spots, cfg,
                         s.intrinsics, f.pose).category for b in f.gt_boxes]
    for _ in range(10):
        c = rng.uniform(-20, 20, 2)
        G = FlowField(F.du + c[0], F.dv + c[1], F.valid)
        got = [classify_box(b, flow_stats(G, b, ego_flow_estimate(G, f.gt_boxes)), s.parking_spots, cfg,
                            s.intrinsics, f.pose).category for b in f.gt_boxes]
        assert got == base


def test_classification_of_rendered_frame(three_car_frame):
    from pvdrone.detect import classify_frame
    s, f = three_car_frame
    labelled = classify_frame(f.gt_flow, f.gt_boxes, s.parking_spots, DetectConfig(), s.intrinsics, f.pose)
    assert [b.category for b in labelled] == [b.category for b in f.gt_boxes]
    assert all(0 < b.score <= 1 for b in labelled)


# ---------------------------------------------------------------- focal loss

def test_focal_examples():
    assert focal_loss(1.0) == 0.0
    assert focal_loss(0.3, gamma=0.0, alpha=1.0) == pytest.approx(-math.log(0.3))
    assert focal_loss(0.9, 2.0, 0.25) == pytest.approx(0.25 * 0.01 * 0.105360515657826, rel=1e-12)
    assert focal_loss(0.9, 2.0, 0.25) == pytest.approx(2.634e-4, rel=1e-3)
    with pytest.raises(DomainError):
        focal_loss(0.0)


@given(st.floats(1e-6, 0.999), st.floats(1e-6, 0.999), st.floats(0.01, 5), st.floats(0.01, 1))
def test_focal_monotone_and_bounded(p, q, gamma, alpha):
    lo, hi = sorted((p, q))
    assert focal_loss(lo, gamma, alpha) >= focal_loss(hi, gamma, alpha)
    assert focal_loss(p, gamma, alpha) <= alpha * -math.log(p)


# ---------------------------------------------------------------- mAP

def det(frame, box, cat, score=1.0):
    return Detection(frame, BoundingBox2D(*box, category=cat, score=score))


def test_map_perfect_and_empty():
    gt = [det(0, (0, 0, 10, 10), Category.MC), det(0, (20, 20, 30, 35), Category.LPC),
          det(1, (5, 5, 9, 9), Category.IPC)]
    assert evaluate_map(gt, gt)["mAP"] == 1.0
    assert evaluate_map([], gt)["mAP"] == 0.0


def test_map_half_recall_example():
    gt = [det(0, (0, 0, 10, 10), Category.LPC), det(0, (40, 40, 50, 50), Category.LPC)]
    dets = [det(0, (0, 0, 10, 10), Category.LPC, 0.9), det(0, (100, 100, 110, 110), Category.LPC, 0.8)]
    r = evaluate_map(dets, gt)
    assert r["mAP"] == 0.5
    assert set(r["per_threshold"]["LPC"].values()) == {0.5}


def test_map_ipc_folded_into_candidates():
    gt = [det(0, (0, 0, 10, 10), Category.IPC)]
    assert evaluate_map([det(0, (0, 0, 10, 10), Category.IPC_CANDIDATE)], gt)["mAP"] == 1.0


def test_map_threshold_sweep():
    # IoU 0.8 counts for 7 of the 10 thresholds (0.50 .. 0.80)
    gt = [det(0, (0, 0, 10, 10), Category.MC)]
    r = evaluate_map([det(0, (0, 0, 10, 8), Category.MC)], gt)
    assert r["mAP"] == pytest.approx(0.7)


def test_detections_jsonl_round_trip(tmp_path):
    dets = [det(3, (1.5, 2, 10, 12), Category.MC, 0.75), det(4, (0, 0, 5, 5), Category.IPC_CANDIDATE, 0.5)]
    path = tmp_path / "d.jsonl"
    write_detections(path, dets)
    lines = path.read_text().splitlines()
    assert set(eval_keys(lines[0])) == {"frame", "box", "category", "score"}
    assert read_detections(path) == dets


def eval_keys(line):
    import json
    return json.loads(line).keys()
