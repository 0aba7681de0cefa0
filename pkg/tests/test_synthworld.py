import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pvdrone.core import Category, project
from pvdrone.flow.matching import bilinear_sample
from pvdrone.synthworld.render import render_frame, render_image
from pvdrone.synthworld.scene import (
    InfeasiblePlacement,
    SceneModel,
    SceneParams,
    TimeOutOfRange,
    generate_scene,
    spot_overlap,
)

LPC_MIN_OVERLAP = 0.7


def counts(scene):
    out = {}
    for c in scene.cars:
        out[c.category] = out.get(c.category, 0) + 1
    return out


def test_category_counts():
    s = generate_scene(7, SceneParams(n_mc=1, n_lpc=1, n_ipc=1))
    assert counts(s) == {Category.MC: 1, Category.LPC: 1, Category.IPC: 1}


def test_same_seed_same_scene():
    p = SceneParams(n_mc=2, n_lpc=2, n_ipc=2)
    assert generate_scene(11, p).to_json() == generate_scene(11, p).to_json()
    assert generate_scene(11, p).to_json() != generate_scene(12, p).to_json()


def test_empty_scene():
    s = generate_scene(3, SceneParams(n_mc=0, n_lpc=0, n_ipc=0))
    assert s.cars == []
    times = [t for t, _ in s.trajectory]
    assert all(b > a for a, b in zip(times, times[1:]))


def test_json_round_trip():
    s = generate_scene(5, SceneParams(n_mc=1, n_lpc=2, n_ipc=1, n_ipc_departing=1))
    text = s.to_json()
    assert SceneModel.from_json(text).to_json() == text
    d = s.to_dict()
    for key in ("ground_plane_texture_seed", "parking_spots", "cars", "trajectory", "intrinsics"):
        assert key in d
    assert {"footprint", "height", "category", "motion"} <= set(d["cars"][0])


def test_overcrowded_street_is_infeasible():
    with pytest.raises(InfeasiblePlacement):
        generate_scene(0, SceneParams(n_ipc=12, max_retries=20))


def test_time_out_of_range():
    s = generate_scene(0)
    with pytest.raises(TimeOutOfRange):
        render_frame(s, -1.0)


@settings(max_examples=25)
@given(st.integers(0, 10_000))
def test_labels_match_geometry(seed):
    try:
        s = generate_scene(seed, SceneParams(n_mc=1, n_lpc=2, n_ipc=2, n_tall=1))
    except InfeasiblePlacement:
        return
    for car in s.cars:
        f = spot_overlap(car.footprint(), s.parking_spots)
        if car.category == Category.LPC:
            assert f >= LPC_MIN_OVERLAP
        elif car.category == Category.IPC:
            assert f < LPC_MIN_OVERLAP


def test_hovering_camera_sees_no_motion():
    s = generate_scene(2, SceneParams(speed=0.0, n_mc=0))
    f = render_frame(s, s.suspicion_times[1])
    np.testing.assert_allclose(f.gt_flow.du[f.gt_flow.valid], 0.0, atol=1e-9)
    np.testing.assert_allclose(f.gt_flow.dv[f.gt_flow.valid], 0.0, atol=1e-9)


def test_translation_over_empty_ground_is_uniform():
    p = SceneParams(n_mc=0, n_lpc=0, n_ipc=0)
    s = generate_scene(4, p)
    f = render_frame(s, s.suspicion_times[2])
    # ground moves opposite to the camera: fx * dx / Z
    expect = -s.intrinsics.fx * p.speed / p.fps / p.altitude
    v = f.gt_flow.valid
    assert v.mean() > 0.9
    np.testing.assert_allclose(f.gt_flow.du[v], expect, atol=1e-9)
    np.testing.assert_allclose(f.gt_flow.dv[v], 0.0, atol=1e-9)


def test_moving_car_flow_against_projection():
    s = generate_scene(9, SceneParams(speed=0.0, n_mc=1, n_lpc=0, n_ipc=0))
    car = s.cars[0]
    t = s.suspicion_times[len(s.suspicion_times) // 2]
    f = render_frame(s, t)
    roof = (f.surface > 0) & ((f.surface - 1) % 6 == 5) & f.gt_flow.valid
    assert roof.sum() > 20
    expect = s.intrinsics.fx * car.velocity[0] * s.frame_dt / (s.params.altitude - car.height)
    np.testing.assert_allclose(f.gt_flow.du[roof], expect, rtol=1e-9)
    ground = (f.surface == 0) & f.gt_flow.valid
    np.testing.assert_allclose(f.gt_flow.du[ground], 0.0, atol=1e-9)
    assert abs(expect) > 2.0


@pytest.mark.parametrize("seed", [0, 1])
def test_brightness_constancy(seed):
    s = generate_scene(seed, SceneParams(n_mc=2, n_lpc=2, n_ipc=2))
    f = render_frame(s, s.suspicion_times[3])
    nxt = render_image(s, s.suspicion_times[4])
    h, w = f.image.shape
    v, u = np.mgrid[0:h, 0:w]
    warped, _ = bilinear_sample(nxt, u + f.gt_flow.du, v + f.gt_flow.dv)
    err = np.abs(warped - f.image)[f.gt_flow.valid]
    assert err.max() <= 0.02


def test_tracks_reproject_exactly():
    s = generate_scene(6, SceneParams(n_mc=1, n_lpc=2, n_ipc=1))
    f = render_frame(s, s.suspicion_times[5])
    K = s.intrinsics
    assert len(f.gt_tracks) > 50
    for tr in f.gt_tracks:
        uv = project(f.pose.apply(tr.world), K)
        np.testing.assert_allclose(uv, tr.uv, atol=1e-6)
        assert 0 <= uv[0] <= K.width - 1 and 0 <= uv[1] <= K.height - 1


def test_ipc_is_candidate_before_investigation():
    s = generate_scene(8, SceneParams(n_mc=0, n_lpc=0, n_ipc=1))
    f = render_frame(s, s.suspicion_times[5])
    assert [b.category for b in f.gt_boxes] == [Category.IPC_CANDIDATE]
    g = render_frame(s, s.investigation_times[3])
    assert [b.category for b in g.gt_boxes] == [Category.IPC]
