import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_pose
from pvdrone.core import (
    BoundingBox2D,
    BoundingBox3D,
    CameraIntrinsics,
    Category,
    DepthNonPositive,
    Pose,
    iou,
    project,
    so3_exp,
    so3_log,
    transform_point,
    unproject,
    unproject_to_plane,
)

K100 = CameraIntrinsics(fx=100, fy=100, cx=50, cy=50, width=101, height=101)


def test_project_principal_axis():
    np.testing.assert_allclose(project([0, 0, 5], K100), [50, 50])


def test_project_offset_point():
    # u = 100 * 1/5 + 50
    np.testing.assert_allclose(project([1, 0, 5], K100), [70, 50])


@pytest.mark.parametrize("z", [-1.0, 0.0, 1e-10])
def test_project_behind_camera(z):
    with pytest.raises(DepthNonPositive):
        project([0, 0, z], K100)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=-1, fy=1, cx=0, cy=0, width=10, height=10)
    with pytest.raises(ValueError):
        CameraIntrinsics(fx=1, fy=1, cx=10, cy=0, width=10, height=10)


def test_scaled_intrinsics_keep_pixel_centres():
    K = CameraIntrinsics(800, 800, 479.5, 269.5, 960, 540).scaled(0.25)
    assert (K.width, K.height) == (240, 135)
    assert K.cx == pytest.approx(119.5) and K.cy == pytest.approx(67.0)


def test_transform_identity_and_translation():
    np.testing.assert_allclose(transform_point(Pose.identity(), [1, 2, 3]), [1, 2, 3])
    P = Pose((1, 0, 0, 0), (0, 0, 1))
    np.testing.assert_allclose(transform_point(P, [0, 0, 0]), [0, 0, 1])


def test_transform_yaw_90():
    c = math.cos(math.pi / 4)
    P = Pose((c, 0, 0, c), (0, 0, 0))
    np.testing.assert_allclose(transform_point(P, [1, 0, 0]), [0, 1, 0], atol=1e-12)


def test_iou_examples():
    a = BoundingBox2D(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, BoundingBox2D(20, 20, 30, 30)) == 0.0
    assert iou(a, BoundingBox2D(5, 0, 15, 10)) == pytest.approx(50 / 150)


def test_box_validation():
    with pytest.raises(ValueError):
        BoundingBox2D(5, 0, 5, 10)
    with pytest.raises(ValueError):
        BoundingBox2D(0, 0, 1, 1, score=1.5)
    with pytest.raises(ValueError):
        BoundingBox3D((0, 0, 0), (1, 0, 1), 0.0, Category.IPC_CANDIDATE, "Candidate", 0)


def test_box_dict_round_trip():
    b = BoundingBox2D(1.5, 2, 30, 40, Category.LPC, 0.7)
    assert BoundingBox2D.from_dict(b.to_dict()) == b


@given(st.integers(0, 2**31 - 1))
def test_compose_inverse_is_identity(seed):
    rng = np.random.default_rng(seed)
    P = random_pose(rng)
    Q = P.compose(P.inverse())
    np.testing.assert_allclose(Q.R, np.eye(3), atol=1e-9)
    np.testing.assert_allclose(Q.t, 0, atol=1e-9)
    assert abs(np.linalg.norm(P.rotation) - 1) < 1e-9


@given(st.integers(0, 2**31 - 1))
def test_compose_matches_sequential_transform(seed):
    rng = np.random.default_rng(seed)
    A, B = random_pose(rng), random_pose(rng)
    X = rng.normal(size=3) * 4
    np.testing.assert_allclose(transform_point(A.compose(B), X), transform_point(A, transform_point(B, X)),
                               atol=1e-9)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 50))
def test_project_unproject_round_trip(x, y, z):
    X = np.array([x, y, z])
    np.testing.assert_allclose(unproject(project(X, K100), z, K100), X, atol=1e-9)


@given(st.integers(0, 2**31 - 1))
def test_so3_log_inverts_exp(seed):
    rng = np.random.default_rng(seed)
    phi = rng.normal(size=3)
    phi *= rng.uniform(0, 3.0) / np.linalg.norm(phi)
    np.testing.assert_allclose(so3_log(so3_exp(phi)), phi, atol=1e-9)


def test_unproject_to_plane_hits_plane():
    P = Pose.from_camera_center(np.diag([1.0, -1.0, -1.0]), [2.0, 1.0, 20.0])
    X = unproject_to_plane(np.array([[10.0, 70.0], [50.0, 50.0]]), K100, P, 0.75)
    np.testing.assert_allclose(X[:, 2], 0.75)
    np.testing.assert_allclose(project(P.apply(X), K100), [[10.0, 70.0], [50.0, 50.0]], atol=1e-9)


@given(st.lists(st.floats(0, 50), min_size=8, max_size=8))
def test_iou_symmetric_and_bounded(v):
    a = BoundingBox2D(v[0], v[1], v[0] + v[2] + 0.1, v[1] + v[3] + 0.1)
    b = BoundingBox2D(v[4], v[5], v[4] + v[6] + 0.1, v[5] + v[7] + 0.1)
    assert iou(a, b) == pytest.approx(iou(b, a))
    assert 0.0 <= iou(a, b) <= 1.0
