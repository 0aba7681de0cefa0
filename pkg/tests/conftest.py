import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("pkg", deadline=None, max_examples=60)
settings.load_profile("pkg")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pose(rng, angle=np.pi, trans=5.0):
    from pvdrone.core import Pose, so3_exp
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    R = so3_exp(axis * rng.uniform(-angle, angle))
    return Pose.from_matrix(R, rng.uniform(-trans, trans, size=3))
