import os

import numpy as np
import pytest
from hypothesis import settings

from carf.camera import look_at, ring_cameras
from carf.scene import ClusterSpec, SceneSpec, generate_scene

settings.register_profile("default", deadline=None, max_examples=60)
settings.register_profile("ci", deadline=None, max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def tiny_scene_spec():
    return SceneSpec(clusters=[
        ClusterSpec((0.3, 0.0, 0.3), 0.15, 7, (1.0, 0.0, 0.0)),
        ClusterSpec((-0.3, 0.2, 0.3), 0.15, 7, (0.0, 1.0, 0.0)),
        ClusterSpec((0.0, -0.3, 0.3), 0.15, 6, (0.0, 0.0, 1.0)),
    ])


@pytest.fixture
def tiny_scene():
    """20 Gaussians in three labeled clusters."""
    return generate_scene(tiny_scene_spec(), 1)


@pytest.fixture
def tiny_cams():
    return ring_cameras(4, 2.0, 1.5, target=(0.0, 0.0, 0.3), fx=20.0, width=16)


@pytest.fixture
def axis_camera():
    """Identity pose, fx = fy = 100, principal point (16, 16), 32 x 32."""
    return look_at((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), up=(0.0, -1.0, 0.0), fx=100.0, fy=100.0, width=32, height=32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
