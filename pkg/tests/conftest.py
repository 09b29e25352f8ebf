"""
Shared fixtures: small cameras, clouds and scenes that keep the suite fast.
"""

import numpy as np
import pytest
import torch
from hypothesis import settings

from articulated_splat import Camera, GaussianCloud
from articulated_splat.core.geometry import look_at
from articulated_splat.modules.synthetic import SyntheticScene, synth_scene

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")


@pytest.fixture
def front_camera() -> Camera:
    """32x32 camera at (0, 0, -2) looking down +z at the origin."""
    eye = np.array([0.0, 0.0, -2.0])
    rotation, translation = look_at(eye, np.zeros(3), up=np.array([0.0, -1.0, 0.0]))
    return Camera.from_matrices(rotation, translation, 32, 32, fx=32.0)


@pytest.fixture
def identity_camera() -> Camera:
    """Camera at the origin with identity rotation (world = camera frame)."""
    return Camera.from_matrices(np.eye(3), np.zeros(3), 32, 32, fx=32.0)


@pytest.fixture
def single_splat() -> GaussianCloud:
    """One opaque, isotropic primitive two units in front of the identity camera."""
    cloud = GaussianCloud.from_points(
        np.array([[0.0, 0.0, 2.0]]), colors=np.array([[1.0, 0.2, 0.1]]), scale=0.1, opacity=0.9
    )
    return cloud


@pytest.fixture
def random_cloud() -> GaussianCloud:
    """Forty primitives scattered in a slab in front of the identity camera."""
    rng = np.random.default_rng(3)
    points = rng.uniform([-0.4, -0.4, 1.5], [0.4, 0.4, 2.5], size=(40, 3))
    cloud = GaussianCloud.from_points(
        points, colors=rng.random((40, 3)), scale=0.05, opacity=0.5, part_count=2
    )
    cloud.part_probs = torch.as_tensor(rng.random((40, 2)), dtype=torch.float32)
    return cloud


@pytest.fixture
def hinge_scene() -> SyntheticScene:
    """Low-resolution hinge fixture."""
    return synth_scene("hinge", seed=7, resolution=24, num_candidates=12)


@pytest.fixture
def plane_scene() -> SyntheticScene:
    """Single textured plane."""
    return synth_scene("plane", seed=7, resolution=24, num_candidates=12)

