"""
Tests for closed-form geometry helpers.
"""

import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from articulated_splat.core.errors import GeometryValidationError
from articulated_splat.core.geometry import (
    build_covariance,
    look_at,
    matrix_to_quaternion,
    orbit_cameras,
    planar_normal,
    project_gaussian,
    quaternion_to_matrix,
    rodrigues,
)
from articulated_splat.core.models import Camera, GaussianPrimitive

HALF = math.sqrt(0.5)


def _primitive(
    position: tuple, rotation: tuple = (1.0, 0.0, 0.0, 0.0), scales: tuple = (1, 1, 1)
) -> GaussianPrimitive:
    return GaussianPrimitive(position=position, rotation=rotation, scales=scales, opacity=0.5)


class TestBuildCovariance:
    """Tests for build_covariance."""

    def test_isotropic(self) -> None:
        """Test identity rotation with unit scales."""
        cov = build_covariance(np.array([1.0, 0, 0, 0]), np.array([1.0, 1.0, 1.0]))
        np.testing.assert_allclose(cov.numpy(), np.eye(3), atol=1e-12)

    def test_axis_aligned(self) -> None:
        """Test squared scales on the diagonal."""
        cov = build_covariance(np.array([1.0, 0, 0, 0]), np.array([2.0, 1.0, 0.5]))
        np.testing.assert_allclose(cov.numpy(), np.diag([4.0, 1.0, 0.25]), atol=1e-12)

    def test_rotated(self) -> None:
        """Test a 90 degree z-rotation swaps the x and y variances."""
        cov = build_covariance(np.array([HALF, 0, 0, HALF]), np.array([2.0, 1.0, 1.0]))
        np.testing.assert_allclose(cov.numpy(), np.diag([1.0, 4.0, 1.0]), atol=1e-12)

    def test_non_unit_quaternion(self) -> None:
        """Test quaternion tolerance."""
        with pytest.raises(GeometryValidationError):
            build_covariance(np.array([1.0, 0.01, 0, 0]), np.array([1.0, 1.0, 1.0]))

    def test_non_positive_scale(self) -> None:
        """Test scales must be positive."""
        with pytest.raises(GeometryValidationError):
            build_covariance(np.array([1.0, 0, 0, 0]), np.array([1.0, 0.0, 1.0]))

    @given(
        quat=st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(
            lambda q: sum(v * v for v in q) > 0.1
        ),
        scales=st.lists(st.floats(0.01, 3.0), min_size=3, max_size=3),
    )
    def test_symmetric_positive_definite(self, quat: list[float], scales: list[float]) -> None:
        """Test Sigma is SPD for any unit quaternion and positive scales."""
        q = np.asarray(quat) / np.linalg.norm(quat)
        cov = build_covariance(q, np.asarray(scales)).numpy()
        np.testing.assert_allclose(cov, cov.T, atol=1e-12)
        assert np.linalg.eigvalsh(cov).min() > 0


class TestProjectGaussian:
    """Tests for EWA projection."""

    def test_on_axis_mean(self) -> None:
        """Test an on-axis point lands on the principal point."""
        cam = Camera.from_matrices(np.eye(3), np.zeros(3), 64, 48, fx=100.0)
        projected = project_gaussian(_primitive((0.0, 0.0, 2.0)), cam)
        assert projected is not None
        np.testing.assert_allclose(projected.mean2d, [32.0, 24.0])
        assert projected.depth == pytest.approx(2.0)

    def test_on_axis_covariance(self) -> None:
        """Test (f/d)^2 scaling of an isotropic footprint."""
        cam = Camera.from_matrices(np.eye(3), np.zeros(3), 64, 64, fx=100.0)
        g = _primitive((0.0, 0.0, 2.0), scales=(0.1, 0.1, 0.1))
        projected = project_gaussian(g, cam, cov_floor=0.0)
        assert projected is not None
        expected = (100.0 / 2.0) ** 2 * 0.01
        np.testing.assert_allclose(projected.cov2d, expected * np.eye(2), rtol=1e-9)

    def test_cov_floor(self) -> None:
        """Test the floor is added to the diagonal."""
        cam = Camera.from_matrices(np.eye(3), np.zeros(3), 64, 64, fx=100.0)
        g = _primitive((0.0, 0.0, 2.0), scales=(0.1, 0.1, 0.1))
        plain = project_gaussian(g, cam, 0.0)
        floored = project_gaussian(g, cam, 0.3)
        assert plain is not None and floored is not None
        np.testing.assert_allclose(floored.cov2d - plain.cov2d, 0.3 * np.eye(2), atol=1e-9)

    def test_near_plane_cull(self) -> None:
        """Test primitives at or before the near plane are culled."""
        cam = Camera.from_matrices(np.eye(3), np.zeros(3), 64, 64, fx=100.0, near=0.1)
        assert project_gaussian(_primitive((0.0, 0.0, 0.01)), cam) is None


class TestPlanarNormal:
    """Tests for planar_normal."""

    @pytest.mark.parametrize(
        "rotation, view_dir, expected",
        [
            ((1.0, 0.0, 0.0, 0.0), (0.0, 0.0, 1.0), (0.0, 0.0, -1.0)),
            ((1.0, 0.0, 0.0, 0.0), (0.0, 0.0, -1.0), (0.0, 0.0, 1.0)),
            ((HALF, HALF, 0.0, 0.0), (0.0, -1.0, 0.0), (0.0, 1.0, 0.0)),
        ],
    )
    def test_faces_viewer(self, rotation: tuple, view_dir: tuple, expected: tuple) -> None:
        """Test the shortest axis is returned oriented toward the eye."""
        g = _primitive((0.0, 0.0, 0.0), rotation=rotation, scales=(1.0, 1.0, 0.01))
        np.testing.assert_allclose(planar_normal(g, view_dir), expected, atol=1e-9)


class TestRotations:
    """Tests for rotation helpers."""

    def test_quaternion_matrix_roundtrip(self) -> None:
        """Test matrix_to_quaternion inverts quaternion_to_matrix up to sign."""
        q = np.array([0.8, 0.2, -0.4, 0.4])
        q /= np.linalg.norm(q)
        rot = quaternion_to_matrix(torch.as_tensor(q)).numpy()
        back = matrix_to_quaternion(rot)
        assert abs(abs(float(back @ q)) - 1.0) < 1e-9

    def test_rodrigues_quarter_turn(self) -> None:
        """Test a quarter turn about z maps x to y."""
        rot = rodrigues(torch.tensor([0.0, 0.0, math.pi / 2], dtype=torch.float64))
        np.testing.assert_allclose(rot.numpy() @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-12)

    def test_rodrigues_zero_gradient_is_finite(self) -> None:
        """Test gradients at the identity."""
        omega = torch.zeros(3, dtype=torch.float64, requires_grad=True)
        rodrigues(omega).sum().backward()
        assert torch.isfinite(omega.grad).all()


class TestCameraHelpers:
    """Tests for look_at and orbit_cameras."""

    def test_look_at_centers_target(self) -> None:
        """Test the target projects to the optical axis."""
        rotation, translation = look_at(np.array([1.0, 2.0, 3.0]), np.zeros(3))
        p_cam = rotation @ np.zeros(3) + translation
        np.testing.assert_allclose(p_cam[:2], [0.0, 0.0], atol=1e-12)
        assert p_cam[2] == pytest.approx(math.sqrt(14.0))

    def test_orbit_cameras(self) -> None:
        """Test orbit cameras sit on the sphere and use consecutive ids."""
        cams = orbit_cameras(np.zeros(3), 2.0, 5, 16, 16, start_id=100)
        assert [c.id for c in cams] == [100, 101, 102, 103, 104]
        for cam in cams:
            assert np.linalg.norm(cam.center) == pytest.approx(2.0)
            assert cam.center[2] > 0

    def test_seeded_orbit_is_deterministic(self) -> None:
        """Test the same generator seed gives the same poses."""
        a = orbit_cameras(np.zeros(3), 1.0, 4, 8, 8, rng=np.random.default_rng(5))
        b = orbit_cameras(np.zeros(3), 1.0, 4, 8, 8, rng=np.random.default_rng(5))
        assert a == b
