"""
Tests for similarity registration.
"""

import numpy as np
import pytest

from articulated_splat.core.errors import RegistrationIllPosedError
from articulated_splat.core.models import PyramidSchedule, Sim3Params
from articulated_splat.modules.registration import (
    chamfer_distance,
    chamfer_gradient,
    compose_levels,
    register,
    sim3_apply,
)

SHORT = PyramidSchedule.geometric(num_levels=2, iterations=10)


@pytest.fixture
def anisotropic_points() -> np.ndarray:
    """200 points with three well separated principal axes."""
    return np.random.default_rng(11).normal(size=(200, 3)) * np.array([3.0, 1.5, 0.5])


class TestSim3Apply:
    """Tests for applying similarity transforms."""

    def test_identity(self, anisotropic_points: np.ndarray) -> None:
        """Test the identity leaves points unchanged."""
        moved = sim3_apply(Sim3Params.identity(), anisotropic_points)
        np.testing.assert_allclose(moved, anisotropic_points)

    def test_quarter_turn(self) -> None:
        """Test a rotation of pi/2 about z maps x onto y."""
        transform = Sim3Params(omega=(0.0, 0.0, np.pi / 2))
        moved = sim3_apply(transform, [[1.0, 0.0, 0.0]])
        np.testing.assert_allclose(moved, [[0.0, 1.0, 0.0]], atol=1e-12)

    def test_scale_then_translate(self) -> None:
        """Test p' = s p + t."""
        transform = Sim3Params(t=(1.0, 0.0, 0.0), log_s=float(np.log(2.0)))
        np.testing.assert_allclose(sim3_apply(transform, [[1.0, 1.0, 1.0]]), [[3.0, 2.0, 2.0]])

    def test_compose_levels_order(self) -> None:
        """Test later levels are applied last."""
        shift = Sim3Params(t=(1.0, 0.0, 0.0))
        double = Sim3Params(log_s=float(np.log(2.0)))
        total = compose_levels([shift, double])
        np.testing.assert_allclose(sim3_apply(total, [[0.0, 0.0, 0.0]]), [[2.0, 0.0, 0.0]])


class TestChamfer:
    """Tests for the Chamfer objective."""

    def test_identical_clouds(self, anisotropic_points: np.ndarray) -> None:
        """Test zero distance between a cloud and itself."""
        assert chamfer_distance(anisotropic_points, anisotropic_points) == 0.0

    def test_symmetric(self, anisotropic_points: np.ndarray) -> None:
        """Test argument order does not matter."""
        other = anisotropic_points[:50] + 0.1
        assert chamfer_distance(anisotropic_points, other) == pytest.approx(
            chamfer_distance(other, anisotropic_points)
        )

    def test_translation_gradient(self) -> None:
        """Test value |d|^2 and translation gradient -2d for a small shift d."""
        grid = np.stack(np.meshgrid(*[np.arange(3.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
        shift = np.array([0.01, 0.02, -0.01])
        value, grad = chamfer_gradient(Sim3Params.identity(), grid, grid + shift)
        assert value == pytest.approx(float(shift @ shift))
        np.testing.assert_allclose(grad[3:6], -2.0 * shift, atol=1e-12)


class TestRegister:
    """Tests for coarse-to-fine registration."""

    def test_identical_clouds(self, anisotropic_points: np.ndarray) -> None:
        """Test a cloud registers onto itself with the identity."""
        result = register(anisotropic_points, anisotropic_points, SHORT, seed=1)
        np.testing.assert_allclose(result.transform.matrix(), np.eye(4), atol=1e-6)
        assert result.residual < 1e-10

    def test_doubling(self, anisotropic_points: np.ndarray) -> None:
        """Test a doubled copy yields scale 2."""
        result = register(anisotropic_points, 2.0 * anisotropic_points, SHORT)
        assert result.transform.scale == pytest.approx(2.0, rel=1e-4)
        np.testing.assert_allclose(result.transform.rotation_matrix, np.eye(3), atol=1e-4)

    def test_recovers_known_transform(self, anisotropic_points: np.ndarray) -> None:
        """Test a hidden sim3 is recovered from moment initialization and refinement."""
        hidden = Sim3Params(omega=(0.3, -0.2, 0.5), t=(0.4, -0.1, 0.2), log_s=float(np.log(1.3)))
        target = sim3_apply(hidden, anisotropic_points)
        result = register(anisotropic_points, target, SHORT, seed=2)
        np.testing.assert_allclose(result.transform.matrix(), hidden.matrix(), atol=1e-4)
        assert result.residual < 1e-8

    def test_level_bookkeeping(self, anisotropic_points: np.ndarray) -> None:
        """Test the initialization plus one transform per level compose to the total."""
        result = register(anisotropic_points, anisotropic_points + 0.2, SHORT)
        assert len(result.level_transforms) == SHORT.num_levels + 1
        assert len(result.level_residuals) == SHORT.num_levels
        np.testing.assert_allclose(
            compose_levels(result.level_transforms).matrix(), result.transform.matrix(), atol=1e-12
        )
        assert set(result.to_json_dict()) == {"omega", "t", "log_s", "residual"}

    @pytest.mark.parametrize(
        "source",
        [
            np.zeros((3, 3)),
            np.ones((10, 3)),
            np.zeros((10, 2)),
        ],
        ids=["too-few", "coincident", "wrong-shape"],
    )
    def test_degenerate_source(self, source: np.ndarray, anisotropic_points: np.ndarray) -> None:
        """Test ill-posed inputs are rejected."""
        with pytest.raises(RegistrationIllPosedError):
            register(source, anisotropic_points, SHORT)
