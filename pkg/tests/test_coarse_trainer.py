"""
Tests for coarse planar training.
"""

import math

import numpy as np
import pytest
import torch

from articulated_splat.core.config import CoarseConfig
from articulated_splat.core.errors import TrainingDivergedError, UsageError
from articulated_splat.core.gaussians import GaussianCloud
from articulated_splat.core.loss_registry import LossStage
from articulated_splat.core.views import TrainingView
from articulated_splat.modules.coarse_trainer import (
    CoarseTrainer,
    build_loss_registry,
    image_psnr,
    prepare_views,
    train_coarse,
)
from articulated_splat.modules.synthetic import SyntheticScene, synth_scene


@pytest.fixture
def plane16() -> SyntheticScene:
    """16 px plane fixture."""
    return synth_scene("plane", seed=5, resolution=16, num_candidates=6)


@pytest.fixture
def views(plane16: SyntheticScene) -> list[TrainingView]:
    """Two observed views of the plane."""
    return [plane16.observe(cam) for cam in plane16.candidates[:2]]


@pytest.fixture
def surface_cloud(plane16: SyntheticScene) -> GaussianCloud:
    """Primitives sampled on the plane."""
    points = plane16.ground_truth_mesh().sample(120, np.random.default_rng(0))
    return GaussianCloud.from_points(points, scale=0.03, opacity=0.5)


def _config(**overrides: object) -> CoarseConfig:
    base = {"iterations": 6, "offset_grid": 4, "num_regions": 2, "log_every": 1}
    base.update(overrides)
    return CoarseConfig.model_validate(base)


class TestLossRegistry:
    """Tests for the coarse objective assembly."""

    def test_terms_and_weights(self) -> None:
        """Test the four terms carry the configured weights."""
        registry = build_loss_registry(CoarseConfig(lambda_scale=7.0, lambda_smooth=0.0))
        names = [t.name for t in registry.get_terms_by_stage(LossStage.COARSE)]
        assert names == ["color", "scale", "depth", "smooth"]
        assert registry.find("scale").weight == 7.0
        assert registry.find("smooth").weight == 0.0
        assert [t.name for t in registry.get_terms_by_stage(LossStage.PLANNER)] == ["color"]


class TestPrepareViews:
    """Tests for region and edge preprocessing."""

    def test_regions_and_edges(self, views: list[TrainingView]) -> None:
        """Test every view gets labels and an edge mask of its resolution."""
        prepared = prepare_views(views, _config())
        assert len(prepared) == 2
        for item in prepared:
            assert item.regions is not None
            assert item.regions.labels.shape == (16, 16)
            assert item.edge_mask is not None and item.edge_mask.shape == (16, 16)

    def test_depth_shape_mismatch(self, views: list[TrainingView]) -> None:
        """Test pseudo-depth must match the camera."""
        bad = TrainingView(views[0].camera, views[0].image, pseudo_depth=torch.ones(8, 8))
        with pytest.raises(UsageError):
            prepare_views([bad], _config())


class TestCoarseTrainer:
    """Tests for CoarseTrainer."""

    def test_zero_iterations(self, surface_cloud: GaussianCloud, views: list[TrainingView]) -> None:
        """Test the cloud is returned unchanged."""
        result = CoarseTrainer(_config(iterations=0)).train(surface_cloud, views)
        assert result.iterations == 0
        assert torch.equal(result.cloud.means, surface_cloud.means)
        assert torch.equal(result.cloud.opacity_logits, surface_cloud.opacity_logits)

    def test_requires_views(self, surface_cloud: GaussianCloud) -> None:
        """Test training without views."""
        with pytest.raises(UsageError):
            CoarseTrainer(_config()).train(surface_cloud, [])

    def test_log_and_correction(
        self, surface_cloud: GaussianCloud, views: list[TrainingView]
    ) -> None:
        """Test per-iteration log rows and the depth-correction state."""
        result = CoarseTrainer(_config(), seed=1, densify=False).train(surface_cloud, views)
        assert list(result.log["iteration"]) == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
        for column in ("loss", "color", "scale", "depth", "smooth", "psnr_train"):
            assert column in result.log.columns
        assert result.correction is not None
        assert set(result.correction.summary()) == {v.view_id for v in views}
        assert result.cloud.num == surface_cloud.num

    def test_input_cloud_untouched(
        self, surface_cloud: GaussianCloud, views: list[TrainingView]
    ) -> None:
        """Test training works on a copy."""
        before = surface_cloud.means.clone()
        CoarseTrainer(_config(), densify=False).train(surface_cloud, views)
        assert torch.equal(surface_cloud.means, before)

    def test_deterministic(self, surface_cloud: GaussianCloud, views: list[TrainingView]) -> None:
        """Test the same seed reproduces the same cloud."""
        a = CoarseTrainer(_config(), seed=4).train(surface_cloud, views)
        b = CoarseTrainer(_config(), seed=4).train(surface_cloud, views)
        assert torch.equal(a.cloud.means, b.cloud.means)
        assert list(a.log["view"]) == list(b.log["view"])

    def test_scale_weight_flattens(
        self, surface_cloud: GaussianCloud, views: list[TrainingView]
    ) -> None:
        """Test lambda_scale drives the smallest axes down faster."""
        flat = CoarseTrainer(_config(iterations=20, lambda_scale=100.0), densify=False)
        free = CoarseTrainer(_config(iterations=20, lambda_scale=0.0), densify=False)
        flat_min = flat.train(surface_cloud, views).cloud.scales.min(dim=-1).values.mean()
        free_min = free.train(surface_cloud, views).cloud.scales.min(dim=-1).values.mean()
        assert float(flat_min) < float(free_min)

    def test_nan_loss_aborts(self, surface_cloud: GaussianCloud, views: list[TrainingView]) -> None:
        """Test divergence raises with a diagnostic snapshot."""
        broken = [
            TrainingView(v.camera, torch.full_like(v.image, math.nan), v.pseudo_depth)
            for v in views
        ]
        with pytest.raises(TrainingDivergedError) as excinfo:
            CoarseTrainer(_config()).train(surface_cloud, broken)
        snapshot = excinfo.value.snapshot
        assert snapshot["iteration"] == 1
        assert snapshot["num_primitives"] == surface_cloud.num
        assert "means" in snapshot["parameters"]

    def test_densification_grows(
        self, surface_cloud: GaussianCloud, views: list[TrainingView]
    ) -> None:
        """Test clone/split adds primitives and keeps the optimizer consistent."""
        config = _config(
            iterations=3,
            densify_from=1,
            densify_interval=1,
            densify_until_fraction=1.0,
            densify_grad_threshold=0.0,
            prune_opacity=0.0,
        )
        result = CoarseTrainer(config).train(surface_cloud, views)
        assert result.cloud.num > surface_cloud.num
        assert result.cloud.part_probs.shape[0] == result.cloud.num
        assert list(result.log["num_primitives"]) == sorted(result.log["num_primitives"])

    def test_densification_cap(
        self, surface_cloud: GaussianCloud, views: list[TrainingView]
    ) -> None:
        """Test growth beyond max_primitives is skipped."""
        config = _config(
            iterations=2,
            densify_from=1,
            densify_interval=1,
            densify_until_fraction=1.0,
            densify_grad_threshold=0.0,
            prune_opacity=0.0,
            max_primitives=surface_cloud.num,
        )
        result = CoarseTrainer(config).train(surface_cloud, views)
        assert result.cloud.num == surface_cloud.num


class TestHelpers:
    """Tests for module-level helpers."""

    def test_image_psnr(self) -> None:
        """Test PSNR of a uniform 0.1 error."""
        render = torch.zeros(4, 4, 3)
        assert image_psnr(render, render + 0.1) == pytest.approx(20.0, abs=1e-4)
        assert image_psnr(render, render) == 99.0

    def test_train_coarse(self, surface_cloud: GaussianCloud, views: list[TrainingView]) -> None:
        """Test the convenience function."""
        result = train_coarse(surface_cloud, views, _config(iterations=2), seed=3)
        assert result.iterations == 2
