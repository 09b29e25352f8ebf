"""
Tests for the photometric and planar loss family.
"""

import numpy as np
import pytest
import torch

from articulated_splat.core.errors import ConfigurationError, UsageError, WarningCounter
from articulated_splat.core.gaussians import GaussianCloud
from articulated_splat.modules.planar_losses import (
    SSIM_C1,
    DepthCorrection,
    loss_color,
    loss_depth_reg,
    loss_depth_smooth,
    loss_scale,
    ms_ssim,
    segment_regions,
    sobel_edge_mask,
    ssim,
)


def _plane_depth(height: int = 8, width: int = 8) -> torch.Tensor:
    ys, xs = torch.meshgrid(torch.arange(height), torch.arange(width), indexing="ij")
    return (1.0 + 0.05 * xs + 0.02 * ys).to(torch.float64)


def _fit(correction: DepthCorrection, rendered: torch.Tensor, pseudo: torch.Tensor) -> None:
    params = [p for p in correction.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=0.005)
    schedule = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=800)
    alpha = torch.ones_like(rendered)
    for _ in range(800):
        optimizer.zero_grad()
        loss = loss_depth_reg(rendered, pseudo, alpha, correction, view_id=0)
        loss.backward()
        optimizer.step()
        schedule.step()


class TestColorLoss:
    """Tests for loss_color and SSIM."""

    def test_identical_images(self) -> None:
        """Test zero loss for identical inputs."""
        image = torch.rand(12, 12, 3, generator=torch.Generator().manual_seed(1))
        assert float(loss_color(image, image.clone())) == pytest.approx(0.0, abs=1e-6)

    def test_black_versus_white_pixel(self) -> None:
        """Test the closed form on 1x1 images."""
        black = torch.zeros(1, 1, 3, dtype=torch.float64)
        white = torch.ones(1, 1, 3, dtype=torch.float64)
        scalar_ssim = SSIM_C1 / (1.0 + SSIM_C1)
        expected = 0.8 * 1.0 + 0.2 * (1.0 - scalar_ssim)
        assert float(loss_color(black, white)) == pytest.approx(expected, rel=1e-9)

    def test_shape_mismatch(self) -> None:
        """Test shapes must agree."""
        with pytest.raises(UsageError):
            loss_color(torch.zeros(4, 4, 3), torch.zeros(4, 5, 3))

    def test_ssim_bounds(self) -> None:
        """Test SSIM of unrelated noise is well below 1."""
        gen = torch.Generator().manual_seed(2)
        a = torch.rand(16, 16, 3, generator=gen)
        b = torch.rand(16, 16, 3, generator=gen)
        assert float(ssim(a, a)) == pytest.approx(1.0, abs=1e-5)
        assert float(ssim(a, b)) < 0.5

    def test_ms_ssim_identical(self) -> None:
        """Test multi-scale SSIM of identical inputs."""
        image = torch.rand(16, 16, 3, generator=torch.Generator().manual_seed(4))
        assert float(ms_ssim(image, image, scales=3)) == pytest.approx(1.0, abs=1e-5)


class TestScaleLoss:
    """Tests for loss_scale."""

    def test_mean_of_smallest_axes(self) -> None:
        """Test the arithmetic mean of the minimum scales."""
        cloud = GaussianCloud.from_points(np.zeros((2, 3)), dtype=torch.float64)
        cloud.log_scales = torch.log(torch.tensor([[1.0, 0.2, 1.0], [0.4, 1.0, 1.0]]))
        cloud.log_scales = cloud.log_scales.to(torch.float64).requires_grad_(True)
        loss = loss_scale(cloud)
        assert float(loss) == pytest.approx(0.3)
        loss.backward()
        grad = cloud.log_scales.grad
        assert grad is not None
        assert torch.count_nonzero(grad) == 2
        assert float(grad[0, 1]) > 0 and float(grad[1, 0]) > 0

    def test_flat_primitives(self) -> None:
        """Test the loss vanishes as one axis collapses."""
        cloud = GaussianCloud.from_points(np.zeros((3, 3)), dtype=torch.float64)
        cloud.log_scales = torch.log(torch.tensor([[1.0, 1.0, 1e-9]] * 3, dtype=torch.float64))
        assert float(loss_scale(cloud)) == pytest.approx(0.0, abs=1e-8)


class TestDepthRegularization:
    """Tests for loss_depth_reg and DepthCorrection."""

    def test_exact_pseudo_depth(self) -> None:
        """Test identity correction on exact depth."""
        depth = _plane_depth()
        correction = DepthCorrection([0], 8, 8, grid=1, dtype=torch.float64)
        loss = loss_depth_reg(depth, depth.clone(), torch.ones_like(depth), correction, 0)
        assert float(loss) == pytest.approx(0.0, abs=1e-12)

    def test_all_masked(self) -> None:
        """Test a fully masked view contributes 0 and counts a warning."""
        depth = _plane_depth()
        warnings = WarningCounter()
        loss = loss_depth_reg(depth, depth + 1.0, torch.zeros_like(depth), warnings=warnings)
        assert float(loss) == 0.0
        assert warnings["depth_all_masked"] == 1

    def test_missing_measurements_are_masked(self) -> None:
        """Test pixels with pseudo-depth <= 0 are excluded."""
        depth = _plane_depth()
        pseudo = depth.clone()
        pseudo[:, :4] = 0.0
        loss = loss_depth_reg(depth, pseudo, torch.ones_like(depth))
        assert float(loss) == pytest.approx(0.0, abs=1e-12)

    def test_scale_recovery(self) -> None:
        """Test phi converges to 0.5 when pseudo-depth is twice the true depth."""
        depth = _plane_depth()
        correction = DepthCorrection([0], 8, 8, grid=1, freeze_offset=True, dtype=torch.float64)
        _fit(correction, depth, 2.0 * depth)
        assert correction.summary()[0]["phi"] == pytest.approx(0.5, rel=1e-2)

    def test_offset_recovery(self) -> None:
        """Test the offset field converges to minus a constant bias."""
        depth = _plane_depth()
        correction = DepthCorrection([0], 8, 8, grid=1, freeze_scale=True, dtype=torch.float64)
        _fit(correction, depth, depth + 0.3)
        assert correction.summary()[0]["eta_mean"] == pytest.approx(-0.3, abs=1e-2)

    def test_grid_must_divide_resolution(self) -> None:
        """Test offset grid validation."""
        with pytest.raises(ConfigurationError):
            DepthCorrection([0], 10, 10, grid=4)

    def test_unknown_view(self) -> None:
        """Test corrections are per view."""
        correction = DepthCorrection([3], 8, 8, grid=2)
        with pytest.raises(UsageError):
            correction.phi(4)


class TestRegions:
    """Tests for segment_regions."""

    def test_constant_depth(self) -> None:
        """Test a single label for a single depth."""
        result = segment_regions(np.full((6, 6), 1.5), c=4)
        assert result.num_regions == 1
        assert not result.labels.any()

    def test_two_planes(self) -> None:
        """Test a separable two-plane image."""
        depth = np.ones((6, 6))
        depth[:, 3:] = 2.0
        result = segment_regions(depth, c=2)
        np.testing.assert_array_equal(result.labels, (depth == 2.0).astype(int))

    def test_staircase(self) -> None:
        """Test four steps map to four labels in ascending depth."""
        depth = np.repeat(np.array([[1.0, 1.5, 2.5, 4.0]]), 4, axis=0).repeat(2, axis=1)
        result = segment_regions(depth, c=4, seed=3)
        expected = np.repeat(np.arange(4)[None], 4, axis=0).repeat(2, axis=1)
        np.testing.assert_array_equal(result.labels, expected)
        np.testing.assert_allclose(result.means, [1.0, 1.5, 2.5, 4.0])

    def test_fewer_depths_than_regions(self) -> None:
        """Test clusters merge and labels stay contiguous."""
        depth = np.ones((4, 4))
        depth[2:] = 3.0
        result = segment_regions(depth, c=4)
        assert result.num_regions == 2
        assert set(np.unique(result.labels)) == {0, 1}


class TestEdgesAndSmoothness:
    """Tests for sobel_edge_mask and loss_depth_smooth."""

    def test_constant_image(self) -> None:
        """Test no edges in a flat image."""
        assert sobel_edge_mask(np.full((8, 8, 3), 0.5), threshold=0.1).all()

    def test_vertical_step(self) -> None:
        """Test the two columns around a step are masked out."""
        image = np.zeros((8, 8))
        image[:, 4:] = 1.0
        mask = sobel_edge_mask(image, threshold=0.1)
        assert not mask[:, 3:5].any()
        assert mask[:, :3].all() and mask[:, 5:].all()

    def test_zero_threshold(self) -> None:
        """Test a zero threshold masks everything."""
        assert not sobel_edge_mask(np.random.default_rng(0).random((8, 8)), threshold=0.0).any()

    def test_constant_depth_is_smooth(self) -> None:
        """Test zero total variation on constant depth."""
        depth = torch.full((6, 6), 2.0)
        regions = np.zeros((6, 6), dtype=int)
        assert float(loss_depth_smooth(depth, regions, np.ones((6, 6), bool))) == 0.0

    def test_region_gating(self) -> None:
        """Test pairs crossing a region boundary are excluded."""
        depth = torch.ones(6, 6)
        depth[:, 3:] = 2.0
        regions = (depth.numpy() == 2.0).astype(int)
        assert float(loss_depth_smooth(depth, regions, np.ones((6, 6), bool), "sum")) == 0.0

    def test_ramp(self) -> None:
        """Test slope g over M horizontal pairs sums to g * M."""
        slope = 0.25
        depth = slope * torch.arange(6, dtype=torch.float64)[None].repeat(5, 1)
        regions = np.zeros((5, 6), dtype=int)
        loss = loss_depth_smooth(depth, regions, np.ones((5, 6), bool), reduction="sum")
        assert float(loss) == pytest.approx(slope * 5 * 5)

    def test_edge_gate(self) -> None:
        """Test masked source pixels drop their pairs."""
        depth = 0.25 * torch.arange(6, dtype=torch.float64)[None].repeat(5, 1)
        regions = np.zeros((5, 6), dtype=int)
        edges = np.zeros((5, 6), dtype=bool)
        assert float(loss_depth_smooth(depth, regions, edges, reduction="sum")) == 0.0

    def test_unknown_reduction(self) -> None:
        """Test reduction names are validated."""
        with pytest.raises(UsageError):
            loss_depth_smooth(
                torch.zeros(2, 2), np.zeros((2, 2), int), np.ones((2, 2), bool), "max"
            )
