"""
Tests for synthetic fixtures and the analytic render oracle.
"""

import numpy as np
import pytest
import torch

from articulated_splat.core.errors import ConfigurationError
from articulated_splat.core.geometry import look_at
from articulated_splat.core.models import Camera
from articulated_splat.modules.synthetic import FIXTURES, SceneSpec, SyntheticScene, synth_scene


@pytest.fixture
def top_camera() -> Camera:
    """32x32 camera two units above the origin looking straight down."""
    rotation, translation = look_at(np.array([0.0, 0.0, 2.0]), np.zeros(3))
    return Camera.from_matrices(rotation, translation, 32, 32, fx=32.0)


class TestFixtures:
    """Tests for building scenes."""

    @pytest.mark.parametrize("name", FIXTURES)
    def test_every_fixture_builds(self, name: str) -> None:
        """Test each fixture has candidates, parts and a consistent tree."""
        scene = synth_scene(name, seed=1, resolution=8, num_candidates=3)
        assert len(scene.candidates) == 3
        assert scene.part_count == len(scene.tree.parts)
        assert all(cam.width == 8 for cam in scene.candidates)
        assert scene.radius > 0.0

    def test_unknown_fixture(self) -> None:
        """Test unknown names are rejected."""
        with pytest.raises(ConfigurationError):
            synth_scene("teapot")

    def test_deterministic_candidates(self) -> None:
        """Test the same seed reproduces the same poses."""
        first = synth_scene("hinge", seed=5, resolution=8, num_candidates=6)
        second = synth_scene(SceneSpec(fixture="hinge", seed=5, resolution=8, num_candidates=6))
        assert first.candidates == second.candidates
        other = synth_scene("hinge", seed=6, resolution=8, num_candidates=6)
        assert first.candidates != other.candidates

    def test_moving_parts(self) -> None:
        """Test only children of joints move."""
        drawer = synth_scene("drawer", resolution=8, num_candidates=1)
        assert drawer.moving_parts == ["drawer", "door"]
        assert drawer.joint("drawer").range == (0.0, 0.3)
        assert synth_scene("sphere", resolution=8, num_candidates=1).moving_parts == []

    def test_spec_roundtrip(self, hinge_scene: SyntheticScene) -> None:
        """Test scene.json content rebuilds the same scene."""
        rebuilt = synth_scene(SceneSpec.model_validate(hinge_scene.to_json_dict()))
        assert rebuilt.candidates == hinge_scene.candidates


class TestOracle:
    """Tests for exact renders."""

    def test_plane_depth_is_exact(self, plane_scene: SyntheticScene, top_camera: Camera) -> None:
        """Test a fronto-parallel plane renders at depth 2 where covered and 0 elsewhere."""
        render = plane_scene.render(top_camera)
        covered = render.alpha > 0
        assert covered[16, 16] and not covered[0, 0]
        np.testing.assert_allclose(render.depth[covered], 2.0, atol=1e-9)
        assert np.all(render.depth[~covered] == 0.0)
        np.testing.assert_allclose(render.normal[16, 16], [0.0, 0.0, -1.0], atol=1e-9)

    def test_part_masks_are_disjoint(self, hinge_scene: SyntheticScene) -> None:
        """Test every pixel belongs to at most one part."""
        for cam in hinge_scene.candidates[:3]:
            masks = hinge_scene.part_masks(cam)
            assert masks.shape == (2, cam.height, cam.width)
            assert masks.sum(axis=0).max() <= 1
            assert masks.any()

    def test_observe(self, hinge_scene: SyntheticScene) -> None:
        """Test observed views carry image, pseudo-depth and masks."""
        cam = hinge_scene.candidates[0]
        view = hinge_scene.observe(cam)
        assert view.view_id == cam.id
        assert view.image.shape == (24, 24, 3)
        assert view.pseudo_depth is not None and view.pseudo_depth.shape == (24, 24)
        assert view.part_masks is not None and view.part_masks.dtype == torch.bool

    def test_pseudo_depth_noise(self) -> None:
        """Test noisy pseudo-depth differs from the oracle but keeps the background at 0."""
        noisy = synth_scene(
            "plane", seed=3, resolution=16, num_candidates=2, pseudo_depth_noise=0.05
        )
        cam = noisy.candidates[0]
        exact = noisy.render(cam).depth
        depth = noisy.observe(cam).pseudo_depth
        assert depth is not None
        observed = depth.numpy()
        assert not np.allclose(observed, exact)
        assert np.all(observed[exact == 0.0] == 0.0)

    def test_joint_state_moves_lid(self, hinge_scene: SyntheticScene) -> None:
        """Test opening the lid changes renders and ground truth but not the base."""
        opened = hinge_scene.with_joint_states({"lid": 0.5})
        before, after = hinge_scene.ground_truth_meshes(), opened.ground_truth_meshes()
        np.testing.assert_allclose(before[0].vertices, after[0].vertices)
        assert not np.allclose(before[1].vertices, after[1].vertices)
        cam = hinge_scene.candidates[0]
        assert not np.array_equal(hinge_scene.render(cam).part_ids, opened.render(cam).part_ids)
        assert hinge_scene.spec.joint_states == {}


class TestEvaluationHelpers:
    """Tests for labels and held-out cameras."""

    def test_heldout_ids(self, hinge_scene: SyntheticScene) -> None:
        """Test held-out cameras never collide with candidate ids."""
        heldout = hinge_scene.heldout_cameras(4, width=16)
        assert [cam.id for cam in heldout] == [10000, 10001, 10002, 10003]
        assert all(cam.width == 16 for cam in heldout)

    def test_label_points(self, hinge_scene: SyntheticScene) -> None:
        """Test points on each part receive that part's id."""
        rng = np.random.default_rng(0)
        base, lid = hinge_scene.ground_truth_meshes()
        points = np.vstack([base.sample(20, rng), lid.sample(20, rng)])
        labels = hinge_scene.label_points(points, samples=5000)
        assert np.mean(labels[:20] == 0) > 0.8
        assert np.mean(labels[20:] == 1) > 0.8

    def test_plane_is_unit_square(self, plane_scene: SyntheticScene) -> None:
        """Test the ground-truth plane area and bounds."""
        mesh = plane_scene.ground_truth_mesh()
        assert mesh.surface_area() == pytest.approx(1.0)
        low, high = plane_scene.scene_bounds()
        np.testing.assert_allclose(low, [-0.5, -0.5, 0.0])
        np.testing.assert_allclose(high, [0.5, 0.5, 0.0])
