"""
Tests for part segmentation, joint clients and joint replay.
"""

import json
import math
import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from articulated_splat.core.config import ArticulationConfig
from articulated_splat.core.errors import (
    ConfigurationError,
    JointSchemaError,
    UsageError,
    WarningCounter,
)
from articulated_splat.core.gaussians import GaussianCloud
from articulated_splat.core.models import ArticulatedTree, Camera, JointParams, JointType
from articulated_splat.modules.articulation import (
    UNASSIGNED,
    MockJointClient,
    SubprocessJointClient,
    apply_joint,
    assign_parts,
    assignment_accuracy,
    attach_unassigned,
    backproject_part_probs,
    connecting_region,
    estimate_joints,
    joint_transform,
    load_tree,
    make_joint_client,
    moving_parts,
    parse_joint_response,
    render_connecting_regions,
    save_tree,
)
from articulated_splat.modules.synthetic import SyntheticScene, synth_scene


@pytest.fixture
def centered_camera() -> Camera:
    """Identity-pose camera with its principal point on pixel (15, 15)."""
    return Camera.from_matrices(np.eye(3), np.zeros(3), 32, 32, fx=32.0, cx=15.5, cy=15.5)


@pytest.fixture
def drawer_tree() -> ArticulatedTree:
    """Body with a prismatic drawer and a revolute door."""
    return synth_scene("drawer", seed=0, resolution=8, num_candidates=1).tree


@pytest.fixture
def hinge_tree(hinge_scene: SyntheticScene) -> ArticulatedTree:
    """Two-part revolute fixture tree."""
    return hinge_scene.tree


def _masks(part: int, parts: int = 2, size: int = 32) -> np.ndarray:
    masks = np.zeros((parts, size, size), dtype=bool)
    masks[part] = True
    return masks


def _line_cloud(xs: list[float]) -> GaussianCloud:
    points = np.zeros((len(xs), 3))
    points[:, 0] = xs
    return GaussianCloud.from_points(points)


def _payload(**joint: object) -> dict[str, object]:
    entry = {"child": "lid", "type": "revolute", "axis": [1, 0, 0], "pivot": [0, 0.3, 0.2]}
    entry["range"] = [-1.0, 1.0]
    entry.update(joint)
    return {"joints": [entry]}


class TestBackprojection:
    """Tests for backproject_part_probs."""

    def test_single_view(self, centered_camera: Camera) -> None:
        """Test a primitive inside a part mask gets probability 1 for it."""
        cloud = GaussianCloud.from_points(np.array([[0.0, 0.0, 2.0]]), scale=0.1, opacity=0.8)
        updated = backproject_part_probs(cloud, [centered_camera], [_masks(1)])
        assert updated.part_count == 2
        np.testing.assert_allclose(updated.part_probs.numpy(), [[0.0, 1.0]], atol=1e-6)

    def test_disagreeing_views_average(self, centered_camera: Camera) -> None:
        """Test equal weights under masks 1 and 0 give 0.5."""
        cloud = GaussianCloud.from_points(np.array([[0.0, 0.0, 2.0]]), scale=0.1, opacity=0.8)
        cams = [centered_camera, centered_camera]
        updated = backproject_part_probs(cloud, cams, [_masks(0), _masks(1)])
        np.testing.assert_allclose(updated.part_probs.numpy(), [[0.5, 0.5]], atol=1e-6)

    def test_unseen_primitive_keeps_probabilities(self, centered_camera: Camera) -> None:
        """Test primitives behind the camera are not updated."""
        cloud = GaussianCloud.from_points(
            np.array([[0.0, 0.0, 2.0], [0.0, 0.0, -2.0]]), scale=0.1, opacity=0.8, part_count=2
        )
        cloud.part_probs = torch.tensor([[0.3, 0.3], [0.2, 0.7]])
        updated = backproject_part_probs(cloud, [centered_camera], [_masks(0)])
        np.testing.assert_allclose(updated.part_probs[1].numpy(), [0.2, 0.7])
        np.testing.assert_allclose(updated.part_probs[0].numpy(), [1.0, 0.0], atol=1e-6)

    def test_mask_validation(self, centered_camera: Camera) -> None:
        """Test mask counts and resolutions must match the cameras."""
        cloud = GaussianCloud.from_points(np.array([[0.0, 0.0, 2.0]]))
        with pytest.raises(UsageError):
            backproject_part_probs(cloud, [centered_camera], [])
        with pytest.raises(UsageError):
            backproject_part_probs(cloud, [centered_camera], [_masks(0, size=16)])


class TestAssignment:
    """Tests for part assignment."""

    def test_threshold_is_strict(self) -> None:
        """Test max probability must exceed tau."""
        probs = np.array([[0.6, 0.4], [0.5, 0.5], [0.3, 0.3]])
        np.testing.assert_array_equal(assign_parts(probs, tau=0.5), [0, UNASSIGNED, UNASSIGNED])

    def test_ties_go_to_lower_part(self) -> None:
        """Test argmax tie-break."""
        np.testing.assert_array_equal(assign_parts(np.array([[0.7, 0.7]]), tau=0.5), [0])

    def test_attach_unassigned(self) -> None:
        """Test leftovers join their nearest assigned neighbour."""
        cloud = _line_cloud([0.0, 0.1, 5.0, 5.1])
        labels = attach_unassigned(cloud, np.array([0, UNASSIGNED, 1, UNASSIGNED]))
        np.testing.assert_array_equal(labels, [0, 0, 1, 1])

    def test_accuracy(self) -> None:
        """Test the matching fraction."""
        assert assignment_accuracy(np.array([0, 1, 1, 0]), np.array([0, 1, 0, 0])) == 0.75


class TestConnectingRegion:
    """Tests for connecting_region."""

    def test_boundary_primitives(self) -> None:
        """Test only primitives within the threshold of the other part are returned."""
        cloud = _line_cloud([0.0, 1.0, 2.5, 5.0])
        region = connecting_region(cloud, np.array([0, 0, 1, 1]), 0, 1, threshold=1.5)
        np.testing.assert_array_equal(region, [1, 2])

    def test_threshold_is_inclusive(self) -> None:
        """Test a pair exactly at the threshold counts."""
        cloud = _line_cloud([0.0, 2.0])
        region = connecting_region(cloud, np.array([0, 1]), 0, 1, threshold=2.0)
        np.testing.assert_array_equal(region, [0, 1])

    def test_empty_part(self) -> None:
        """Test an empty part yields nothing and a warning."""
        warnings = WarningCounter()
        cloud = _line_cloud([0.0, 1.0])
        region = connecting_region(cloud, np.array([0, 0]), 0, 1, warnings=warnings)
        assert len(region) == 0
        assert warnings["connect_empty_part"] == 1


class TestJointResponses:
    """Tests for parsing and estimating joints."""

    def test_parse_fenced_json(self, hinge_tree: ArticulatedTree) -> None:
        """Test code fences around the JSON are tolerated."""
        text = "```json\n" + json.dumps(_payload()) + "\n```"
        params = parse_joint_response(text, hinge_tree)
        assert params["lid"].joint_type == JointType.REVOLUTE
        assert params["lid"].range == (-1.0, 1.0)

    @pytest.mark.parametrize(
        "payload",
        [
            "not json",
            {"parts": []},
            {"joints": []},
            _payload(child="handle"),
            _payload(type="prismatic"),
            _payload(axis=[0, 0, 0]),
            _payload(axis=[1, 0]),
            _payload(pivot=None),
            _payload(range=[1.0, -1.0]),
        ],
        ids=[
            "not-json",
            "no-joints-list",
            "missing-joint",
            "unknown-child",
            "wrong-type",
            "zero-axis",
            "short-axis",
            "revolute-without-pivot",
            "inverted-range",
        ],
    )
    def test_schema_errors(self, payload: object, hinge_tree: ArticulatedTree) -> None:
        """Test malformed responses raise with the raw payload attached."""
        with pytest.raises(JointSchemaError) as excinfo:
            parse_joint_response(payload, hinge_tree)
        assert excinfo.value.raw_payload == payload

    def test_mock_client_roundtrip(self, drawer_tree: ArticulatedTree) -> None:
        """Test estimating with the ground-truth mock reproduces the tree."""
        estimated = estimate_joints(drawer_tree, MockJointClient.from_tree(drawer_tree))
        for joint in drawer_tree.joints:
            assert estimated.joint_for(joint.child).params == joint.params

    def test_subprocess_client(self, hinge_tree: ArticulatedTree) -> None:
        """Test the stdin/stdout protocol."""
        script = (
            "import json, sys\n"
            "request = json.load(sys.stdin)\n"
            f"print(json.dumps({_payload()!r}))\n"
        )
        client = SubprocessJointClient([sys.executable, "-c", script])
        estimated = estimate_joints(hinge_tree, client)
        assert estimated.joint_for("lid").params is not None

    def test_subprocess_failure(self, hinge_tree: ArticulatedTree) -> None:
        """Test a failing command is a schema error."""
        client = SubprocessJointClient([sys.executable, "-c", "raise SystemExit(3)"])
        with pytest.raises(JointSchemaError):
            estimate_joints(hinge_tree, client)

    def test_client_configuration(self) -> None:
        """Test client construction errors."""
        with pytest.raises(ConfigurationError):
            SubprocessJointClient([])
        with pytest.raises(ConfigurationError):
            make_joint_client(ArticulationConfig(client="mock"))

    def test_tree_file_roundtrip(self, drawer_tree: ArticulatedTree, tmp_path: Path) -> None:
        """Test save_tree/load_tree."""
        save_tree(tmp_path / "tree.json", drawer_tree)
        assert load_tree(tmp_path / "tree.json") == drawer_tree


class TestJointReplay:
    """Tests for applying joint motions."""

    @pytest.fixture
    def quarter_turn(self) -> JointParams:
        """Revolute joint about z through the origin."""
        return JointParams(joint_type=JointType.REVOLUTE, axis=(0.0, 0.0, 1.0), pivot=(0, 0, 0))

    def test_revolute(self, quarter_turn: JointParams) -> None:
        """Test positions rotate about the axis and orientations compose."""
        cloud = GaussianCloud.from_points(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 5.0]]))
        moved = apply_joint(cloud, np.array([1, 0]), 1, quarter_turn, math.pi / 2)
        expected = [[0.0, 1.0, 0.0], [0.0, 0.0, 5.0]]
        np.testing.assert_allclose(moved.means.numpy(), expected, atol=1e-6)
        half = math.sqrt(0.5)
        np.testing.assert_allclose(moved.quats[0].numpy(), [half, 0.0, 0.0, half], atol=1e-6)
        np.testing.assert_allclose(moved.quats[1].numpy(), [1.0, 0.0, 0.0, 0.0])
        np.testing.assert_allclose(cloud.means[0].numpy(), [1.0, 0.0, 0.0])

    def test_prismatic(self) -> None:
        """Test translation along the axis without rotation."""
        joint = JointParams(joint_type=JointType.PRISMATIC, axis=(0.0, -1.0, 0.0), range=(0, 0.3))
        cloud = GaussianCloud.from_points(np.zeros((2, 3)))
        moved = apply_joint(cloud, np.array([0, 1]), [1], joint, 0.2)
        np.testing.assert_allclose(moved.means.numpy(), [[0, 0, 0], [0, -0.2, 0]], atol=1e-6)
        rotation, translation = joint_transform(joint, 0.2)
        np.testing.assert_allclose(rotation, np.eye(3))
        np.testing.assert_allclose(translation, [0.0, -0.2, 0.0])

    def test_clamped_magnitude(self) -> None:
        """Test out-of-range motions are clamped with a warning."""
        joint = JointParams(joint_type=JointType.PRISMATIC, axis=(1.0, 0.0, 0.0), range=(0, 0.3))
        warnings = WarningCounter()
        moved = apply_joint(
            GaussianCloud.from_points(np.zeros((1, 3))), np.array([0]), 0, joint, 2.0, warnings
        )
        assert float(moved.means[0, 0]) == pytest.approx(0.3)
        assert warnings["joint_clamped"] == 1

    @given(
        axis=st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(
            lambda a: sum(v * v for v in a) > 0.1
        ),
        pivot=st.lists(st.floats(-1, 1), min_size=3, max_size=3),
        theta=st.floats(-3.0, 3.0),
        prismatic=st.booleans(),
    )
    def test_inverse_motion_restores_positions(
        self, axis: list[float], pivot: list[float], theta: float, prismatic: bool
    ) -> None:
        """Test applying a motion and then its negation leaves positions unchanged."""
        unit = np.asarray(axis) / np.linalg.norm(axis)
        joint = JointParams(
            joint_type=JointType.PRISMATIC if prismatic else JointType.REVOLUTE,
            axis=tuple(unit),
            pivot=None if prismatic else tuple(pivot),
            range=(-3.0, 3.0),
        )
        points = np.random.default_rng(0).uniform(-1.0, 1.0, size=(12, 3))
        cloud = GaussianCloud.from_points(points, dtype=torch.float64)
        labels = np.arange(12) % 2
        there = apply_joint(cloud, labels, 1, joint, theta)
        back = apply_joint(there, labels, 1, joint, -theta)
        np.testing.assert_allclose(back.means.numpy(), points, atol=1e-6)

    def test_label_count(self, quarter_turn: JointParams) -> None:
        """Test labels are per primitive."""
        cloud = GaussianCloud.from_points(np.zeros((2, 3)))
        with pytest.raises(UsageError):
            apply_joint(cloud, np.array([0]), 0, quarter_turn, 1.0)

    def test_moving_parts(self, drawer_tree: ArticulatedTree) -> None:
        """Test a part moves with its descendants."""
        assert moving_parts(drawer_tree, "drawer") == [1]
        assert moving_parts(drawer_tree, "body") == [0, 1, 2]


class TestConnectingRenders:
    """Tests for rendering connecting regions."""

    def test_writes_one_png_per_camera(
        self, hinge_scene: SyntheticScene, tmp_path: Path
    ) -> None:
        """Test the lid/base boundary is rendered from each camera."""
        points = hinge_scene.ground_truth_mesh().sample(400, np.random.default_rng(0))
        labels = hinge_scene.label_points(points)
        cloud = GaussianCloud.from_points(points, scale=0.02, opacity=0.8)
        cams = hinge_scene.candidates[:2]
        paths = render_connecting_regions(
            cloud, labels, hinge_scene.tree, cams, tmp_path, threshold=0.1
        )
        assert len(paths) == 2
        assert all(Path(p).exists() and Path(p).name.startswith("connect_lid_") for p in paths)
