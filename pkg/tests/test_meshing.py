"""
Tests for triangle meshes, TSDF fusion and surface extraction.
"""

import math

import numpy as np
import pytest
import torch

from articulated_splat.core.config import MeshConfig
from articulated_splat.core.errors import UsageError, WarningCounter
from articulated_splat.core.gaussians import GaussianCloud
from articulated_splat.core.models import Camera
from articulated_splat.modules.meshing import (
    TriangleMesh,
    TsdfVolume,
    extract_cloud_mesh,
    extract_mesh,
    extract_part_meshes,
    sphere_volume,
    tsdf_integrate,
)
from articulated_splat.modules.synthetic import synth_scene
from articulated_splat.reporting.metrics import chamfer_f1

SMALL_ORBIT = MeshConfig(voxel_size=0.04, orbit_views=8, orbit_resolution=32)


def _unit_square() -> TriangleMesh:
    vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    return TriangleMesh(vertices, np.array([[0, 1, 2], [0, 2, 3]]))


def _tetrahedron() -> TriangleMesh:
    vertices = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    return TriangleMesh(vertices, np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]))


@pytest.fixture
def flat_grid() -> GaussianCloud:
    """Flat splats tiling the square [-0.4, 0.4]^2 at z = 0."""
    ticks = np.linspace(-0.4, 0.4, 21)
    gx, gy = np.meshgrid(ticks, ticks, indexing="ij")
    points = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    cloud = GaussianCloud.from_points(points, opacity=0.9)
    cloud.log_scales = torch.log(torch.tensor([[0.03, 0.03, 0.001]]).repeat(len(points), 1))
    return cloud


class TestTriangleMesh:
    """Tests for TriangleMesh."""

    def test_face_index_validation(self) -> None:
        """Test faces must reference existing vertices."""
        with pytest.raises(UsageError):
            TriangleMesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))

    def test_area_and_sampling(self) -> None:
        """Test area and that samples lie on the surface."""
        square = _unit_square()
        assert square.surface_area() == pytest.approx(1.0)
        points = square.sample(500, np.random.default_rng(0))
        assert points.shape == (500, 3)
        assert np.all(points[:, 2] == 0.0)
        assert points[:, :2].min() >= 0.0 and points[:, :2].max() <= 1.0
        assert TriangleMesh.empty().sample(10, np.random.default_rng(0)).shape == (0, 3)

    def test_merge(self) -> None:
        """Test face offsets and part stamping."""
        merged = TriangleMesh.merge([_unit_square(), _tetrahedron()], part_id=3)
        assert merged.num_vertices == 8 and merged.num_faces == 6
        assert merged.faces[2:].min() == 4
        assert set(merged.part_ids.tolist()) == {3}

    def test_closed(self) -> None:
        """Test edge manifoldness."""
        assert _tetrahedron().is_closed()
        assert not _unit_square().is_closed()

    def test_cleanup(self) -> None:
        """Test duplicate vertices merge and degenerate faces disappear."""
        vertices = np.array(
            [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0], [5.0, 5.0, 5.0]]
        )
        faces = np.array([[0, 1, 2], [0, 1, 3], [0, 0, 1]])
        cleaned = TriangleMesh(vertices, faces).cleanup()
        assert cleaned.num_vertices == 3
        assert cleaned.num_faces == 2

    def test_transformed(self) -> None:
        """Test a rigid motion of the vertices."""
        moved = _unit_square().transformed(np.eye(3), np.array([0.0, 0.0, 2.0]))
        assert np.all(moved.vertices[:, 2] == 2.0)


class TestTsdf:
    """Tests for TSDF integration and extraction."""

    def test_volume_shape(self) -> None:
        """Test grid dimensions from bounds."""
        volume = TsdfVolume.from_bounds(np.zeros(3), np.array([1.0, 0.5, 0.25]), 0.25)
        assert volume.shape == (5, 3, 2)
        assert volume.trunc == pytest.approx(1.25)
        with pytest.raises(UsageError):
            TsdfVolume.from_bounds(np.zeros(3), np.ones(3), 0.0)

    @pytest.mark.parametrize("voxel", [0.02, 0.03, 0.04])
    def test_sphere(self, voxel: float) -> None:
        """Test a closed sphere of the right radius and area at coarse resolution."""
        mesh = extract_mesh(sphere_volume(0.5, voxel))
        assert mesh.is_closed()
        radii = np.linalg.norm(mesh.vertices, axis=1)
        np.testing.assert_allclose(radii, 0.5, atol=voxel / 4)
        assert mesh.surface_area() == pytest.approx(4 * math.pi * 0.25, rel=0.05)

    def test_sphere_chamfer(self) -> None:
        """Test extracted and analytic spheres agree."""
        truth = synth_scene("sphere", seed=0, resolution=8, num_candidates=1).ground_truth_mesh()
        result = chamfer_f1(extract_mesh(sphere_volume(0.5, 0.03)), truth, 5000, threshold=0.03)
        assert result.chamfer < 0.5
        assert result.f1 > 0.9

    def test_no_surface(self) -> None:
        """Test a volume without zero crossing yields an empty mesh and a warning."""
        volume = TsdfVolume.from_bounds(np.zeros(3), np.ones(3), 0.25)
        volume.weight[:] = 1.0
        warnings = WarningCounter()
        assert extract_mesh(volume, warnings).is_empty
        assert warnings["mesh_no_surface"] == 1

    def test_unobserved_volume(self) -> None:
        """Test nothing is extracted from unobserved voxels."""
        volume = sphere_volume(0.5, 0.05)
        volume.weight[:] = 0.0
        assert extract_mesh(volume).is_empty

    def test_integrate_fronto_parallel_plane(self) -> None:
        """Test one depth image of a plane at z = 2.02."""
        cam = Camera.from_matrices(np.eye(3), np.zeros(3), 32, 32, fx=32.0)
        volume = TsdfVolume.from_bounds(
            np.array([-0.2, -0.2, 1.5]), np.array([0.2, 0.2, 2.5]), 0.05
        )
        depth = np.full((32, 32), 2.02)
        tsdf_integrate(volume, depth, np.ones((32, 32)), cam)
        assert volume.sdf[4, 4, 8] == pytest.approx((2.02 - 1.9) / volume.trunc)
        assert volume.weight[4, 4, 20] == 0.0
        mesh = extract_mesh(volume)
        assert not mesh.is_empty
        np.testing.assert_allclose(mesh.vertices[:, 2], 2.02, atol=1e-6)

    def test_integrate_resolution_mismatch(self) -> None:
        """Test depth images must match the camera."""
        cam = Camera.from_matrices(np.eye(3), np.zeros(3), 32, 32, fx=32.0)
        volume = TsdfVolume.from_bounds(np.zeros(3), np.ones(3), 0.25)
        with pytest.raises(UsageError):
            tsdf_integrate(volume, np.ones((16, 16)), np.ones((16, 16)), cam)


class TestCloudMeshing:
    """Tests for meshing Gaussian clouds."""

    def test_whole_cloud(self, flat_grid: GaussianCloud) -> None:
        """Test the fused surface of a flat grid lies near z = 0."""
        mesh = extract_cloud_mesh(flat_grid, SMALL_ORBIT, seed=1)
        assert not mesh.is_empty
        assert float(np.median(np.abs(mesh.vertices[:, 2]))) < 0.03

    def test_part_meshes(self, flat_grid: GaussianCloud) -> None:
        """Test one stamped mesh per part and small parts skipped."""
        centers = flat_grid.centers()
        labels = np.where(centers[:, 0] < 0, 0, 1)
        labels[:3] = 2
        labels[3] = -1
        warnings = WarningCounter()
        meshes = extract_part_meshes(flat_grid, labels, SMALL_ORBIT, seed=1, warnings=warnings)
        assert sorted(meshes) == [0, 1]
        for part, mesh in meshes.items():
            assert not mesh.is_empty
            assert set(mesh.part_ids.tolist()) == {part}
        assert warnings["mesh_part_skipped"] == 1

    def test_part_label_count(self, flat_grid: GaussianCloud) -> None:
        """Test labels are per primitive."""
        with pytest.raises(UsageError):
            extract_part_meshes(flat_grid, np.zeros(3, dtype=int), SMALL_ORBIT)
