"""
TSDF fusion and marching-cubes surface extraction.

Depth renders from an orbit of cameras are fused into a truncated signed
distance volume (positive in front of the surface, stored as a fraction of
the truncation distance) and the zero level set is extracted with
scikit-image's marching cubes. Per-part meshes fuse depth rendered from the
primitives of one part at a time.
"""

import itertools
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import torch
from skimage.measure import marching_cubes

from ..core.config import MeshConfig, RasterConfig
from ..core.errors import UsageError, WarningCounter
from ..core.gaussians import GaussianCloud
from ..core.geometry import orbit_cameras
from ..core.models import Camera
from ..utils.seeding import numpy_rng
from .rasterizer import Rasterizer

logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12


# =============================================================================
# Triangle meshes
# =============================================================================


@dataclass
class TriangleMesh:
    """Indexed triangle mesh with optional per-vertex part id and color."""

    vertices: np.ndarray
    faces: np.ndarray
    part_ids: np.ndarray | None = None
    colors: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise UsageError("face index out of range")
        if self.part_ids is not None:
            self.part_ids = np.asarray(self.part_ids, dtype=np.int64).reshape(-1)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(vertices=np.zeros((0, 3)), faces=np.zeros((0, 3), dtype=np.int64))

    @classmethod
    def merge(cls, meshes: Sequence["TriangleMesh"], part_id: int | None = None) -> "TriangleMesh":
        """
        Concatenate meshes into one.

        Args:
            meshes: meshes to join
            part_id: stamp every vertex with this part id; otherwise existing
                part ids are kept when every input carries them
        """
        if not meshes:
            return cls.empty()
        offsets = np.cumsum([0] + [len(m.vertices) for m in meshes[:-1]])
        vertices = np.concatenate([m.vertices for m in meshes])
        faces = np.concatenate([m.faces + off for m, off in zip(meshes, offsets, strict=True)])
        part_ids = None
        if part_id is not None:
            part_ids = np.full(len(vertices), part_id, dtype=np.int64)
        elif all(m.part_ids is not None for m in meshes):
            part_ids = np.concatenate([m.part_ids for m in meshes if m.part_ids is not None])
        colors = None
        if all(m.colors is not None for m in meshes):
            colors = np.concatenate([m.colors for m in meshes if m.colors is not None])
        return cls(vertices=vertices, faces=faces, part_ids=part_ids, colors=colors)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return self.num_faces == 0

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def surface_area(self) -> float:
        return float(self.face_areas().sum())

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.num_vertices:
            return np.zeros(3), np.zeros(3)
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Area-weighted uniform surface samples, (count, 3); empty for an empty mesh."""
        areas = self.face_areas()
        total = areas.sum()
        if self.is_empty or total <= 0:
            return np.zeros((0, 3))
        face = rng.choice(self.num_faces, size=count, p=areas / total)
        r1 = np.sqrt(rng.random(count))
        r2 = rng.random(count)
        a, b, c = (self.vertices[self.faces[face, k]] for k in range(3))
        return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> "TriangleMesh":
        moved = self.vertices @ np.asarray(rotation).T + np.asarray(translation)
        return TriangleMesh(moved, self.faces.copy(), self.part_ids, self.colors)

    def edge_face_counts(self) -> np.ndarray:
        """Number of faces bounding each distinct undirected edge."""
        if self.is_empty:
            return np.zeros(0, dtype=np.int64)
        edges = np.concatenate([self.faces[:, [a, b]] for a, b in ((0, 1), (1, 2), (2, 0))])
        _, counts = np.unique(np.sort(edges, axis=1), axis=0, return_counts=True)
        return counts

    def is_closed(self) -> bool:
        """Every edge bounds exactly two triangles."""
        counts = self.edge_face_counts()
        return bool(counts.size) and bool((counts == 2).all())

    def cleanup(self, tolerance: float = 1e-9) -> "TriangleMesh":
        """Merge coincident vertices, drop degenerate faces and unreferenced vertices."""
        if not self.num_vertices:
            return TriangleMesh.empty()
        keys = np.round(self.vertices / tolerance).astype(np.int64)
        _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
        inverse = inverse.reshape(-1)
        faces = inverse[self.faces]
        distinct = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2])
        distinct &= faces[:, 0] != faces[:, 2]
        merged = TriangleMesh(
            self.vertices[first],
            faces[distinct],
            None if self.part_ids is None else self.part_ids[first],
            None if self.colors is None else self.colors[first],
        )
        merged.faces = merged.faces[merged.face_areas() > DEGENERATE_AREA]
        used = np.unique(merged.faces)
        remap = np.full(merged.num_vertices, -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        return TriangleMesh(
            merged.vertices[used],
            remap[merged.faces],
            None if merged.part_ids is None else merged.part_ids[used],
            None if merged.colors is None else merged.colors[used],
        )


# =============================================================================
# TSDF volume
# =============================================================================


@dataclass
class TsdfVolume:
    """
    Regular grid of signed distances sampled at ``origin + index * voxel_size``.

    ``sdf`` is stored in units of the truncation distance, so it lies in
    [-1, 1]; unobserved voxels hold +1 with zero weight.
    """

    origin: np.ndarray
    voxel_size: float
    trunc: float
    sdf: np.ndarray
    weight: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def from_bounds(
        cls, lower: np.ndarray, upper: np.ndarray, voxel_size: float, trunc_voxels: float = 5.0
    ) -> "TsdfVolume":
        if voxel_size <= 0:
            raise UsageError("voxel size must be positive")
        lower = np.asarray(lower, dtype=np.float64)
        upper = np.asarray(upper, dtype=np.float64)
        shape = tuple(int(n) for n in np.maximum(np.ceil((upper - lower) / voxel_size) + 1, 2))
        return cls(
            origin=lower,
            voxel_size=float(voxel_size),
            trunc=float(trunc_voxels * voxel_size),
            sdf=np.ones(shape, dtype=np.float64),
            weight=np.zeros(shape, dtype=np.float64),
        )

    @property
    def shape(self) -> tuple[int, int, int]:
        nx, ny, nz = self.sdf.shape
        return nx, ny, nz

    @property
    def upper(self) -> np.ndarray:
        return self.origin + (np.asarray(self.shape) - 1) * self.voxel_size

    def axis(self, k: int) -> np.ndarray:
        return self.origin[k] + np.arange(self.shape[k]) * self.voxel_size

    def copy(self) -> "TsdfVolume":
        return TsdfVolume(
            self.origin.copy(), self.voxel_size, self.trunc, self.sdf.copy(), self.weight.copy()
        )


def _as_numpy(image: np.ndarray | torch.Tensor) -> np.ndarray:
    if isinstance(image, torch.Tensor):
        return image.detach().cpu().numpy().astype(np.float64)
    return np.asarray(image, dtype=np.float64)


def tsdf_integrate(
    volume: TsdfVolume,
    depth: np.ndarray | torch.Tensor,
    alpha: np.ndarray | torch.Tensor,
    cam: Camera,
    alpha_threshold: float = 0.5,
) -> TsdfVolume:
    """
    Fuse one z-depth image into ``volume`` in place, one z-slab at a time.

    Each voxel projecting onto a pixel with alpha >= threshold and positive
    depth gets sdf = clamp(depth - z, +-trunc) / trunc, averaged with its
    previous value at unit weight per view. Voxels further than the
    truncation distance behind the surface are left alone.

    Returns:
        the same volume
    """
    depth_np = _as_numpy(depth)
    alpha_np = _as_numpy(alpha)
    if depth_np.shape != (cam.height, cam.width) or alpha_np.shape != depth_np.shape:
        raise UsageError("depth/alpha resolution does not match the camera")
    usable = (alpha_np >= alpha_threshold) & (depth_np > 0)
    if not usable.any():
        return volume

    rotation, translation = cam.rotation, cam.translation
    xs, ys = volume.axis(0), volume.axis(1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    base = gx[..., None] * rotation[:, 0] + gy[..., None] * rotation[:, 1] + translation
    for k, z_world in enumerate(volume.axis(2)):
        pc = base + z_world * rotation[:, 2]
        z = pc[..., 2]
        in_front = z > 1e-9
        safe_z = np.where(in_front, z, 1.0)
        px = np.floor(cam.fx * pc[..., 0] / safe_z + cam.cx).astype(np.int64)
        py = np.floor(cam.fy * pc[..., 1] / safe_z + cam.cy).astype(np.int64)
        inside = in_front & (px >= 0) & (px < cam.width) & (py >= 0) & (py < cam.height)
        if not inside.any():
            continue
        px_c = np.clip(px, 0, cam.width - 1)
        py_c = np.clip(py, 0, cam.height - 1)
        valid = inside & usable[py_c, px_c]
        diff = depth_np[py_c, px_c] - z
        valid &= diff >= -volume.trunc
        if not valid.any():
            continue
        sdf_new = np.clip(diff, -volume.trunc, volume.trunc) / volume.trunc
        slab_sdf = volume.sdf[:, :, k]
        slab_w = volume.weight[:, :, k]
        updated = (slab_sdf * slab_w + sdf_new) / (slab_w + 1.0)
        volume.sdf[:, :, k] = np.where(valid, updated, slab_sdf)
        volume.weight[:, :, k] = np.where(valid, slab_w + 1.0, slab_w)
    return volume


def sphere_volume(
    radius: float,
    voxel_size: float,
    center: Sequence[float] = (0.0, 0.0, 0.0),
    trunc_voxels: float = 5.0,
    margin: float = 0.1,
) -> TsdfVolume:
    """Fully observed analytic TSDF of a sphere."""
    c = np.asarray(center, dtype=np.float64)
    reach = radius * (1 + margin) + trunc_voxels * voxel_size
    volume = TsdfVolume.from_bounds(c - reach, c + reach, voxel_size, trunc_voxels)
    gx, gy, gz = np.meshgrid(volume.axis(0), volume.axis(1), volume.axis(2), indexing="ij")
    distance = np.sqrt((gx - c[0]) ** 2 + (gy - c[1]) ** 2 + (gz - c[2]) ** 2) - radius
    volume.sdf = np.clip(distance, -volume.trunc, volume.trunc) / volume.trunc
    volume.weight = np.ones_like(volume.sdf)
    return volume


def extract_mesh(volume: TsdfVolume, warnings: WarningCounter | None = None) -> TriangleMesh:
    """
    Marching cubes over the zero level set, restricted to cubes whose eight
    corners have all been observed.

    Returns:
        cleaned TriangleMesh in world coordinates; empty (with a warning)
        when the observed volume has no sign change
    """
    observed = volume.weight > 0
    values = volume.sdf[observed]
    if values.size == 0 or values.min() > 0 or values.max() < 0:
        if warnings is not None:
            warnings.bump("mesh_no_surface")
        logger.warning("TSDF volume has no zero crossing; returning an empty mesh")
        return TriangleMesh.empty()

    nx, ny, nz = observed.shape
    corners = np.ones((nx - 1, ny - 1, nz - 1), dtype=bool)
    for dx, dy, dz in itertools.product((0, 1), repeat=3):
        corners &= observed[dx : dx + nx - 1, dy : dy + ny - 1, dz : dz + nz - 1]
    cube = np.zeros_like(observed)
    cube[:-1, :-1, :-1] = corners
    try:
        verts, faces, _, _ = marching_cubes(
            volume.sdf,
            level=0.0,
            spacing=(volume.voxel_size,) * 3,
            mask=cube,
            allow_degenerate=False,
        )
    except (ValueError, RuntimeError) as exc:
        if warnings is not None:
            warnings.bump("mesh_no_surface")
        logger.warning("marching cubes found no surface: %s", exc)
        return TriangleMesh.empty()
    mesh = TriangleMesh(vertices=verts + volume.origin, faces=faces).cleanup()
    if mesh.is_empty:
        if warnings is not None:
            warnings.bump("mesh_no_surface")
        logger.warning("marching cubes produced only degenerate triangles")
    return mesh


# =============================================================================
# Cloud meshing
# =============================================================================


def volume_bounds(cloud: GaussianCloud, margin: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Center AABB inflated by ``margin`` of its diagonal on every side."""
    lower, upper = cloud.bounds()
    lower, upper = np.asarray(lower, dtype=np.float64), np.asarray(upper, dtype=np.float64)
    pad = margin * max(float(np.linalg.norm(upper - lower)), 1e-6)
    return lower - pad, upper + pad


def voxel_size_for(config: MeshConfig, lower: np.ndarray, upper: np.ndarray) -> float:
    if config.auto_scale:
        return float(np.linalg.norm(upper - lower)) / config.auto_divisions
    return config.voxel_size


def fusion_cameras(
    lower: np.ndarray, upper: np.ndarray, config: MeshConfig, seed: int = 0, fov_deg: float = 50.0
) -> list[Camera]:
    """Orbit of ``config.orbit_views`` hemisphere cameras framing the bounds."""
    center = 0.5 * (lower + upper)
    half_diag = 0.5 * float(np.linalg.norm(upper - lower))
    radius = half_diag / (0.8 * np.tan(np.radians(fov_deg) / 2.0))
    res = config.orbit_resolution
    return orbit_cameras(
        center,
        radius,
        config.orbit_views,
        res,
        res,
        fov_deg=fov_deg,
        rng=numpy_rng(seed, "meshing"),
    )


def fuse_cloud(
    cloud: GaussianCloud,
    cameras: Sequence[Camera],
    volume: TsdfVolume,
    rasterizer: Rasterizer,
    alpha_threshold: float = 0.5,
) -> TsdfVolume:
    with torch.no_grad():
        for cam in cameras:
            buffers = rasterizer.render(cloud, cam)
            tsdf_integrate(volume, buffers.depth, buffers.alpha, cam, alpha_threshold)
    return volume


def extract_cloud_mesh(
    cloud: GaussianCloud,
    config: MeshConfig | None = None,
    raster_config: RasterConfig | None = None,
    cameras: Sequence[Camera] | None = None,
    seed: int = 0,
    warnings: WarningCounter | None = None,
) -> TriangleMesh:
    """Whole-cloud surface."""
    config = config or MeshConfig()
    lower, upper = volume_bounds(cloud, config.bounds_margin)
    cams = list(cameras) if cameras is not None else fusion_cameras(lower, upper, config, seed)
    voxel = voxel_size_for(config, lower, upper)
    volume = TsdfVolume.from_bounds(lower, upper, voxel, config.trunc_voxels)
    fuse_cloud(cloud, cams, volume, Rasterizer(raster_config), config.alpha_threshold)
    return extract_mesh(volume, warnings)


def extract_part_meshes(
    cloud: GaussianCloud,
    part_ids: np.ndarray,
    config: MeshConfig | None = None,
    raster_config: RasterConfig | None = None,
    cameras: Sequence[Camera] | None = None,
    seed: int = 0,
    warnings: WarningCounter | None = None,
) -> dict[int, TriangleMesh]:
    """
    Fuse and extract one mesh per assigned part.

    Every part shares the whole-cloud volume bounds and orbit, so the part
    boxes together cover the whole cloud.

    Args:
        cloud: Gaussian cloud
        part_ids: (N,) part index per primitive, -1 for unassigned
        config: voxel, truncation and orbit settings
        raster_config: renderer settings
        cameras: fusion cameras; defaults to the configured orbit
        seed: orbit sampling seed
        warnings: counter for skipped parts and empty meshes

    Returns:
        part index -> mesh with ``part_ids`` stamped
    """
    config = config or MeshConfig()
    labels = np.asarray(part_ids, dtype=np.int64).reshape(-1)
    if len(labels) != cloud.num:
        raise UsageError(f"{len(labels)} part ids for {cloud.num} primitives")
    lower, upper = volume_bounds(cloud, config.bounds_margin)
    cams = list(cameras) if cameras is not None else fusion_cameras(lower, upper, config, seed)
    voxel = voxel_size_for(config, lower, upper)
    rasterizer = Rasterizer(raster_config)

    meshes: dict[int, TriangleMesh] = {}
    for part in sorted(int(p) for p in np.unique(labels) if p >= 0):
        members = np.nonzero(labels == part)[0]
        if len(members) < config.min_part_primitives:
            if warnings is not None:
                warnings.bump("mesh_part_skipped")
            logger.warning(
                "part %d has %d primitives (< %d); skipped",
                part,
                len(members),
                config.min_part_primitives,
            )
            continue
        subset = cloud.subset(torch.as_tensor(members))
        volume = TsdfVolume.from_bounds(lower, upper, voxel, config.trunc_voxels)
        fuse_cloud(subset, cams, volume, rasterizer, config.alpha_threshold)
        mesh = extract_mesh(volume, warnings)
        mesh.part_ids = np.full(mesh.num_vertices, part, dtype=np.int64)
        meshes[part] = mesh
        logger.info("part %d: %d vertices, %d faces", part, mesh.num_vertices, mesh.num_faces)
    return meshes
