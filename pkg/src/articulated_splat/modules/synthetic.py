"""
Synthetic articulated scenes with an analytic render oracle.

Fixtures are parametric parts (boxes, cylinders, rectangles, spheres) with
ground-truth part ids and joints. Rays are cast in closed form, so depth,
normal and part masks are exact at any resolution.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Protocol

import numpy as np
import torch
from pydantic import BaseModel, Field
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from ..core.errors import ConfigurationError
from ..core.geometry import orbit_cameras
from ..core.models import (
    ArticulatedTree,
    Camera,
    JointParams,
    JointSpec,
    JointType,
    PartNode,
)
from ..core.views import TrainingView
from ..utils.seeding import numpy_rng
from .meshing import TriangleMesh

logger = logging.getLogger(__name__)

FIXTURES = ("hinge", "drawer", "sphere", "plane", "plane-pair")
_EPS = 1e-9


class SceneSpec(BaseModel):
    """Serializable description of a synthetic scene (scene.json)."""

    fixture: str = "hinge"
    seed: int = 7
    resolution: int = Field(default=64, ge=8)
    num_candidates: int = Field(default=64, ge=1)
    fov_deg: float = Field(default=50.0, gt=0.0, lt=180.0)
    pseudo_depth_noise: float = Field(default=0.0, ge=0.0)
    joint_states: dict[str, float] = Field(default_factory=dict)


@dataclass
class Hit:
    """Per-ray closest intersection; t is inf on a miss."""

    t: np.ndarray
    normal: np.ndarray
    color: np.ndarray


class Shape(Protocol):
    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> Hit: ...

    def moved(self, rotation: np.ndarray, pivot: np.ndarray, offset: np.ndarray) -> "Shape": ...

    def mesh(self) -> TriangleMesh: ...


def _rigid(
    point: np.ndarray, rotation: np.ndarray, pivot: np.ndarray, offset: np.ndarray
) -> np.ndarray:
    return rotation @ (point - pivot) + pivot + offset


def _empty_hit(count: int) -> Hit:
    return Hit(
        t=np.full(count, np.inf), normal=np.zeros((count, 3)), color=np.zeros((count, 3))
    )


# =============================================================================
# Shapes
# =============================================================================


@dataclass(frozen=True)
class Box:
    center: np.ndarray
    half: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    face_colors: np.ndarray = field(default_factory=lambda: np.full((6, 3), 0.6))

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> Hit:
        o = (origins - self.center) @ self.rotation
        d = dirs @ self.rotation
        d = np.where(np.abs(d) < 1e-12, 1e-12, d)
        t1 = (-self.half - o) / d
        t2 = (self.half - o) / d
        t_near = np.minimum(t1, t2)
        t_far = np.maximum(t1, t2)
        t_min = t_near.max(axis=1)
        t_max = t_far.min(axis=1)
        hit = (t_max >= np.maximum(t_min, _EPS)) & (t_min > _EPS)
        out = _empty_hit(len(origins))
        axis = t_near.argmax(axis=1)
        rows = np.arange(len(origins))
        sign = -np.sign(d[rows, axis])
        local_n = np.zeros((len(origins), 3))
        local_n[rows, axis] = sign
        face = axis * 2 + (sign > 0)
        out.t[hit] = t_min[hit]
        out.normal[hit] = (local_n @ self.rotation.T)[hit]
        out.color[hit] = self.face_colors[face[hit]]
        return out

    def moved(self, rotation: np.ndarray, pivot: np.ndarray, offset: np.ndarray) -> "Box":
        return replace(
            self,
            center=_rigid(self.center, rotation, pivot, offset),
            rotation=rotation @ self.rotation,
        )

    def mesh(self) -> TriangleMesh:
        corners = np.array(
            [[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64
        )
        vertices = (corners * self.half) @ self.rotation.T + self.center
        faces = np.array(
            [
                [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],
                [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
                [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],
            ]
        )
        return TriangleMesh(vertices=vertices, faces=faces)


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    colors: np.ndarray = field(default_factory=lambda: np.array([[0.8, 0.3, 0.2], [0.2, 0.4, 0.8]]))

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> Hit:
        oc = origins - self.center
        a = (dirs * dirs).sum(-1)
        b = 2.0 * (dirs * oc).sum(-1)
        c = (oc * oc).sum(-1) - self.radius**2
        disc = b * b - 4 * a * c
        root = np.sqrt(np.maximum(disc, 0.0))
        t = (-b - root) / (2 * a)
        hit = (disc >= 0) & (t > _EPS)
        out = _empty_hit(len(origins))
        points = origins + t[:, None] * dirs
        normals = (points - self.center) / self.radius
        band = (np.floor(np.arctan2(normals[:, 1], normals[:, 0]) / (np.pi / 4)) % 2).astype(int)
        out.t[hit] = t[hit]
        out.normal[hit] = normals[hit]
        out.color[hit] = self.colors[band[hit]]
        return out

    def moved(self, rotation: np.ndarray, pivot: np.ndarray, offset: np.ndarray) -> "Sphere":
        return replace(self, center=_rigid(self.center, rotation, pivot, offset))

    def mesh(self, rings: int = 48, segments: int = 96) -> TriangleMesh:
        theta = np.linspace(0.0, np.pi, rings + 1)[1:-1]
        phi = np.linspace(0.0, 2 * np.pi, segments, endpoint=False)
        st, ct = np.sin(theta)[:, None], np.cos(theta)[:, None]
        ring = np.stack(
            [st * np.cos(phi), st * np.sin(phi), np.broadcast_to(ct, (len(theta), segments))], -1
        ).reshape(-1, 3)
        vertices = np.vstack([[0, 0, 1], ring, [0, 0, -1]]) * self.radius + self.center
        faces = []
        bottom = len(vertices) - 1
        for j in range(segments):
            k = (j + 1) % segments
            faces.append([0, 1 + j, 1 + k])
            last = 1 + (len(theta) - 1) * segments
            faces.append([bottom, last + k, last + j])
        for i in range(len(theta) - 1):
            for j in range(segments):
                k = (j + 1) % segments
                a, b = 1 + i * segments + j, 1 + i * segments + k
                c, d = a + segments, b + segments
                faces += [[a, c, b], [b, c, d]]
        return TriangleMesh(vertices=vertices, faces=np.asarray(faces))


@dataclass(frozen=True)
class Rect:
    """Two-sided rectangle spanned by half-extent vectors u and v, checker textured."""

    center: np.ndarray
    u: np.ndarray
    v: np.ndarray
    colors: np.ndarray = field(
        default_factory=lambda: np.array([[0.9, 0.9, 0.85], [0.25, 0.3, 0.35]])
    )
    cells: int = 6

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.u, self.v)
        return n / np.linalg.norm(n)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> Hit:
        n = self.normal
        denom = dirs @ n
        safe = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
        t = ((self.center - origins) @ n) / safe
        points = origins + t[:, None] * dirs
        rel = points - self.center
        a = rel @ self.u / (self.u @ self.u)
        b = rel @ self.v / (self.v @ self.v)
        hit = (np.abs(denom) > 1e-12) & (t > _EPS) & (np.abs(a) <= 1.0) & (np.abs(b) <= 1.0)
        checker = (
            (np.floor((a + 1) * self.cells / 2) + np.floor((b + 1) * self.cells / 2)) % 2
        ).astype(int)
        out = _empty_hit(len(origins))
        out.t[hit] = t[hit]
        out.normal[hit] = n
        out.color[hit] = self.colors[checker[hit]]
        return out

    def moved(self, rotation: np.ndarray, pivot: np.ndarray, offset: np.ndarray) -> "Rect":
        return replace(
            self,
            center=_rigid(self.center, rotation, pivot, offset),
            u=rotation @ self.u,
            v=rotation @ self.v,
        )

    def mesh(self) -> TriangleMesh:
        c, u, v = self.center, self.u, self.v
        vertices = np.array([c - u - v, c + u - v, c + u + v, c - u + v])
        return TriangleMesh(vertices=vertices, faces=np.array([[0, 1, 2], [0, 2, 3]]))


@dataclass(frozen=True)
class Cylinder:
    center: np.ndarray
    axis: np.ndarray
    radius: float
    half_height: float
    side_color: np.ndarray = field(default_factory=lambda: np.array([0.7, 0.7, 0.2]))
    cap_color: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5, 0.1]))

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> Hit:
        axis = self.axis / np.linalg.norm(self.axis)
        oc = origins - self.center
        d_ax = dirs @ axis
        o_ax = oc @ axis
        d_perp = dirs - d_ax[:, None] * axis
        o_perp = oc - o_ax[:, None] * axis
        a = (d_perp * d_perp).sum(-1)
        b = 2.0 * (d_perp * o_perp).sum(-1)
        c = (o_perp * o_perp).sum(-1) - self.radius**2
        disc = b * b - 4 * a * c
        safe_a = np.where(a < 1e-18, 1.0, a)
        t_side = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2 * safe_a)
        within = np.abs(o_ax + t_side * d_ax) <= self.half_height
        side_ok = (a > 1e-18) & (disc >= 0) & (t_side > _EPS) & within
        t_side = np.where(side_ok, t_side, np.inf)

        safe_d = np.where(np.abs(d_ax) < 1e-12, 1e-12, d_ax)
        t_caps = []
        for sign in (-1.0, 1.0):
            t_cap = (sign * self.half_height - o_ax) / safe_d
            radial = o_perp + t_cap[:, None] * d_perp
            inside = (radial * radial).sum(-1) <= self.radius**2
            ok = (np.abs(d_ax) > 1e-12) & (t_cap > _EPS) & inside
            t_caps.append(np.where(ok, t_cap, np.inf))
        candidates = np.stack([t_side, t_caps[0], t_caps[1]], axis=1)
        which = candidates.argmin(axis=1)
        t = candidates.min(axis=1)
        hit = np.isfinite(t)
        out = _empty_hit(len(origins))
        points = oc + np.where(hit, t, 0.0)[:, None] * dirs
        radial = points - (points @ axis)[:, None] * axis
        side_n = radial / np.maximum(np.linalg.norm(radial, axis=1, keepdims=True), 1e-12)
        cap_n = np.where((which == 1)[:, None], -axis, axis)
        normals = np.where((which == 0)[:, None], side_n, cap_n)
        colors = np.where((which == 0)[:, None], self.side_color, self.cap_color)
        out.t[hit] = t[hit]
        out.normal[hit] = normals[hit]
        out.color[hit] = colors[hit]
        return out

    def moved(self, rotation: np.ndarray, pivot: np.ndarray, offset: np.ndarray) -> "Cylinder":
        return replace(
            self, center=_rigid(self.center, rotation, pivot, offset), axis=rotation @ self.axis
        )

    def mesh(self, segments: int = 48) -> TriangleMesh:
        axis = self.axis / np.linalg.norm(self.axis)
        helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e1 = np.cross(axis, helper)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(axis, e1)
        phi = np.linspace(0, 2 * np.pi, segments, endpoint=False)
        ring = self.radius * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2)
        bottom = self.center - self.half_height * axis + ring
        top = self.center + self.half_height * axis + ring
        half = self.half_height * axis
        vertices = np.vstack([bottom, top, self.center - half, self.center + half])
        cb, ct = 2 * segments, 2 * segments + 1
        faces = []
        for j in range(segments):
            k = (j + 1) % segments
            faces += [[j, k, segments + k], [j, segments + k, segments + j]]
            faces += [[cb, k, j], [ct, segments + j, segments + k]]
        return TriangleMesh(vertices=vertices, faces=np.asarray(faces))


# =============================================================================
# Scene
# =============================================================================


@dataclass
class Part:
    name: str
    shapes: list[Any]


@dataclass
class OracleRender:
    """Exact buffers for one camera; depth is camera z, 0 on background."""

    rgb: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    part_ids: np.ndarray

    @property
    def alpha(self) -> np.ndarray:
        return (self.part_ids >= 0).astype(np.float64)


@dataclass
class SyntheticScene:
    """Articulated fixture with candidate poses and an analytic oracle."""

    spec: SceneSpec
    parts: list[Part]
    tree: ArticulatedTree
    center: np.ndarray
    radius: float
    candidates: list[Camera] = field(default_factory=list)

    @property
    def fixture(self) -> str:
        return self.spec.fixture

    @property
    def part_count(self) -> int:
        return len(self.parts)

    @property
    def moving_parts(self) -> list[str]:
        return [p.name for p in self.tree.parts if p.parent is not None]

    def joint(self, part: str) -> JointParams:
        params = self.tree.joint_for(part).params
        assert params is not None
        return params

    @property
    def extent(self) -> float:
        low, high = self.scene_bounds()
        return float(np.linalg.norm(high - low))

    # -------------------------------------------------------------------------
    # Articulation
    # -------------------------------------------------------------------------

    def with_joint_states(self, states: dict[str, float]) -> "SyntheticScene":
        merged = {**self.spec.joint_states, **states}
        return replace(self, spec=self.spec.model_copy(update={"joint_states": merged}))

    def _part_transform(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        """World rigid transform (R, t) of a part given the joint states of it and its ancestors."""
        parent = self.tree.parent_of(name)
        if parent is None:
            return np.eye(3), np.zeros(3)
        rot_parent, t_parent = self._part_transform(parent)
        params = self.joint(name)
        state = self.spec.joint_states.get(name, 0.0)
        axis = np.asarray(params.axis)
        if params.joint_type == JointType.REVOLUTE:
            pivot = np.asarray(params.pivot)
            rot = Rotation.from_rotvec(axis * state).as_matrix()
            local_t = pivot - rot @ pivot
        else:
            rot = np.eye(3)
            local_t = axis * state
        return rot_parent @ rot, rot_parent @ local_t + t_parent

    def posed_shapes(self) -> list[tuple[int, Any]]:
        posed = []
        for index, part in enumerate(self.parts):
            rot, trans = self._part_transform(part.name)
            for shape in part.shapes:
                posed.append((index, shape.moved(rot, np.zeros(3), trans)))
        return posed

    # -------------------------------------------------------------------------
    # Oracle
    # -------------------------------------------------------------------------

    def render(self, cam: Camera) -> OracleRender:
        rotation = cam.rotation
        ys, xs = np.meshgrid(np.arange(cam.height) + 0.5, np.arange(cam.width) + 0.5, indexing="ij")
        rays_cam = np.stack(
            [(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones_like(xs)], axis=-1
        ).reshape(-1, 3)
        # z = 1 camera rays make the ray parameter equal to view depth.
        dirs = rays_cam @ rotation
        origins = np.broadcast_to(cam.center, dirs.shape)
        count = len(dirs)
        best_t = np.full(count, np.inf)
        normal = np.zeros((count, 3))
        color = np.zeros((count, 3))
        part_ids = np.full(count, -1, dtype=np.int64)
        for part_index, shape in self.posed_shapes():
            hit = shape.intersect(origins, dirs)
            closer = hit.t < best_t
            best_t[closer] = hit.t[closer]
            normal[closer] = hit.normal[closer]
            color[closer] = hit.color[closer]
            part_ids[closer] = part_index
        covered = np.isfinite(best_t)
        normal_cam = normal @ rotation.T
        facing = (normal_cam * rays_cam).sum(-1) > 0
        normal_cam[facing] *= -1
        depth = np.where(covered, best_t, 0.0)
        shape = (cam.height, cam.width)
        return OracleRender(
            rgb=color.reshape(*shape, 3),
            depth=depth.reshape(shape),
            normal=np.where(covered[:, None], normal_cam, 0.0).reshape(*shape, 3),
            part_ids=part_ids.reshape(shape),
        )

    def part_masks(self, cam: Camera) -> np.ndarray:
        """Disjoint boolean masks (q, H, W)."""
        ids = self.render(cam).part_ids
        return np.stack([ids == index for index in range(self.part_count)])

    def observe(self, cam: Camera) -> TrainingView:
        oracle = self.render(cam)
        depth = oracle.depth
        if self.spec.pseudo_depth_noise > 0:
            rng = numpy_rng(self.spec.seed, f"pseudo-depth-{cam.id}")
            depth = depth * (1.0 + self.spec.pseudo_depth_noise * rng.standard_normal(depth.shape))
        masks = np.stack([oracle.part_ids == index for index in range(self.part_count)])
        return TrainingView(
            camera=cam,
            image=torch.as_tensor(oracle.rgb, dtype=torch.float32),
            pseudo_depth=torch.as_tensor(depth, dtype=torch.float32),
            part_masks=torch.as_tensor(masks),
        )

    def scene_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        vertices = np.vstack([m.vertices for m in self.ground_truth_meshes()])
        return vertices.min(axis=0), vertices.max(axis=0)

    def ground_truth_meshes(self) -> list[TriangleMesh]:
        """One mesh per part in the current joint state."""
        meshes: list[list[TriangleMesh]] = [[] for _ in self.parts]
        for part_index, shape in self.posed_shapes():
            meshes[part_index].append(shape.mesh())
        return [TriangleMesh.merge(group, part_id=index) for index, group in enumerate(meshes)]

    def ground_truth_mesh(self) -> TriangleMesh:
        return TriangleMesh.merge(self.ground_truth_meshes())

    def label_points(self, points: np.ndarray, samples: int = 20000) -> np.ndarray:
        """Ground-truth part id of each point: the part of the nearest surface sample."""
        rng = np.random.default_rng(0)
        clouds, labels = [], []
        for index, mesh in enumerate(self.ground_truth_meshes()):
            pts = mesh.sample(samples, rng)
            clouds.append(pts)
            labels.append(np.full(len(pts), index))
        tree = cKDTree(np.vstack(clouds))
        _, nearest = tree.query(np.asarray(points, dtype=np.float64))
        return np.concatenate(labels)[nearest]

    def heldout_cameras(self, count: int, width: int | None = None) -> list[Camera]:
        """Deterministic evaluation cameras, disjoint ids from the candidates."""
        size = width or self.spec.resolution
        return orbit_cameras(
            self.center, self.radius, count, size, size, fov_deg=self.spec.fov_deg, start_id=10000
        )

    def to_json_dict(self) -> dict[str, Any]:
        return self.spec.model_dump(mode="json")


# =============================================================================
# Fixtures
# =============================================================================


def _box(center: tuple[float, ...], half: tuple[float, ...], palette: int) -> Box:
    rng = np.random.default_rng(palette)
    colors = 0.2 + 0.7 * rng.random((6, 3))
    return Box(center=np.asarray(center, float), half=np.asarray(half, float), face_colors=colors)


def _hinge_parts() -> tuple[list[Part], ArticulatedTree]:
    base = Part("base", [_box((0.0, 0.0, 0.1), (0.4, 0.3, 0.1), palette=1)])
    lid = Part("lid", [_box((0.0, 0.28, 0.5), (0.4, 0.02, 0.3), palette=2)])
    joint = JointParams(
        joint_type=JointType.REVOLUTE,
        axis=(1.0, 0.0, 0.0),
        pivot=(0.0, 0.3, 0.2),
        range=(-math.pi / 2, math.pi / 2),
    )
    tree = ArticulatedTree(
        parts=[PartNode(name="base"), PartNode(name="lid", parent="base")],
        joints=[JointSpec(child="lid", joint_type=JointType.REVOLUTE, params=joint)],
    )
    return [base, lid], tree


def _drawer_parts() -> tuple[list[Part], ArticulatedTree]:
    body = Part("body", [_box((0.0, 0.0, 0.3), (0.4, 0.3, 0.3), palette=3)])
    drawer = Part(
        "drawer",
        [
            _box((0.0, -0.32, 0.15), (0.3, 0.02, 0.1), palette=4),
            Cylinder(
                center=np.array([0.0, -0.37, 0.15]),
                axis=np.array([1.0, 0.0, 0.0]),
                radius=0.02,
                half_height=0.1,
            ),
        ],
    )
    door = Part("door", [_box((0.0, -0.32, 0.425), (0.35, 0.02, 0.125), palette=5)])
    tree = ArticulatedTree(
        parts=[
            PartNode(name="body"),
            PartNode(name="drawer", parent="body"),
            PartNode(name="door", parent="body"),
        ],
        joints=[
            JointSpec(
                child="drawer",
                joint_type=JointType.PRISMATIC,
                params=JointParams(
                    joint_type=JointType.PRISMATIC, axis=(0.0, -1.0, 0.0), range=(0.0, 0.3)
                ),
            ),
            JointSpec(
                child="door",
                joint_type=JointType.REVOLUTE,
                params=JointParams(
                    joint_type=JointType.REVOLUTE,
                    axis=(1.0, 0.0, 0.0),
                    pivot=(0.0, -0.3, 0.3),
                    range=(0.0, math.pi / 2),
                ),
            ),
        ],
    )
    return [body, drawer, door], tree


def _sphere_parts() -> tuple[list[Part], ArticulatedTree]:
    return [Part("ball", [Sphere(center=np.zeros(3), radius=0.5)])], ArticulatedTree(
        parts=[PartNode(name="ball")]
    )


def _plane_parts() -> tuple[list[Part], ArticulatedTree]:
    floor = Rect(center=np.zeros(3), u=np.array([0.5, 0.0, 0.0]), v=np.array([0.0, 0.5, 0.0]))
    return [Part("floor", [floor])], ArticulatedTree(parts=[PartNode(name="floor")])


def _plane_pair_parts() -> tuple[list[Part], ArticulatedTree]:
    floor = Rect(center=np.zeros(3), u=np.array([0.5, 0.0, 0.0]), v=np.array([0.0, 0.5, 0.0]))
    wall = Rect(
        center=np.array([0.0, 0.5, 0.4]),
        u=np.array([0.5, 0.0, 0.0]),
        v=np.array([0.0, 0.0, 0.4]),
        colors=np.array([[0.8, 0.5, 0.3], [0.3, 0.2, 0.6]]),
    )
    joint = JointParams(
        joint_type=JointType.REVOLUTE,
        axis=(1.0, 0.0, 0.0),
        pivot=(0.0, 0.5, 0.0),
        range=(0.0, math.pi / 2),
    )
    tree = ArticulatedTree(
        parts=[PartNode(name="floor"), PartNode(name="wall", parent="floor")],
        joints=[JointSpec(child="wall", joint_type=JointType.REVOLUTE, params=joint)],
    )
    return [Part("floor", [floor]), Part("wall", [wall])], tree


_BUILDERS = {
    "hinge": _hinge_parts,
    "drawer": _drawer_parts,
    "sphere": _sphere_parts,
    "plane": _plane_parts,
    "plane-pair": _plane_pair_parts,
}


def synth_scene(
    spec: SceneSpec | str, seed: int | None = None, **overrides: Any
) -> SyntheticScene:
    """
    Build a deterministic synthetic scene.

    Args:
        spec: SceneSpec or fixture name
        seed: overrides spec.seed when given
        overrides: further SceneSpec fields (resolution, num_candidates, ...)

    Returns:
        SyntheticScene with candidate poses on the upper hemisphere

    Raises:
        ConfigurationError: unknown fixture name
    """
    scene_spec = SceneSpec(fixture=spec) if isinstance(spec, str) else spec
    updates = dict(overrides)
    if seed is not None:
        updates["seed"] = seed
    if updates:
        scene_spec = scene_spec.model_copy(update=updates)
    if scene_spec.fixture not in _BUILDERS:
        raise ConfigurationError(
            f"unknown fixture '{scene_spec.fixture}'; choose one of {', '.join(FIXTURES)}"
        )
    parts, tree = _BUILDERS[scene_spec.fixture]()
    scene = SyntheticScene(spec=scene_spec, parts=parts, tree=tree, center=np.zeros(3), radius=1.0)
    low, high = scene.scene_bounds()
    scene.center = (low + high) / 2.0
    half_diag = 0.5 * float(np.linalg.norm(high - low))
    # Fit the bounding sphere inside ~80% of the half field of view.
    scene.radius = half_diag / (0.8 * math.tan(math.radians(scene_spec.fov_deg) / 2.0))
    rng = numpy_rng(scene_spec.seed, "scene")
    size = scene_spec.resolution
    scene.candidates = orbit_cameras(
        scene.center,
        scene.radius,
        scene_spec.num_candidates,
        size,
        size,
        scene_spec.fov_deg,
        rng=rng,
    )
    logger.info(
        "built fixture '%s' with %d parts and %d candidates",
        scene_spec.fixture,
        scene.part_count,
        len(scene.candidates),
    )
    return scene
