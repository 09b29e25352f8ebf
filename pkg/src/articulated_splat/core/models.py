"""
Core data models for the articulated splat engine.
Uses Pydantic for validation and serialization.
"""

import logging
import math
from enum import Enum
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.spatial.transform import Rotation

logger = logging.getLogger(__name__)

QUATERNION_TOLERANCE = 1e-6
ORTHONORMAL_TOLERANCE = 1e-6


class JointType(str, Enum):
    """Joint kinds linking a child part to its parent."""

    REVOLUTE = "revolute"
    PRISMATIC = "prismatic"


class ViewPolicy(str, Enum):
    """View-selection policies compared by the ablation drivers."""

    OPTIMAL = "optimal"
    RANDOM = "random"
    PREDEFINED = "predefined"


class StageStatus(str, Enum):
    """Lifecycle of a pipeline stage in the run manifest."""

    PENDING = "pending"
    COMPLETED = "completed"
    FAILED = "failed"
    SKIPPED = "skipped"


Vec3 = tuple[float, float, float]


def _vec3(values: Any) -> Vec3:
    x, y, z = (float(v) for v in np.asarray(values, dtype=np.float64).reshape(3))
    return (x, y, z)


class Camera(BaseModel):
    """Pinhole camera with a world-to-camera pose (x right, y down, z forward)."""

    model_config = ConfigDict(frozen=True)

    id: int = 0
    width: int = Field(gt=0)
    height: int = Field(gt=0)
    fx: float = Field(gt=0)
    fy: float = Field(gt=0)
    cx: float
    cy: float
    R: tuple[float, ...] = Field(description="Row-major 3x3 world-to-camera rotation")
    t: Vec3 = Field(description="World-to-camera translation")
    near: float = Field(default=0.01, gt=0)
    far: float = Field(default=100.0, gt=0)

    @field_validator("R")
    @classmethod
    def _check_rotation(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        if len(value) != 9:
            raise ValueError("R must have 9 row-major entries")
        mat = np.asarray(value, dtype=np.float64).reshape(3, 3)
        if not np.allclose(mat.T @ mat, np.eye(3), atol=ORTHONORMAL_TOLERANCE):
            raise ValueError("R is not orthonormal")
        return value

    @model_validator(mode="after")
    def _check_clip_planes(self) -> "Camera":
        if self.near >= self.far:
            raise ValueError(f"near ({self.near}) must be smaller than far ({self.far})")
        return self

    @classmethod
    def from_matrices(
        cls,
        rotation: np.ndarray,
        translation: np.ndarray,
        width: int,
        height: int,
        fx: float,
        fy: float | None = None,
        cx: float | None = None,
        cy: float | None = None,
        camera_id: int = 0,
        near: float = 0.01,
        far: float = 100.0,
    ) -> "Camera":
        """Build a camera from numpy pose matrices, defaulting to a centered principal point."""
        return cls(
            id=camera_id,
            width=width,
            height=height,
            fx=fx,
            fy=fy if fy is not None else fx,
            cx=cx if cx is not None else width / 2.0,
            cy=cy if cy is not None else height / 2.0,
            R=tuple(float(v) for v in np.asarray(rotation, dtype=np.float64).reshape(9)),
            t=_vec3(translation),
            near=near,
            far=far,
        )

    @property
    def rotation(self) -> np.ndarray:
        return np.asarray(self.R, dtype=np.float64).reshape(3, 3)

    @property
    def translation(self) -> np.ndarray:
        return np.asarray(self.t, dtype=np.float64)

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        """Optical axis in world coordinates."""
        return self.rotation[2].copy()

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def with_pose(self, rotation: np.ndarray, translation: np.ndarray) -> "Camera":
        """Copy with a new world-to-camera pose and the same intrinsics."""
        return self.model_copy(
            update={
                "R": tuple(float(v) for v in np.asarray(rotation, dtype=np.float64).reshape(9)),
                "t": tuple(float(v) for v in np.asarray(translation, dtype=np.float64).reshape(3)),
            }
        )

    def rescaled(self, factor: float) -> "Camera":
        """Copy at a different resolution; intrinsics scale with the image."""
        width = max(1, int(round(self.width * factor)))
        height = max(1, int(round(self.height * factor)))
        sx = width / self.width
        sy = height / self.height
        return self.model_copy(
            update={
                "width": width,
                "height": height,
                "fx": self.fx * sx,
                "fy": self.fy * sy,
                "cx": self.cx * sx,
                "cy": self.cy * sy,
            }
        )

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "R": list(self.R),
            "t": list(self.t),
            "near": self.near,
            "far": self.far,
        }


class GaussianPrimitive(BaseModel):
    """A single activated Gaussian; the tensor container stores raw parameters."""

    model_config = ConfigDict(frozen=True)

    position: Vec3
    rotation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    scales: Vec3
    opacity: float = Field(gt=0.0, lt=1.0)
    color: Vec3 = (0.5, 0.5, 0.5)
    potential: float = Field(default=0.0, ge=0.0)
    part_probs: tuple[float, ...] = (0.0,)

    @field_validator("rotation")
    @classmethod
    def _check_unit_quaternion(
        cls, value: tuple[float, float, float, float]
    ) -> tuple[float, float, float, float]:
        norm = math.sqrt(sum(v * v for v in value))
        if abs(norm - 1.0) > QUATERNION_TOLERANCE:
            raise ValueError(f"rotation quaternion has norm {norm:.8f}, expected 1")
        return value

    @field_validator("scales")
    @classmethod
    def _check_scales(cls, value: Vec3) -> Vec3:
        if any(s <= 0 for s in value):
            raise ValueError("scales must be positive")
        return value

    @field_validator("color")
    @classmethod
    def _check_color(cls, value: Vec3) -> Vec3:
        if any(c < 0.0 or c > 1.0 for c in value):
            raise ValueError("color components must lie in [0, 1]")
        return value

    @field_validator("part_probs")
    @classmethod
    def _check_part_probs(cls, value: tuple[float, ...]) -> tuple[float, ...]:
        if not value:
            raise ValueError("part_probs needs at least one entry")
        if any(p < 0.0 or p > 1.0 for p in value):
            raise ValueError("part probabilities must lie in [0, 1]")
        return value

    @property
    def reliability(self) -> float:
        """P = exp(-E)."""
        return math.exp(-self.potential)


class Sim3Params(BaseModel):
    """Similarity transform p' = exp(s) R(omega) p + t."""

    model_config = ConfigDict(frozen=True)

    omega: Vec3 = (0.0, 0.0, 0.0)
    t: Vec3 = (0.0, 0.0, 0.0)
    log_s: float = 0.0

    @field_validator("omega")
    @classmethod
    def _check_principal(cls, value: Vec3) -> Vec3:
        if math.sqrt(sum(v * v for v in value)) > math.pi + 1e-9:
            raise ValueError("omega must be a principal rotation vector (norm <= pi)")
        return value

    @classmethod
    def identity(cls) -> "Sim3Params":
        return cls()

    @classmethod
    def from_components(
        cls, rotation: np.ndarray, translation: np.ndarray, scale: float
    ) -> "Sim3Params":
        rotvec = Rotation.from_matrix(np.asarray(rotation, dtype=np.float64)).as_rotvec()
        return cls(
            omega=_vec3(rotvec),
            t=_vec3(translation),
            log_s=float(math.log(scale)),
        )

    @property
    def scale(self) -> float:
        return math.exp(self.log_s)

    @property
    def rotation_matrix(self) -> np.ndarray:
        return Rotation.from_rotvec(np.asarray(self.omega, dtype=np.float64)).as_matrix()

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        out = np.eye(4)
        out[:3, :3] = self.scale * self.rotation_matrix
        out[:3, 3] = self.t
        return out

    def compose(self, inner: "Sim3Params") -> "Sim3Params":
        """Return self o inner: apply ``inner`` first, then ``self``."""
        rotation = self.rotation_matrix @ inner.rotation_matrix
        translation = self.scale * self.rotation_matrix @ np.asarray(inner.t) + np.asarray(self.t)
        return Sim3Params.from_components(rotation, translation, self.scale * inner.scale)

    def inverse(self) -> "Sim3Params":
        rot_inv = self.rotation_matrix.T
        scale_inv = 1.0 / self.scale
        return Sim3Params.from_components(
            rot_inv, -scale_inv * rot_inv @ np.asarray(self.t), scale_inv
        )


class PyramidLevel(BaseModel):
    """One coarse-to-fine registration stage."""

    iterations: int = Field(ge=0)
    learning_rate: float = Field(gt=0)
    subsample: int | None = Field(default=None, ge=1, description="None means all points")


class PyramidSchedule(BaseModel):
    """Ordered registration levels, coarse first."""

    levels: list[PyramidLevel] = Field(min_length=1)

    @classmethod
    def geometric(
        cls,
        num_levels: int = 9,
        iterations: int = 60,
        base_learning_rate: float = 0.05,
        decay: float = 0.6,
        min_subsample: int = 256,
    ) -> "PyramidSchedule":
        """
        Decaying learning rate per level.

        The subsample doubles from ``min_subsample`` until the last level uses all points.
        """
        if num_levels < 1:
            raise ValueError("a schedule needs at least one level")
        levels = [
            PyramidLevel(
                iterations=iterations,
                learning_rate=base_learning_rate * decay**level,
                subsample=None if level == num_levels - 1 else min_subsample * 2**level,
            )
            for level in range(num_levels)
        ]
        return cls(levels=levels)

    @property
    def num_levels(self) -> int:
        return len(self.levels)


class PoseRegion(BaseModel):
    """Reliable region around a training pose: Euler box plus translation ball-box."""

    model_config = ConfigDict(frozen=True)

    base: Camera
    d_theta_z: float = Field(default=0.0, ge=0.0)
    d_theta_y: float = Field(default=0.0, ge=0.0)
    d_theta_x: float = Field(default=0.0, ge=0.0)
    d_t: float = Field(default=0.0, ge=0.0)
    pivot: Vec3 = (0.0, 0.0, 0.0)

    @model_validator(mode="after")
    def _check_finite(self) -> "PoseRegion":
        bounds = (self.d_theta_z, self.d_theta_y, self.d_theta_x, self.d_t)
        if not all(math.isfinite(b) for b in bounds):
            raise ValueError("pose region bounds must be finite")
        return self


class JointParams(BaseModel):
    """Estimated joint: axis, pivot (revolute) and motion range."""

    model_config = ConfigDict(frozen=True)

    joint_type: JointType
    axis: Vec3
    pivot: Vec3 | None = None
    range: tuple[float, float] = (-math.pi, math.pi)

    @field_validator("axis")
    @classmethod
    def _normalize_axis(cls, value: Vec3) -> Vec3:
        norm = math.sqrt(sum(v * v for v in value))
        if norm < 1e-12:
            raise ValueError("joint axis must be non-zero")
        if abs(norm - 1.0) > 1e-9:
            logger.warning("joint axis %s has norm %.6f; normalizing", value, norm)
            return (value[0] / norm, value[1] / norm, value[2] / norm)
        return value

    @model_validator(mode="after")
    def _check_range(self) -> "JointParams":
        low, high = self.range
        if low > high:
            raise ValueError(f"joint range min {low} exceeds max {high}")
        if self.joint_type == JointType.REVOLUTE and self.pivot is None:
            raise ValueError("revolute joints need a pivot")
        return self


class PartNode(BaseModel):
    """Named part and its parent (None for the root)."""

    name: str = Field(min_length=1)
    parent: str | None = None


class JointSpec(BaseModel):
    """Tree edge: the joint linking ``child`` to its parent."""

    child: str
    joint_type: JointType
    params: JointParams | None = None


class ArticulatedTree(BaseModel):
    """Part connectivity with one joint per non-root part."""

    parts: list[PartNode] = Field(min_length=1)
    joints: list[JointSpec] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_tree(self) -> "ArticulatedTree":
        names = [p.name for p in self.parts]
        if len(set(names)) != len(names):
            raise ValueError("part names must be unique")
        roots = [p.name for p in self.parts if p.parent is None]
        if len(roots) != 1:
            raise ValueError(f"expected exactly one root part, found {len(roots)}")
        parents = {p.name: p.parent for p in self.parts}
        for part in self.parts:
            if part.parent is not None and part.parent not in parents:
                raise ValueError(f"part '{part.name}' has unknown parent '{part.parent}'")
        for name in names:
            seen: set[str] = set()
            node: str | None = name
            while node is not None:
                if node in seen:
                    raise ValueError(f"cycle through part '{node}'")
                seen.add(node)
                node = parents[node]
        children = [j.child for j in self.joints]
        for part in self.parts:
            if part.parent is None:
                if part.name in children:
                    raise ValueError("the root part cannot have a joint")
                continue
            count = children.count(part.name)
            if count != 1:
                raise ValueError(f"part '{part.name}' needs exactly one joint, found {count}")
        unknown = set(children) - set(names)
        if unknown:
            raise ValueError(f"joints reference unknown parts: {sorted(unknown)}")
        return self

    @property
    def root(self) -> str:
        return next(p.name for p in self.parts if p.parent is None)

    @property
    def part_names(self) -> list[str]:
        return [p.name for p in self.parts]

    def part_index(self, name: str) -> int:
        return self.part_names.index(name)

    def parent_of(self, name: str) -> str | None:
        return next(p.parent for p in self.parts if p.name == name)

    def joint_for(self, child: str) -> JointSpec:
        return next(j for j in self.joints if j.child == child)

    def to_json_dict(self) -> dict[str, Any]:
        joints: list[dict[str, Any]] = []
        for joint in self.joints:
            entry: dict[str, Any] = {"child": joint.child, "type": joint.joint_type.value}
            if joint.params is not None:
                entry["axis"] = list(joint.params.axis)
                entry["pivot"] = list(joint.params.pivot) if joint.params.pivot else None
                entry["range"] = list(joint.params.range)
            joints.append(entry)
        return {
            "parts": [{"name": p.name, "parent": p.parent} for p in self.parts],
            "joints": joints,
        }

    @classmethod
    def from_json_dict(cls, data: dict[str, Any]) -> "ArticulatedTree":
        joints = []
        for entry in data.get("joints", []):
            params = None
            if entry.get("axis") is not None:
                params = JointParams(
                    joint_type=entry["type"],
                    axis=tuple(entry["axis"]),
                    pivot=tuple(entry["pivot"]) if entry.get("pivot") is not None else None,
                    range=tuple(entry.get("range", (-math.pi, math.pi))),
                )
            joints.append(JointSpec(child=entry["child"], joint_type=entry["type"], params=params))
        return cls(parts=[PartNode(**p) for p in data["parts"]], joints=joints)
