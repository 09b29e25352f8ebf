"""
Tensor container for a cloud of planar Gaussians, plus binary PLY I/O.

Raw parameters are stored (log scales, opacity logits, unnormalized
quaternions) and activated on access, following the usual splatting layout.
"""

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import torch
from plyfile import PlyData, PlyElement

from .errors import UsageError
from .models import GaussianPrimitive

logger = logging.getLogger(__name__)

TRAINABLE_FIELDS = ("means", "quats", "log_scales", "opacity_logits", "colors")


def inverse_sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x / (1 - x))


@dataclass
class GaussianCloud:
    """Struct-of-arrays Gaussian cloud; every field has N rows."""

    means: torch.Tensor
    quats: torch.Tensor
    log_scales: torch.Tensor
    opacity_logits: torch.Tensor
    colors: torch.Tensor
    potential: torch.Tensor
    part_probs: torch.Tensor

    def __post_init__(self) -> None:
        n = self.means.shape[0]
        for f in fields(self):
            value = getattr(self, f.name)
            if value.shape[0] != n:
                raise UsageError(f"field '{f.name}' has {value.shape[0]} rows, expected {n}")
        if self.part_probs.ndim != 2 or self.part_probs.shape[1] < 1:
            raise UsageError("part_probs must be (N, q) with q >= 1")

    # -------------------------------------------------------------------------
    # Activated views
    # -------------------------------------------------------------------------

    @property
    def num(self) -> int:
        return int(self.means.shape[0])

    @property
    def part_count(self) -> int:
        return int(self.part_probs.shape[1])

    @property
    def dtype(self) -> torch.dtype:
        return self.means.dtype

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    @property
    def rotations(self) -> torch.Tensor:
        return self.quats / self.quats.norm(dim=-1, keepdim=True)

    @property
    def reliability(self) -> torch.Tensor:
        """P = exp(-E) per primitive."""
        return torch.exp(-self.potential)

    def centers(self) -> np.ndarray:
        return self.means.detach().cpu().to(torch.float64).numpy()

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        pts = self.centers()
        return pts.min(axis=0), pts.max(axis=0)

    def extent(self) -> float:
        low, high = self.bounds()
        return float(np.linalg.norm(high - low))

    # -------------------------------------------------------------------------
    # Construction
    # -------------------------------------------------------------------------

    @classmethod
    def from_primitives(
        cls, primitives: list[GaussianPrimitive], dtype: torch.dtype = torch.float32
    ) -> "GaussianCloud":
        """Pack validated primitives; all must share the same part count."""
        if not primitives:
            raise UsageError("cannot build a cloud from zero primitives")
        part_count = len(primitives[0].part_probs)
        if any(len(p.part_probs) != part_count for p in primitives):
            raise UsageError("all primitives must carry the same number of part probabilities")
        opacity = torch.tensor([p.opacity for p in primitives], dtype=torch.float64)
        return cls(
            means=torch.tensor([p.position for p in primitives], dtype=dtype),
            quats=torch.tensor([p.rotation for p in primitives], dtype=dtype),
            log_scales=torch.log(torch.tensor([p.scales for p in primitives], dtype=dtype)),
            opacity_logits=inverse_sigmoid(opacity).to(dtype),
            colors=torch.tensor([p.color for p in primitives], dtype=dtype),
            potential=torch.tensor([p.potential for p in primitives], dtype=dtype),
            part_probs=torch.tensor([p.part_probs for p in primitives], dtype=dtype),
        )

    @classmethod
    def from_points(
        cls,
        points: np.ndarray,
        colors: np.ndarray | None = None,
        scale: float | np.ndarray = 0.01,
        opacity: float = 0.1,
        potential: float = 0.0,
        part_count: int = 1,
        dtype: torch.dtype = torch.float32,
    ) -> "GaussianCloud":
        """Isotropic primitives at the given points (identity rotation)."""
        pts = torch.as_tensor(np.asarray(points, dtype=np.float64), dtype=dtype)
        n = pts.shape[0]
        if n == 0:
            raise UsageError("cannot build a cloud from zero points")
        rgb = (
            torch.full((n, 3), 0.5, dtype=dtype)
            if colors is None
            else torch.as_tensor(np.asarray(colors, dtype=np.float64), dtype=dtype).clamp(0.0, 1.0)
        )
        scale_arr = np.broadcast_to(np.asarray(scale, dtype=np.float64), (n,))
        log_scales = torch.as_tensor(np.log(np.maximum(scale_arr, 1e-8)), dtype=dtype)
        quats = torch.zeros((n, 4), dtype=dtype)
        quats[:, 0] = 1.0
        return cls(
            means=pts,
            quats=quats,
            log_scales=log_scales.unsqueeze(-1).repeat(1, 3),
            opacity_logits=torch.full((n,), math.log(opacity / (1 - opacity)), dtype=dtype),
            colors=rgb,
            potential=torch.full((n,), potential, dtype=dtype),
            part_probs=torch.zeros((n, part_count), dtype=dtype),
        )

    # -------------------------------------------------------------------------
    # Functional updates
    # -------------------------------------------------------------------------

    def _map(self, fn: Callable[[torch.Tensor], torch.Tensor]) -> "GaussianCloud":
        return GaussianCloud(**{f.name: fn(getattr(self, f.name)) for f in fields(self)})

    def clone(self) -> "GaussianCloud":
        return self._map(lambda t: t.detach().clone())

    def detach(self) -> "GaussianCloud":
        return self._map(lambda t: t.detach())

    def to(self, dtype: torch.dtype) -> "GaussianCloud":
        return self._map(lambda t: t.detach().to(dtype))

    def subset(self, index: torch.Tensor | np.ndarray) -> "GaussianCloud":
        """Rows selected by a boolean mask or integer index."""
        idx = torch.as_tensor(index)
        return self._map(lambda t: t.detach()[idx].clone())

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        if other.part_count != self.part_count:
            raise UsageError("cannot concatenate clouds with different part counts")
        return GaussianCloud(
            **{
                f.name: torch.cat([getattr(self, f.name).detach(), getattr(other, f.name).detach()])
                for f in fields(self)
            }
        )

    def with_part_count(self, part_count: int) -> "GaussianCloud":
        """Copy with part_probs reset to zeros of width ``part_count``."""
        return replace(
            self.clone(), part_probs=torch.zeros((self.num, part_count), dtype=self.dtype)
        )

    def primitive(self, index: int) -> GaussianPrimitive:
        """Activated value object for one row."""
        q = self.quats[index].detach().to(torch.float64)
        q = q / q.norm()
        opacity = float(torch.sigmoid(self.opacity_logits[index].detach().to(torch.float64)))
        return GaussianPrimitive(
            position=tuple(self.means[index].detach().to(torch.float64).tolist()),
            rotation=tuple(q.tolist()),
            scales=tuple(torch.exp(self.log_scales[index].detach().to(torch.float64)).tolist()),
            opacity=min(max(opacity, 1e-12), 1.0 - 1e-12),
            color=tuple(self.colors[index].detach().to(torch.float64).clamp(0, 1).tolist()),
            potential=max(float(self.potential[index]), 0.0),
            part_probs=tuple(
                self.part_probs[index].detach().to(torch.float64).clamp(0, 1).tolist()
            ),
        )

    # -------------------------------------------------------------------------
    # PLY I/O
    # -------------------------------------------------------------------------

    def save_ply(self, path: str | Path) -> None:
        """
        Binary PLY: x,y,z, rot_wxyz, log scale_xyz, pre-sigmoid opacity, rgb,
        reliability and part_prob_k.
        """
        names = (
            ["x", "y", "z", "rot_w", "rot_x", "rot_y", "rot_z", "scale_x", "scale_y", "scale_z"]
            + ["opacity", "red", "green", "blue", "reliability"]
            + [f"part_prob_{k}" for k in range(self.part_count)]
        )
        columns = [
            self.means,
            self.quats,
            self.log_scales,
            self.opacity_logits.unsqueeze(-1),
            self.colors,
            self.reliability.unsqueeze(-1),
            self.part_probs,
        ]
        data = torch.cat([c.detach().to(torch.float64) for c in columns], dim=1).numpy()
        vertex = np.empty(self.num, dtype=[(name, "f4") for name in names])
        for col, name in enumerate(names):
            vertex[name] = data[:, col]
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        PlyData([PlyElement.describe(vertex, "vertex")]).write(str(path))
        logger.debug("wrote %d primitives to %s", self.num, path)

    @classmethod
    def load_ply(cls, path: str | Path, dtype: torch.dtype = torch.float32) -> "GaussianCloud":
        vertex = PlyData.read(str(path))["vertex"]
        props = [p.name for p in vertex.properties]
        part_names = sorted(
            (p for p in props if p.startswith("part_prob_")), key=lambda p: int(p.rsplit("_", 1)[1])
        )

        def stack(names: list[str]) -> torch.Tensor:
            return torch.as_tensor(
                np.stack([np.asarray(vertex[n], dtype=np.float64) for n in names], axis=-1),
                dtype=dtype,
            )

        reliability = np.clip(np.asarray(vertex["reliability"], dtype=np.float64), 1e-300, 1.0)
        part_probs = (
            stack(part_names) if part_names else torch.zeros((len(reliability), 1), dtype=dtype)
        )
        return cls(
            means=stack(["x", "y", "z"]),
            quats=stack(["rot_w", "rot_x", "rot_y", "rot_z"]),
            log_scales=stack(["scale_x", "scale_y", "scale_z"]),
            opacity_logits=stack(["opacity"])[:, 0],
            colors=stack(["red", "green", "blue"]),
            potential=torch.as_tensor(-np.log(reliability), dtype=dtype),
            part_probs=part_probs,
        )
