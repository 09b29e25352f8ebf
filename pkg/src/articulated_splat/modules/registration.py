"""
Coarse-to-fine similarity registration of a structured point cloud onto a
noisy target cloud.

A moment-based initialization (centroids, RMS radii, principal axes) is
refined by a pyramid of gradient-descent levels over (omega, t, log_s) that
minimize the symmetric Chamfer distance. Each level's refinement is composed
on the left of the running transform.
"""

import logging
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import torch
from scipy.spatial import cKDTree

from ..core.errors import RegistrationIllPosedError
from ..core.geometry import rodrigues
from ..core.models import PyramidSchedule, Sim3Params
from ..utils.seeding import numpy_rng

logger = logging.getLogger(__name__)

MIN_POINTS = 4
INIT_SAMPLE = 2000


@dataclass
class RegistrationResult:
    """Total transform, final Chamfer residual and the per-level transforms."""

    transform: Sim3Params
    residual: float
    level_transforms: list[Sim3Params] = field(default_factory=list)
    level_residuals: list[float] = field(default_factory=list)

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "omega": list(self.transform.omega),
            "t": list(self.transform.t),
            "log_s": self.transform.log_s,
            "residual": self.residual,
        }


def sim3_apply(transform: Sim3Params, points: np.ndarray) -> np.ndarray:
    """p' = exp(s) R(omega) p + t for (N, 3) points."""
    pts = np.asarray(points, dtype=np.float64)
    return transform.scale * pts @ transform.rotation_matrix.T + np.asarray(transform.t)


def compose_levels(transforms: list[Sim3Params]) -> Sim3Params:
    """Fold per-level transforms, each later one composed on the left."""
    total = Sim3Params.identity()
    for transform in transforms:
        total = transform.compose(total)
    return total


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean squared nearest-neighbour distance, both directions averaged."""
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(np.mean(d_ab**2)) + float(np.mean(d_ba**2)))


def _torch_chamfer(moved: torch.Tensor, target: np.ndarray, target_tree: cKDTree) -> torch.Tensor:
    """Differentiable symmetric Chamfer with correspondences fixed at the current positions."""
    moved_np = moved.detach().numpy()
    _, forward_idx = target_tree.query(moved_np)
    _, backward_idx = cKDTree(moved_np).query(target)
    target_t = torch.as_tensor(target, dtype=moved.dtype)
    forward = ((moved - target_t[forward_idx]) ** 2).sum(-1).mean()
    backward = ((target_t - moved[backward_idx]) ** 2).sum(-1).mean()
    return 0.5 * (forward + backward)


def _apply_torch(
    omega: torch.Tensor, translation: torch.Tensor, log_s: torch.Tensor, points: torch.Tensor
) -> torch.Tensor:
    return torch.exp(log_s) * points @ rodrigues(omega).T + translation


def chamfer_gradient(
    transform: Sim3Params, source: np.ndarray, target: np.ndarray
) -> tuple[float, np.ndarray]:
    """
    Chamfer value of ``sim3_apply(transform, source)`` against ``target`` and its
    gradient with respect to (omega, t, log_s), concatenated to length 7.
    """
    omega = torch.tensor(transform.omega, dtype=torch.float64, requires_grad=True)
    translation = torch.tensor(transform.t, dtype=torch.float64, requires_grad=True)
    log_s = torch.tensor(transform.log_s, dtype=torch.float64, requires_grad=True)
    src = torch.as_tensor(np.asarray(source, dtype=np.float64))
    tgt = np.asarray(target, dtype=np.float64)
    loss = _torch_chamfer(_apply_torch(omega, translation, log_s, src), tgt, cKDTree(tgt))
    loss.backward()
    assert omega.grad is not None and translation.grad is not None and log_s.grad is not None
    grad = torch.cat([omega.grad, translation.grad, log_s.grad.reshape(1)]).numpy()
    return float(loss.detach()), grad


def _check_cloud(points: np.ndarray, name: str) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise RegistrationIllPosedError(f"{name} must be an (N, 3) array")
    if len(pts) < MIN_POINTS:
        raise RegistrationIllPosedError(
            f"{name} needs at least {MIN_POINTS} points, got {len(pts)}"
        )
    spread = np.linalg.norm(pts - pts.mean(axis=0), axis=1).max()
    if not np.isfinite(spread) or spread <= 1e-12 * (1.0 + np.abs(pts).max()):
        raise RegistrationIllPosedError(f"{name} points are all coincident")
    return pts


def _subsample(points: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    return points[np.sort(rng.choice(len(points), min(count, len(points)), replace=False))]


def _principal_axes(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0)
    _, vectors = np.linalg.eigh(centered.T @ centered / len(points))
    return vectors[:, ::-1]


def moment_initialization(
    source: np.ndarray, target: np.ndarray, rng: np.random.Generator
) -> Sim3Params:
    """
    Align centroids, RMS radii and principal axes.

    Of the four proper sign choices of the matched axes, the one with the
    lowest Chamfer distance wins.
    """
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    rms_s = np.sqrt(((source - mu_s) ** 2).sum(axis=1).mean())
    rms_t = np.sqrt(((target - mu_t) ** 2).sum(axis=1).mean())
    scale = rms_t / rms_s
    axes_s, axes_t = _principal_axes(source), _principal_axes(target)
    sub_s = source[rng.choice(len(source), min(INIT_SAMPLE, len(source)), replace=False)]
    sub_t = target[rng.choice(len(target), min(INIT_SAMPLE, len(target)), replace=False)]
    best: tuple[float, Sim3Params] | None = None
    for signs in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
        rotation = axes_t @ np.diag(signs) @ axes_s.T
        if np.linalg.det(rotation) < 0:
            rotation = axes_t @ np.diag([-s for s in signs]) @ axes_s.T
        candidate = Sim3Params.from_components(rotation, mu_t - scale * rotation @ mu_s, scale)
        value = chamfer_distance(sim3_apply(candidate, sub_s), sub_t)
        if best is None or value < best[0]:
            best = (value, candidate)
    assert best is not None
    return best[1]


def register(
    source: np.ndarray,
    target: np.ndarray,
    schedule: PyramidSchedule | None = None,
    seed: int = 0,
    moment_init: bool = True,
) -> RegistrationResult:
    """
    Estimate the similarity transform mapping ``source`` onto ``target``.

    Args:
        source: (N, 3) structured cloud
        target: (M, 3) noisy cloud
        schedule: pyramid levels; defaults to nine geometric levels
        seed: subsampling seed
        moment_init: start from the moment alignment instead of identity

    Returns:
        RegistrationResult; ``compose_levels(level_transforms)`` equals ``transform``

    Raises:
        RegistrationIllPosedError: fewer than four points or a degenerate cloud
    """
    src = _check_cloud(source, "source")
    tgt = _check_cloud(target, "target")
    schedule = schedule or PyramidSchedule.geometric()
    rng = numpy_rng(seed, "registration")
    extent = float(np.linalg.norm(tgt.max(axis=0) - tgt.min(axis=0)))

    initial = moment_initialization(src, tgt, rng) if moment_init else Sim3Params.identity()
    levels = [initial]
    total = compose_levels(levels)
    residuals = []
    for depth, level in enumerate(schedule.levels):
        moved = sim3_apply(total, src)
        if level.subsample is None:
            sub_src, sub_tgt = moved, tgt
        else:
            sub_src = _subsample(moved, level.subsample, rng)
            sub_tgt = _subsample(tgt, level.subsample, rng)
        tree = cKDTree(sub_tgt)
        points = torch.as_tensor(sub_src)
        omega = torch.zeros(3, dtype=torch.float64, requires_grad=True)
        t_raw = torch.zeros(3, dtype=torch.float64, requires_grad=True)
        log_s = torch.zeros((), dtype=torch.float64, requires_grad=True)
        optimizer = torch.optim.Adam([omega, t_raw, log_s], lr=level.learning_rate)
        # Translation is optimized in units of the target extent.
        for _ in range(level.iterations):
            optimizer.zero_grad()
            loss = _torch_chamfer(_apply_torch(omega, t_raw * extent, log_s, points), sub_tgt, tree)
            loss.backward()
            optimizer.step()
        delta = Sim3Params.from_components(
            rodrigues(omega.detach()).numpy(),
            (t_raw.detach() * extent).numpy(),
            float(np.exp(log_s.item())),
        )
        levels.append(delta)
        total = compose_levels(levels)
        residuals.append(chamfer_distance(sim3_apply(total, src), tgt))
        logger.debug("registration level %d: residual %.3e", depth, residuals[-1])

    residual = chamfer_distance(sim3_apply(total, src), tgt)
    logger.info("registered %d -> %d points, residual %.3e", len(src), len(tgt), residual)
    return RegistrationResult(
        transform=total, residual=residual, level_transforms=levels, level_residuals=residuals
    )
