"""
Information-field view planning.

Each primitive carries a potential E = -log P. A candidate camera is scored
by the information field intensity: the sum over its pixels of E times the
blend weight of every contributor. The planner greedily picks the candidate
with the largest intensity, observes it, optimizes the cloud on the selected
set and updates E from a no-reference quality heatmap of the renders.
"""

import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Protocol

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial import cKDTree

from ..core.config import CoarseConfig, PlannerConfig, RasterConfig
from ..core.errors import ConfigurationError, PlannerExhaustedError, UsageError
from ..core.gaussians import GaussianCloud
from ..core.loss_registry import LossContext, LossStage
from ..core.models import Camera, ViewPolicy
from ..core.views import TrainingView, ViewProvider
from ..utils.seeding import numpy_rng
from .coarse_trainer import CoarseTrainer
from .planar_losses import luminance
from .rasterizer import Rasterizer, RenderBuffers

logger = logging.getLogger(__name__)


# =============================================================================
# Quality scorers
# =============================================================================


class QualityScorer(Protocol):
    """No-reference quality heatmap in [0, 1]; 1 marks unreliable pixels."""

    def score(self, image: torch.Tensor, previous: torch.Tensor | None = None) -> torch.Tensor: ...


class ConstantScorer:
    """Uniform heatmap, mostly useful in tests and ablations."""

    def __init__(self, value: float) -> None:
        self.value = float(np.clip(value, 0.0, 1.0))

    def score(self, image: torch.Tensor, previous: torch.Tensor | None = None) -> torch.Tensor:
        return torch.full(image.shape[:2], self.value, dtype=torch.float64)


class ProxyQualityScorer:
    """
    Blend of temporal instability and a naturalness statistic.

    temporal: mean absolute color change against the render from an earlier
    optimization step, divided by ``difference_scale``.
    naturalness: deviation of the local gradient-magnitude mean from the
    image-wide statistics, in units of ``3 * global std``.
    """

    def __init__(
        self, temporal_weight: float = 0.5, difference_scale: float = 0.1, window: int = 7
    ) -> None:
        self.temporal_weight = temporal_weight
        self.difference_scale = difference_scale
        self.window = window

    def naturalness(self, image: np.ndarray) -> np.ndarray:
        gray = luminance(image)
        grad = np.hypot(
            ndimage.sobel(gray, axis=0, mode="nearest"), ndimage.sobel(gray, axis=1, mode="nearest")
        )
        local = ndimage.uniform_filter(grad, size=self.window, mode="nearest")
        spread = grad.std()
        if spread < 1e-12:
            return np.zeros_like(gray)
        return np.clip(np.abs(local - grad.mean()) / (3.0 * spread), 0.0, 1.0)

    def score(self, image: torch.Tensor, previous: torch.Tensor | None = None) -> torch.Tensor:
        current = image.detach().to(torch.float64).cpu().numpy()
        natural = self.naturalness(current)
        if previous is None:
            heat = natural
        else:
            before = previous.detach().to(torch.float64).cpu().numpy()
            diff = np.abs(current - before)
            diff = diff.mean(axis=-1) if diff.ndim == 3 else diff
            temporal = np.clip(diff / self.difference_scale, 0.0, 1.0)
            heat = self.temporal_weight * temporal + (1.0 - self.temporal_weight) * natural
        return torch.as_tensor(np.clip(heat, 0.0, 1.0))


# =============================================================================
# Information field
# =============================================================================


@dataclass
class InfoFieldState:
    """Potentials, selected views in order and the remaining candidates."""

    potential: torch.Tensor
    selected: list[int] = field(default_factory=list)
    remaining: list[int] = field(default_factory=list)
    ifi_trace: list[dict[int, float]] = field(default_factory=list)

    @classmethod
    def initial(
        cls, num_primitives: int, candidate_ids: Sequence[int], potential: float = 1.0
    ) -> "InfoFieldState":
        return cls(
            potential=torch.full((num_primitives,), potential, dtype=torch.float64),
            remaining=sorted(candidate_ids),
        )

    @property
    def reliability(self) -> torch.Tensor:
        return torch.exp(-self.potential)

    def select(self, view_id: int) -> None:
        if view_id not in self.remaining:
            raise UsageError(f"view {view_id} is not a remaining candidate")
        self.remaining.remove(view_id)
        self.selected.append(view_id)

    def with_potential(self, potential: torch.Tensor) -> "InfoFieldState":
        return replace(self, potential=potential.detach().to(torch.float64).clone())


def _checked_potential(state: InfoFieldState, cloud: GaussianCloud) -> torch.Tensor:
    if state.potential.shape[0] != cloud.num:
        raise UsageError(
            f"state holds {state.potential.shape[0]} potentials for a cloud of {cloud.num}"
        )
    return state.potential


def potential_field(
    state: InfoFieldState,
    cloud: GaussianCloud,
    cam: Camera,
    rasterizer: Rasterizer | None = None,
    buffers: RenderBuffers | None = None,
) -> torch.Tensor:
    """
    Per-pixel, per-contributor potentials E_i * w_i, shape (H, W, K).

    Padding slots of the contributor lists hold 0.
    """
    potential = _checked_potential(state, cloud)
    if buffers is None:
        with torch.no_grad():
            buffers = (rasterizer or Rasterizer()).render(cloud.detach(), cam)
    ids = buffers.contributor_ids
    valid = ids >= 0
    energy = potential[ids.clamp_min(0)]
    weights = buffers.contributor_weights.detach().to(torch.float64)
    return torch.where(valid, energy * weights, torch.zeros_like(weights))


def ifi(
    state: InfoFieldState,
    cloud: GaussianCloud,
    cam: Camera,
    rasterizer: Rasterizer | None = None,
    pixel_mask: torch.Tensor | None = None,
) -> float:
    """
    Information field intensity of a candidate camera.

    Args:
        state: current potentials
        cloud: current cloud
        cam: candidate pose; its image is never needed
        rasterizer: renderer to reuse
        pixel_mask: optional (H, W) boolean restriction of the summed rays

    Returns:
        Non-negative scalar; 0 for a fully reliable cloud
    """
    psi = potential_field(state, cloud, cam, rasterizer)
    per_pixel = psi.sum(dim=-1)
    if pixel_mask is not None:
        per_pixel = per_pixel[torch.as_tensor(pixel_mask, dtype=torch.bool)]
    return float(per_pixel.sum())


def score_candidates(
    state: InfoFieldState,
    cloud: GaussianCloud,
    candidates: dict[int, Camera],
    raster_config: RasterConfig | None = None,
    scale: float = 1.0,
    workers: int = 1,
) -> dict[int, float]:
    """IFI of every remaining candidate; evaluations share a read-only cloud snapshot."""
    snapshot = cloud.detach()
    ids = list(state.remaining)

    def evaluate(view_id: int) -> float:
        cam = candidates[view_id]
        cam = cam.rescaled(scale) if scale != 1.0 else cam
        return ifi(state, snapshot, cam, Rasterizer(raster_config))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(evaluate, ids))
    else:
        values = [evaluate(view_id) for view_id in ids]
    return dict(zip(ids, values, strict=True))


def select_next_view(
    state: InfoFieldState,
    cloud: GaussianCloud,
    candidates: dict[int, Camera],
    raster_config: RasterConfig | None = None,
    scale: float = 1.0,
    workers: int = 1,
) -> int:
    """
    Move the remaining candidate with the largest IFI into the selected set.

    Ties go to the lowest camera id; the scores are appended to ``state.ifi_trace``.

    Raises:
        PlannerExhaustedError: no candidates remain
    """
    if not state.remaining:
        raise PlannerExhaustedError("no remaining candidate views")
    scores = score_candidates(state, cloud, candidates, raster_config, scale, workers)
    best = min(scores, key=lambda view_id: (-scores[view_id], view_id))
    state.ifi_trace.append(scores)
    state.select(best)
    logger.info("selected view %d (ifi %.4f)", best, scores[best])
    return best


def update_reliability(
    state: InfoFieldState,
    cloud: GaussianCloud,
    scorer: QualityScorer,
    cams: Sequence[Camera],
    renders: Sequence[RenderBuffers],
    config: PlannerConfig | None = None,
    previous: Sequence[torch.Tensor | None] | None = None,
) -> InfoFieldState:
    """
    Accumulate heatmap evidence into the potentials.

    The increment of a primitive is sum(heat * w) / sum(w) over all its pixels
    in all given views. Seen primitives whose increment falls below
    ``reliable_heat`` have their potential multiplied by ``decay`` (unless
    strict); other seen primitives add the increment. Unseen ones keep E.

    Raises:
        UsageError: renders and cameras differ in number
    """
    cfg = config or PlannerConfig()
    if len(cams) != len(renders):
        raise UsageError(f"{len(renders)} renders for {len(cams)} cameras")
    potential = _checked_potential(state, cloud)
    numerator = torch.zeros_like(potential)
    denominator = torch.zeros_like(potential)
    earlier = list(previous) if previous is not None else [None] * len(renders)
    for buffers, before in zip(renders, earlier, strict=True):
        heat = scorer.score(buffers.color, before).to(torch.float64)
        if tuple(heat.shape) != (buffers.height, buffers.width):
            raise UsageError("quality heatmap must match the render resolution")
        ids = buffers.contributor_ids.reshape(-1)
        weights = buffers.contributor_weights.detach().to(torch.float64).reshape(-1)
        pixel_heat = heat[..., None].expand_as(buffers.contributor_weights).reshape(-1)
        valid = ids >= 0
        numerator.scatter_add_(0, ids[valid], (pixel_heat * weights)[valid])
        denominator.scatter_add_(0, ids[valid], weights[valid])
    seen = denominator > 0
    increment = torch.where(
        seen, numerator / denominator.clamp_min(1e-300), torch.zeros_like(numerator)
    )
    updated = potential.clone()
    if cfg.strict:
        updated[seen] += increment[seen]
    else:
        reliable = seen & (increment < cfg.reliable_heat)
        unreliable = seen & ~reliable
        updated[reliable] *= cfg.decay
        updated[unreliable] += increment[unreliable]
    logger.debug(
        "reliability update: %d seen, mean increment %.4f",
        int(seen.sum()),
        float(increment[seen].mean()) if bool(seen.any()) else 0.0,
    )
    return state.with_potential(updated)


# =============================================================================
# Planning loop
# =============================================================================


@dataclass
class PlanResult:
    """Selected view ids in order, per-round IFI scores and the planner's cloud."""

    selected: list[int]
    ifi_trace: list[dict[int, float]]
    cloud: GaussianCloud
    views: list[TrainingView]
    policy: ViewPolicy = ViewPolicy.OPTIMAL

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "policy": self.policy.value,
            "selected": list(self.selected),
            "ifi_trace": [
                {str(view_id): score for view_id, score in sorted(scores.items())}
                for scores in self.ifi_trace
            ],
        }


def backproject_depth(view: TrainingView) -> tuple[np.ndarray, np.ndarray]:
    """World points and colors of every pixel with a positive pseudo-depth."""
    if view.pseudo_depth is None:
        return np.zeros((0, 3)), np.zeros((0, 3))
    cam = view.camera
    depth = view.pseudo_depth.detach().to(torch.float64).cpu().numpy()
    ys, xs = np.nonzero(depth > 0)
    z = depth[ys, xs]
    rays = np.stack(
        [(xs + 0.5 - cam.cx) / cam.fx, (ys + 0.5 - cam.cy) / cam.fy, np.ones_like(z)], -1
    )
    points_cam = rays * z[:, None]
    points = (points_cam - cam.translation) @ cam.rotation
    colors = view.image.detach().to(torch.float64).cpu().numpy()[ys, xs]
    return points, colors


def initial_cloud(
    view: TrainingView,
    bounds: tuple[np.ndarray, np.ndarray],
    config: PlannerConfig,
    rng: np.random.Generator,
    part_count: int = 1,
) -> GaussianCloud:
    """
    Back-projected pseudo-depth of the first view plus uniform fill of the bounds.

    Scales start at the mean distance to the three nearest neighbours.
    """
    points, colors = backproject_depth(view)
    if len(points) > config.init_points:
        pick = rng.choice(len(points), size=config.init_points, replace=False)
        points, colors = points[np.sort(pick)], colors[np.sort(pick)]
    low, high = bounds
    fill = rng.uniform(low, high, size=(config.init_random_points, 3))
    points = np.vstack([points, fill])
    colors = np.vstack([colors, np.full((len(fill), 3), 0.5)])
    if len(points) == 0:
        raise UsageError("no points to initialize the planner cloud")
    neighbours = min(4, len(points))
    if neighbours > 1:
        dist, _ = cKDTree(points).query(points, k=neighbours)
        scale = np.maximum(dist[:, 1:].mean(axis=1), 1e-4)
    else:
        scale = np.full(len(points), 0.01)
    return GaussianCloud.from_points(
        points,
        colors,
        scale=scale,
        opacity=0.1,
        potential=config.init_potential,
        part_count=part_count,
    )


def predefined_views(candidates: Sequence[Camera], k: int, center: np.ndarray) -> list[int]:
    """K candidates nearest to evenly spaced azimuths on the median-elevation ring."""
    directions = np.stack([c.center - center for c in candidates])
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    elevation = float(np.median(np.arcsin(np.clip(directions[:, 2], -1.0, 1.0))))
    chosen: list[int] = []
    for j in range(k):
        azimuth = 2.0 * np.pi * j / k
        ring = np.cos(elevation)
        target = np.array([ring * np.cos(azimuth), ring * np.sin(azimuth), np.sin(elevation)])
        order = np.argsort(-(directions @ target), kind="stable")
        pick = next(int(i) for i in order if candidates[int(i)].id not in chosen)
        chosen.append(candidates[pick].id)
    return chosen


class ViewPlanner:
    """
    Greedy information-field planner.

    The provider is only asked to observe views that have been selected.
    """

    def __init__(
        self,
        config: PlannerConfig | None = None,
        raster_config: RasterConfig | None = None,
        coarse_config: CoarseConfig | None = None,
        scorer: QualityScorer | None = None,
        seed: int = 0,
    ) -> None:
        self.config = config or PlannerConfig()
        self.raster_config = raster_config
        base = coarse_config or CoarseConfig()
        self.coarse_config = base.model_copy(update={"iterations": self.config.steps_per_round})
        self.scorer = scorer or ProxyQualityScorer(temporal_weight=self.config.temporal_weight)
        self.seed = seed

    def plan(
        self,
        candidates: Sequence[Camera],
        k: int,
        provider: ViewProvider,
        policy: ViewPolicy = ViewPolicy.OPTIMAL,
        part_count: int = 1,
    ) -> PlanResult:
        """
        Select ``k`` views from ``candidates``.

        Raises:
            ConfigurationError: k < 1 or k exceeds the candidate count
        """
        if k < 1 or k > len(candidates):
            raise ConfigurationError(f"cannot select {k} views from {len(candidates)} candidates")
        by_id = {cam.id: cam for cam in candidates}
        if len(by_id) != len(candidates):
            raise ConfigurationError("candidate camera ids must be unique")
        rng = numpy_rng(self.seed, "planner")
        ordered = sorted(by_id)
        first = ordered[int(rng.integers(len(ordered)))]
        low, high = provider.scene_bounds()
        center = (np.asarray(low) + np.asarray(high)) / 2.0

        if policy == ViewPolicy.PREDEFINED:
            chosen = predefined_views([by_id[i] for i in ordered], k, center)
        elif policy == ViewPolicy.RANDOM:
            others = [i for i in ordered if i != first]
            extra = rng.choice(len(others), size=k - 1, replace=False) if k > 1 else []
            chosen = [first] + [others[int(i)] for i in extra]
        else:
            return self._plan_optimal(by_id, first, k, provider, (low, high), rng, part_count)

        views = [provider.observe(by_id[i]) for i in chosen]
        cloud = initial_cloud(views[0], (low, high), self.config, rng, part_count)
        cloud = self._optimize(cloud, views, round_index=0)[0]
        logger.info("%s policy selected %s", policy.value, chosen)
        return PlanResult(selected=chosen, ifi_trace=[], cloud=cloud, views=views, policy=policy)

    def _plan_optimal(
        self,
        by_id: dict[int, Camera],
        first: int,
        k: int,
        provider: ViewProvider,
        bounds: tuple[np.ndarray, np.ndarray],
        rng: np.random.Generator,
        part_count: int,
    ) -> PlanResult:
        views = [provider.observe(by_id[first])]
        cloud = initial_cloud(views[0], bounds, self.config, rng, part_count)
        state = InfoFieldState.initial(cloud.num, list(by_id), self.config.init_potential)
        state.select(first)
        cloud, state = self._optimize_and_update(cloud, views, state, round_index=0)
        for round_index in range(1, k):
            chosen = select_next_view(
                state,
                cloud,
                by_id,
                self.raster_config,
                scale=self.config.ifi_scale,
                workers=self.config.parallel_workers,
            )
            views.append(provider.observe(by_id[chosen]))
            cloud, state = self._optimize_and_update(cloud, views, state, round_index)
        return PlanResult(
            selected=list(state.selected), ifi_trace=state.ifi_trace, cloud=cloud, views=views
        )

    def _optimize(
        self, cloud: GaussianCloud, views: list[TrainingView], round_index: int
    ) -> tuple[GaussianCloud, list[torch.Tensor | None]]:
        """
        Color-only training on the selected views.

        Also returns each view's render from ``temporal_lag`` steps before the end.
        """
        steps = self.config.steps_per_round
        snapshot_at = steps - self.config.temporal_lag
        earlier: list[torch.Tensor | None] = [None] * len(views)
        rasterizer = Rasterizer(self.raster_config)

        def capture(iteration: int, context: LossContext) -> None:
            if iteration == snapshot_at:
                live = context["cloud"].detach()
                with torch.no_grad():
                    for slot, view in enumerate(views):
                        earlier[slot] = rasterizer.render(live, view.camera).color

        trainer = CoarseTrainer(
            self.coarse_config,
            self.raster_config,
            seed=self.seed + 7919 * round_index,
            stage=LossStage.PLANNER,
        )
        result = trainer.train(cloud, views, iterations=steps, context_hook=capture)
        return result.cloud, earlier

    def _optimize_and_update(
        self,
        cloud: GaussianCloud,
        views: list[TrainingView],
        state: InfoFieldState,
        round_index: int,
    ) -> tuple[GaussianCloud, InfoFieldState]:
        cloud = replace(cloud, potential=state.potential.to(cloud.dtype))
        trained, earlier = self._optimize(cloud, views, round_index)
        state = state.with_potential(trained.potential)
        rasterizer = Rasterizer(self.raster_config)
        with torch.no_grad():
            renders = [rasterizer.render(trained, view.camera) for view in views]
        state = update_reliability(
            state, trained, self.scorer, [v.camera for v in views], renders, self.config, earlier
        )
        return replace(trained, potential=state.potential.to(trained.dtype)), state


def plan_views(
    candidates: Sequence[Camera],
    k: int,
    provider: ViewProvider,
    config: PlannerConfig | None = None,
    seed: int = 0,
    policy: ViewPolicy = ViewPolicy.OPTIMAL,
    raster_config: RasterConfig | None = None,
    coarse_config: CoarseConfig | None = None,
) -> PlanResult:
    """
    Convenience function for view planning.

    Args:
        candidates: candidate poses (ids unique)
        k: number of views to select
        provider: observes a view only once it is selected
        config: planner settings
        seed: manifest seed
        policy: optimal, random or predefined
        raster_config: renderer settings
        coarse_config: base settings for the inter-selection optimization

    Returns:
        PlanResult with the ids in selection order
    """
    planner = ViewPlanner(config, raster_config, coarse_config, seed=seed)
    return planner.plan(candidates, k, provider, policy=policy)
