"""
Coarse planar-Gaussian training.

L_coarse = L_color + lambda_scale L_scale + lambda_depth L_depth + lambda_smooth L_smooth,
assembled from a LossRegistry and minimized with Adam (one parameter group
per primitive attribute). Densification clones or splits primitives with
large view-space gradients and prunes transparent ones, carrying the Adam
moments through every resize.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import torch
from torch import nn

from ..core.config import CoarseConfig, RasterConfig
from ..core.errors import TrainingDivergedError, UsageError, WarningCounter
from ..core.gaussians import TRAINABLE_FIELDS, GaussianCloud
from ..core.geometry import quaternion_to_matrix
from ..core.loss_registry import LossBreakdown, LossContext, LossRegistry, LossStage, LossTerm
from ..core.views import TrainingView
from ..utils.seeding import torch_generator
from .planar_losses import (
    DepthCorrection,
    RegionSegmentation,
    loss_color,
    loss_depth_reg,
    loss_depth_smooth,
    loss_scale,
    segment_regions,
    sobel_edge_mask,
)
from .rasterizer import Rasterizer, RenderBuffers

logger = logging.getLogger(__name__)


@dataclass
class PreparedView:
    """A training view with its region labels and edge mask precomputed."""

    view: TrainingView
    regions: RegionSegmentation | None = None
    edge_mask: np.ndarray | None = None


@dataclass
class TrainingResult:
    """Trained cloud, depth-correction state and the per-iteration log."""

    cloud: GaussianCloud
    correction: DepthCorrection | None
    log: pd.DataFrame
    iterations: int
    warnings: WarningCounter = field(default_factory=WarningCounter)

    def save_log(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self.log.to_csv(path, index=False)


# =============================================================================
# Loss terms
# =============================================================================


def _zero(context: LossContext) -> torch.Tensor:
    return torch.zeros((), dtype=context.get("dtype", torch.float32))


def _term_color(context: LossContext) -> torch.Tensor:
    buffers: RenderBuffers = context["buffers"]
    return loss_color(buffers.color, context["target"])


def _term_scale(context: LossContext) -> torch.Tensor:
    return loss_scale(context["cloud"])


def _planar_target(context: LossContext) -> tuple[PreparedView, RenderBuffers]:
    """Prepared view and render the depth terms compare; refinement overrides both."""
    if "planar_prepared" in context:
        return context["planar_prepared"], context["planar_buffers"]
    return context["prepared"], context["buffers"]


def _term_depth(context: LossContext) -> torch.Tensor:
    prepared, buffers = _planar_target(context)
    if prepared.view.pseudo_depth is None:
        return _zero(context)
    config: CoarseConfig = context["config"]
    return loss_depth_reg(
        buffers.depth,
        prepared.view.pseudo_depth,
        buffers.alpha,
        correction=context.get("correction"),
        view_id=prepared.view.view_id,
        alpha_threshold=config.depth_alpha_threshold,
        warnings=context.get("warnings"),
    )


def _term_smooth(context: LossContext) -> torch.Tensor:
    prepared, buffers = _planar_target(context)
    if prepared.regions is None or prepared.edge_mask is None:
        return _zero(context)
    config: CoarseConfig = context["config"]
    return loss_depth_smooth(
        buffers.depth,
        prepared.regions.labels,
        prepared.edge_mask,
        reduction=config.smooth_reduction,
    )


def build_loss_registry(config: CoarseConfig) -> LossRegistry:
    """Registry with the color term and the three planar terms weighted from ``config``."""
    registry = LossRegistry()
    registry.add_term(
        LossTerm(
            term_id="LC-001",
            name="color",
            description="0.8 L1 + 0.2 (1 - SSIM) against the observed image",
            stages=(LossStage.PLANNER, LossStage.COARSE),
            fn=_term_color,
        )
    )
    registry.add_term(
        LossTerm(
            term_id="LP-001",
            name="scale",
            description="Mean smallest scale (flattening)",
            stages=(LossStage.COARSE, LossStage.REFINE),
            weight=config.lambda_scale,
            fn=_term_scale,
        )
    )
    registry.add_term(
        LossTerm(
            term_id="LP-002",
            name="depth",
            description="Masked L1 to corrected pseudo-depth",
            stages=(LossStage.COARSE, LossStage.REFINE),
            weight=config.lambda_depth,
            fn=_term_depth,
        )
    )
    registry.add_term(
        LossTerm(
            term_id="LP-003",
            name="smooth",
            description="Region-gated, edge-masked depth total variation",
            stages=(LossStage.COARSE, LossStage.REFINE),
            weight=config.lambda_smooth,
            fn=_term_smooth,
        )
    )
    return registry


def prepare_views(
    views: list[TrainingView], config: CoarseConfig, seed: int = 0
) -> list[PreparedView]:
    """Segment each pseudo-depth into regions and compute the Sobel edge mask of each image."""
    prepared = []
    for view in views:
        regions = None
        if view.pseudo_depth is not None:
            if tuple(view.pseudo_depth.shape) != (view.camera.height, view.camera.width):
                raise UsageError(f"pseudo-depth of view {view.view_id} does not match its camera")
            regions = segment_regions(
                view.pseudo_depth, config.num_regions, seed=seed + view.view_id
            )
        edge = sobel_edge_mask(view.image, config.sobel_threshold)
        prepared.append(PreparedView(view=view, regions=regions, edge_mask=edge))
    return prepared


def image_psnr(render: torch.Tensor, target: torch.Tensor) -> float:
    mse = float(((render.detach() - target.to(render.dtype)) ** 2).mean())
    return 99.0 if mse <= 0 else -10.0 * math.log10(mse)


# =============================================================================
# Trainer
# =============================================================================


class CoarseTrainer:
    """
    Adam optimization of a Gaussian cloud against a set of training views.

    Example:
        trainer = CoarseTrainer(CoarseConfig(iterations=500), seed=7)
        result = trainer.train(cloud, views)
    """

    def __init__(
        self,
        config: CoarseConfig | None = None,
        raster_config: RasterConfig | None = None,
        seed: int = 0,
        stage: LossStage = LossStage.COARSE,
        registry: LossRegistry | None = None,
        densify: bool = True,
    ) -> None:
        self.config = config or CoarseConfig()
        self.rasterizer = Rasterizer(raster_config)
        self.seed = seed
        self.stage = stage
        self.registry = registry or build_loss_registry(self.config)
        self.densify = densify
        self.lr_factor = 1.0
        self.warnings = WarningCounter()

    # -------------------------------------------------------------------------
    # Public API
    # -------------------------------------------------------------------------

    def train(
        self,
        cloud: GaussianCloud,
        views: list[TrainingView],
        iterations: int | None = None,
        correction: DepthCorrection | None = None,
        context_hook: Any = None,
    ) -> TrainingResult:
        """
        Optimize ``cloud`` on ``views``.

        Args:
            cloud: starting cloud (not modified)
            views: at least one training view
            iterations: overrides config.iterations
            correction: depth-correction state to continue from
            context_hook: optional callable(iteration, context) adding entries
                to the loss context before evaluation (used by refinement)

        Returns:
            TrainingResult with the optimized cloud

        Raises:
            TrainingDivergedError: the loss became NaN or infinite
        """
        if not views:
            raise UsageError("training needs at least one view")
        cfg = self.config
        total = cfg.iterations if iterations is None else iterations
        if total == 0:
            return TrainingResult(
                cloud=cloud.clone(), correction=correction, log=pd.DataFrame(), iterations=0
            )

        prepared = prepare_views(views, cfg, seed=self.seed)
        has_depth = any(v.pseudo_depth is not None for v in views)
        if correction is None and self._uses_depth() and has_depth:
            cam = views[0].camera
            correction = DepthCorrection(
                [v.view_id for v in views],
                cam.height,
                cam.width,
                grid=cfg.offset_grid,
                freeze_scale=cfg.freeze_depth_scale,
                freeze_offset=cfg.freeze_depth_offset,
                dtype=cloud.dtype,
            )

        extent = max(cloud.extent(), 1e-3)
        params = {
            name: nn.Parameter(getattr(cloud, name).detach().clone()) for name in TRAINABLE_FIELDS
        }
        potential = cloud.potential.detach().clone()
        part_probs = cloud.part_probs.detach().clone()
        optimizer = self._make_optimizer(params, extent)
        correction_opt = self._make_correction_optimizer(correction)

        generator = torch_generator(self.seed, "trainer")
        grad_accum = torch.zeros(cloud.num, dtype=torch.float64)
        grad_count = torch.zeros(cloud.num, dtype=torch.float64)
        densify_until = int(cfg.densify_until_fraction * total)
        rows: list[dict[str, float]] = []

        for iteration in range(1, total + 1):
            live = GaussianCloud(
                potential=potential,
                part_probs=part_probs,
                **{n: params[n] for n in TRAINABLE_FIELDS},
            )
            item = self._next_item(iteration, prepared, generator, live)
            buffers = self.rasterizer.render(live, item.view.camera)
            context: LossContext = {
                "buffers": buffers,
                "target": item.view.image.to(cloud.dtype),
                "cloud": live,
                "prepared": item,
                "correction": correction,
                "config": cfg,
                "warnings": self.warnings,
                "dtype": cloud.dtype,
                "iteration": iteration,
                "rasterizer": self.rasterizer,
            }
            if context_hook is not None:
                context_hook(iteration, context)
            breakdown = self.registry.evaluate(self.stage, context)
            if not bool(torch.isfinite(breakdown.total)):
                raise TrainingDivergedError(
                    f"non-finite loss at iteration {iteration} (view {item.view.view_id})",
                    snapshot=self._snapshot(iteration, item.view.view_id, breakdown, params),
                )

            optimizer.zero_grad(set_to_none=True)
            if correction_opt is not None:
                correction_opt.zero_grad(set_to_none=True)
            if breakdown.total.requires_grad:
                breakdown.total.backward()
            optimizer.step()
            if correction_opt is not None:
                correction_opt.step()
            with torch.no_grad():
                params["colors"].clamp_(0.0, 1.0)

            if buffers.means2d.grad is not None:
                cam = item.view.camera
                ndc_scale = torch.tensor([0.5 * cam.width, 0.5 * cam.height], dtype=torch.float64)
                grad = (buffers.means2d.grad.detach().to(torch.float64) * ndc_scale).norm(dim=-1)
                grad_accum[buffers.visible] += grad[buffers.visible]
                grad_count[buffers.visible] += 1

            if (
                self.densify
                and iteration >= cfg.densify_from
                and iteration <= densify_until
                and iteration % cfg.densify_interval == 0
            ):
                mean_grad = grad_accum / grad_count.clamp_min(1.0)
                params, potential, part_probs = self._densify_and_prune(
                    params, potential, part_probs, optimizer, mean_grad, extent, generator
                )
                grad_accum = torch.zeros(params["means"].shape[0], dtype=torch.float64)
                grad_count = torch.zeros(params["means"].shape[0], dtype=torch.float64)

            if iteration % cfg.log_every == 0 or iteration == total:
                row = {"iteration": float(iteration), "view": float(item.view.view_id)}
                row.update(breakdown.as_row())
                row["psnr_train"] = image_psnr(buffers.color, context["target"])
                row["num_primitives"] = float(params["means"].shape[0])
                rows.append(row)
                logger.debug("iter %d loss %.6f", iteration, row["loss"])

        trained = GaussianCloud(
            potential=potential,
            part_probs=part_probs,
            **{name: params[name].detach().clone() for name in TRAINABLE_FIELDS},
        )
        logger.info(
            "trained %d iterations on %d views: %d primitives", total, len(views), trained.num
        )
        return TrainingResult(
            cloud=trained,
            correction=correction,
            log=pd.DataFrame(rows),
            iterations=total,
            warnings=self.warnings,
        )

    def _next_item(
        self,
        iteration: int,
        prepared: list[PreparedView],
        generator: torch.Generator,
        live: GaussianCloud,
    ) -> PreparedView:
        """Pick the view optimized at ``iteration``; uniform over the training views."""
        index = int(torch.randint(len(prepared), (1,), generator=generator))
        return prepared[index]

    # -------------------------------------------------------------------------
    # Optimizers
    # -------------------------------------------------------------------------

    def _uses_depth(self) -> bool:
        term = self.registry.find("depth")
        return term is not None and term.enabled and term.weight > 0 and self.stage in term.stages

    def _make_optimizer(self, params: dict[str, nn.Parameter], extent: float) -> torch.optim.Adam:
        cfg = self.config
        rates = {
            "means": cfg.lr_position * extent,
            "quats": cfg.lr_rotation,
            "log_scales": cfg.lr_scale,
            "opacity_logits": cfg.lr_opacity,
            "colors": cfg.lr_color,
        }
        groups = [
            {"params": [params[name]], "lr": rates[name] * self.lr_factor, "name": name}
            for name in TRAINABLE_FIELDS
        ]
        return torch.optim.Adam(groups, lr=0.0, eps=1e-15)

    def _make_correction_optimizer(
        self, correction: DepthCorrection | None
    ) -> torch.optim.Adam | None:
        if correction is None:
            return None
        groups = []
        if correction.log_phi.requires_grad:
            groups.append({"params": [correction.log_phi], "lr": self.config.lr_depth_scale})
        if correction.eta.requires_grad:
            groups.append({"params": [correction.eta], "lr": self.config.lr_depth_offset})
        return torch.optim.Adam(groups) if groups else None

    # -------------------------------------------------------------------------
    # Densification
    # -------------------------------------------------------------------------

    def _densify_and_prune(
        self,
        params: dict[str, nn.Parameter],
        potential: torch.Tensor,
        part_probs: torch.Tensor,
        optimizer: torch.optim.Adam,
        grads: torch.Tensor,
        extent: float,
        generator: torch.Generator,
    ) -> tuple[dict[str, nn.Parameter], torch.Tensor, torch.Tensor]:
        cfg = self.config
        with torch.no_grad():
            scales = torch.exp(params["log_scales"])
            max_scale = scales.max(dim=-1).values.to(torch.float64)
            selected = grads >= cfg.densify_grad_threshold
            small = max_scale <= cfg.percent_dense * extent
            clone_mask = selected & small
            split_mask = selected & ~small
            count = params["means"].shape[0]
            growth = int(clone_mask.sum()) + int(split_mask.sum())
            if count + growth > cfg.max_primitives:
                logger.debug("densification skipped: %d + %d exceeds the cap", count, growth)
                clone_mask = torch.zeros_like(clone_mask)
                split_mask = torch.zeros_like(split_mask)

            extension: dict[str, torch.Tensor] = {}
            split_idx = torch.nonzero(split_mask).squeeze(-1)
            clone_idx = torch.nonzero(clone_mask).squeeze(-1)
            for name in TRAINABLE_FIELDS:
                extension[name] = params[name].detach()[clone_idx]
            new_potential = [potential[clone_idx]]
            new_probs = [part_probs[clone_idx]]
            if split_idx.numel():
                repeat_idx = split_idx.repeat(2)
                stds = scales[repeat_idx]
                noise = torch.randn(stds.shape, generator=generator, dtype=torch.float64)
                samples = noise.to(stds.dtype) * stds
                rot = quaternion_to_matrix(params["quats"].detach()[repeat_idx])
                offsets = (rot @ samples.unsqueeze(-1)).squeeze(-1)
                split_values = {
                    "means": params["means"].detach()[repeat_idx] + offsets,
                    "quats": params["quats"].detach()[repeat_idx],
                    "log_scales": torch.log(stds / 1.6),
                    "opacity_logits": params["opacity_logits"].detach()[repeat_idx],
                    "colors": params["colors"].detach()[repeat_idx],
                }
                for name in TRAINABLE_FIELDS:
                    extension[name] = torch.cat([extension[name], split_values[name]])
                new_potential.append(potential[repeat_idx])
                new_probs.append(part_probs[repeat_idx])
            if extension["means"].shape[0]:
                params = self._extend_optimizer(optimizer, extension)
                potential = torch.cat([potential, *new_potential])
                part_probs = torch.cat([part_probs, *new_probs])

            total = params["means"].shape[0]
            prune = torch.zeros(total, dtype=torch.bool)
            prune[: split_mask.shape[0]] |= split_mask
            prune |= torch.sigmoid(params["opacity_logits"].detach()) < cfg.prune_opacity
            for name in TRAINABLE_FIELDS:
                values = params[name].detach()
                prune |= ~torch.isfinite(values.reshape(total, -1)).all(dim=-1)
            if bool(prune.all()):
                self.warnings.bump("prune_all_skipped")
                logger.warning("pruning would remove every primitive; skipped")
                return params, potential, part_probs
            if bool(prune.any()):
                keep = ~prune
                params = self._mask_optimizer(optimizer, keep)
                potential = potential[keep]
                part_probs = part_probs[keep]
            logger.debug(
                "densify: +%d clone, +%d split, -%d pruned -> %d",
                int(clone_mask.sum()),
                int(split_mask.sum()),
                int(prune.sum()),
                params["means"].shape[0],
            )
        return params, potential, part_probs

    @staticmethod
    def _extend_optimizer(
        optimizer: torch.optim.Adam, extension: dict[str, torch.Tensor]
    ) -> dict[str, nn.Parameter]:
        """Append rows to every parameter group; new rows start with zero moments."""
        updated = {}
        for group in optimizer.param_groups:
            old = group["params"][0]
            rows = extension[group["name"]].to(old.dtype)
            state = optimizer.state.pop(old, None)
            new = nn.Parameter(torch.cat([old.detach(), rows]))
            if state is not None:
                state["exp_avg"] = torch.cat([state["exp_avg"], torch.zeros_like(rows)])
                state["exp_avg_sq"] = torch.cat([state["exp_avg_sq"], torch.zeros_like(rows)])
                optimizer.state[new] = state
            group["params"][0] = new
            updated[group["name"]] = new
        return updated

    @staticmethod
    def _mask_optimizer(optimizer: torch.optim.Adam, keep: torch.Tensor) -> dict[str, nn.Parameter]:
        updated = {}
        for group in optimizer.param_groups:
            old = group["params"][0]
            state = optimizer.state.pop(old, None)
            new = nn.Parameter(old.detach()[keep].clone())
            if state is not None:
                state["exp_avg"] = state["exp_avg"][keep]
                state["exp_avg_sq"] = state["exp_avg_sq"][keep]
                optimizer.state[new] = state
            group["params"][0] = new
            updated[group["name"]] = new
        return updated

    @staticmethod
    def _snapshot(
        iteration: int, view_id: int, breakdown: LossBreakdown, params: dict[str, nn.Parameter]
    ) -> dict[str, Any]:
        stats = {}
        for name, value in params.items():
            data = value.detach()
            finite = data[torch.isfinite(data)]
            stats[name] = {
                "finite_fraction": float(torch.isfinite(data).float().mean()),
                "min": float(finite.min()) if finite.numel() else float("nan"),
                "max": float(finite.max()) if finite.numel() else float("nan"),
            }
        return {
            "iteration": iteration,
            "view_id": view_id,
            "terms": dict(breakdown.terms),
            "num_primitives": int(params["means"].shape[0]),
            "parameters": stats,
        }


def train_coarse(
    cloud: GaussianCloud,
    views: list[TrainingView],
    config: CoarseConfig | None = None,
    raster_config: RasterConfig | None = None,
    seed: int = 0,
) -> TrainingResult:
    """
    Convenience function for coarse training.

    Args:
        cloud: initial cloud
        views: training views with images and optional pseudo-depth
        config: coarse settings
        raster_config: renderer settings
        seed: manifest seed for the trainer stream

    Returns:
        TrainingResult
    """
    return CoarseTrainer(config, raster_config, seed=seed).train(cloud, views)
