"""
Stage configuration models and TOML loading.
"""

import hashlib
import json
import tomllib
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, Field, ValidationError

from .errors import ConfigurationError
from .models import PyramidSchedule, ViewPolicy


class RasterConfig(BaseModel):
    """Splatting constants."""

    tile_size: int = Field(default=16, ge=1)
    min_alpha: float = Field(default=1.0 / 255.0, ge=0.0, lt=1.0)
    max_alpha: float = Field(default=0.99, gt=0.0, le=1.0)
    transmittance_min: float = Field(default=1e-4, ge=0.0)
    max_contributors: int = Field(default=64, ge=1)
    cov2d_floor: float = Field(
        default=0.3, ge=0.0, description="Added to the 2D covariance diagonal (px^2)"
    )
    sigma_extent: float = Field(default=3.0, gt=0.0)
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    depth_alpha_min: float = Field(default=1.0 / 255.0, ge=0.0)


class PlannerConfig(BaseModel):
    """Information-field view planner."""

    decay: float = Field(default=0.5, gt=0.0, le=1.0)
    strict: bool = Field(default=False, description="Disable reliability decay")
    reliable_heat: float = Field(default=0.05, ge=0.0, le=1.0)
    steps_per_round: int = Field(default=1000, ge=0)
    ifi_scale: float = Field(default=0.25, gt=0.0, le=1.0)
    temporal_lag: int = Field(default=200, ge=1)
    temporal_weight: float = Field(default=0.5, ge=0.0, le=1.0)
    init_points: int = Field(default=1500, ge=1)
    init_random_points: int = Field(default=500, ge=0)
    init_potential: float = Field(default=1.0, ge=0.0)
    parallel_workers: int = Field(default=1, ge=1)


class RegistrationConfig(BaseModel):
    """Coarse-to-fine sim3 registration."""

    num_levels: int = Field(default=9, ge=1)
    iterations: int = Field(default=60, ge=0)
    base_learning_rate: float = Field(default=0.05, gt=0.0)
    decay: float = Field(default=0.6, gt=0.0, le=1.0)
    min_subsample: int = Field(default=256, ge=4)
    moment_init: bool = True

    def schedule(self) -> PyramidSchedule:
        return PyramidSchedule.geometric(
            num_levels=self.num_levels,
            iterations=self.iterations,
            base_learning_rate=self.base_learning_rate,
            decay=self.decay,
            min_subsample=self.min_subsample,
        )


class CoarseConfig(BaseModel):
    """Coarse planar training: L_color + L_planar, with densification."""

    iterations: int = Field(default=6000, ge=0)
    lambda_scale: float = Field(default=100.0, ge=0.0)
    lambda_depth: float = Field(default=0.5, ge=0.0)
    lambda_smooth: float = Field(default=0.1, ge=0.0)
    num_regions: int = Field(default=4, ge=1)
    sobel_threshold: float = Field(default=0.1, ge=0.0)
    depth_alpha_threshold: float = Field(default=0.5, ge=0.0, le=1.0)
    offset_grid: int = Field(default=16, ge=1, description="1 selects strict scalar-offset mode")
    freeze_depth_scale: bool = False
    freeze_depth_offset: bool = False
    smooth_reduction: Literal["sum", "mean"] = "mean"
    densify_interval: int = Field(default=200, ge=1)
    densify_from: int = Field(default=100, ge=0)
    densify_until_fraction: float = Field(default=0.6, ge=0.0, le=1.0)
    densify_grad_threshold: float = Field(default=2e-4, ge=0.0)
    percent_dense: float = Field(default=0.01, gt=0.0)
    prune_opacity: float = Field(default=0.005, ge=0.0, lt=1.0)
    max_primitives: int = Field(default=20000, ge=1)
    lr_position: float = Field(default=1.6e-4, gt=0.0, description="Scaled by scene extent")
    lr_rotation: float = Field(default=1e-3, gt=0.0)
    lr_scale: float = Field(default=5e-3, gt=0.0)
    lr_opacity: float = Field(default=5e-2, gt=0.0)
    lr_color: float = Field(default=2.5e-3, gt=0.0)
    lr_depth_scale: float = Field(default=1e-2, gt=0.0)
    lr_depth_offset: float = Field(default=1e-2, gt=0.0)
    log_every: int = Field(default=50, ge=1)


class RefineConfig(BaseModel):
    """Refinement against a repair oracle."""

    iterations: int = Field(default=4000, ge=0)
    lambda_vc: float = Field(default=0.1, ge=0.0)
    perceptual_weight: float = Field(default=1.0, ge=0.0)
    ms_ssim_scales: int = Field(default=3, ge=1)
    d_theta_deg: float = Field(default=10.0, ge=0.0)
    d_t_fraction: float = Field(default=0.05, ge=0.0)
    patch_size: int = Field(default=7, ge=1)
    num_patches: int = Field(default=64, ge=1)
    max_in_flight: int = Field(default=4, ge=1)
    max_consecutive_failures: int = Field(default=10, ge=1)
    noisy_pose_attempts: int = Field(default=1000, ge=1)
    oracle: str = Field(default="gt", description="gt | identity | external:<dir>")
    oracle_timeout: float = Field(default=300.0, gt=0.0)
    oracle_poll_interval: float = Field(default=0.05, gt=0.0)
    loo_degraded_iterations: int = Field(default=6000, ge=0)
    loo_repaired_iterations: int = Field(default=4000, ge=0)
    loo_snapshot_every: int = Field(default=1000, ge=1)
    lambda_gen: float = Field(default=0.5, ge=0.0)
    lr_scale_factor: float = Field(
        default=0.5, gt=0.0, description="Multiplies coarse learning rates"
    )


class ArticulationConfig(BaseModel):
    """Part segmentation and joint estimation."""

    tau: float = Field(default=0.5, ge=0.0, le=1.0)
    connect_factor: float = Field(default=3.0, gt=0.0)
    attach_unassigned: bool = True
    num_mask_views: int = Field(default=8, ge=1)
    client: Literal["mock", "subprocess", "gemini"] = "mock"
    client_command: list[str] = Field(default_factory=list)
    client_timeout: float = Field(default=60.0, gt=0.0)
    gemini_model: str = "gemini-2.5-flash"


class MeshConfig(BaseModel):
    """TSDF fusion and marching cubes."""

    voxel_size: float = Field(default=0.004, gt=0.0)
    auto_scale: bool = Field(default=False, description="Voxel = extent / auto_divisions")
    auto_divisions: int = Field(default=256, ge=8)
    trunc_voxels: float = Field(default=5.0, gt=0.0)
    orbit_views: int = Field(default=60, ge=1)
    orbit_resolution: int = Field(default=128, ge=8)
    bounds_margin: float = Field(default=0.05, ge=0.0)
    alpha_threshold: float = Field(default=0.5, ge=0.0, le=1.0)
    min_part_primitives: int = Field(default=10, ge=1)


class EvalConfig(BaseModel):
    """Metric settings."""

    chamfer_samples: int = Field(default=10000, ge=1)
    f1_fraction: float = Field(default=0.01, gt=0.0)
    psnr_cap: float = Field(default=99.0, gt=0.0)
    tau_sweep: list[float] = Field(default_factory=lambda: [0.3, 0.5, 0.7])
    heldout_views: int = Field(default=8, ge=1)


class PipelineConfig(BaseModel):
    """End-to-end run configuration; one TOML section per stage."""

    seed: int = 7
    fixture: str = "hinge"
    resolution: int = Field(default=64, ge=8)
    num_candidates: int = Field(default=64, ge=1)
    num_views: int = Field(default=4, ge=1)
    policy: ViewPolicy = ViewPolicy.OPTIMAL
    pseudo_depth_noise: float = Field(default=0.02, ge=0.0)
    output_dir: str = "runs/default"
    use_registration: bool = False
    use_planar: bool = True
    use_refinement: bool = True
    use_view_consistency: bool = True

    raster: RasterConfig = Field(default_factory=RasterConfig)
    planner: PlannerConfig = Field(default_factory=PlannerConfig)
    registration: RegistrationConfig = Field(default_factory=RegistrationConfig)
    coarse: CoarseConfig = Field(default_factory=CoarseConfig)
    refine: RefineConfig = Field(default_factory=RefineConfig)
    articulation: ArticulationConfig = Field(default_factory=ArticulationConfig)
    mesh: MeshConfig = Field(default_factory=MeshConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    def config_hash(self) -> str:
        """sha256 of the canonical JSON dump."""
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def effective_coarse(self) -> CoarseConfig:
        """Coarse config with the planar terms zeroed when the component is switched off."""
        if self.use_planar:
            return self.coarse
        return self.coarse.model_copy(
            update={"lambda_scale": 0.0, "lambda_depth": 0.0, "lambda_smooth": 0.0}
        )

    def effective_refine(self) -> RefineConfig:
        if self.use_view_consistency:
            return self.refine
        return self.refine.model_copy(update={"lambda_vc": 0.0})


def load_config(path: str | Path) -> PipelineConfig:
    """
    Load a pipeline config from TOML.

    Args:
        path: TOML file with optional per-stage sections

    Returns:
        Validated PipelineConfig
    """
    try:
        with open(path, "rb") as handle:
            data = tomllib.load(handle)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)


def config_from_dict(data: dict[str, Any]) -> PipelineConfig:
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(str(exc)) from exc


def apply_overrides(config: PipelineConfig, overrides: dict[str, Any]) -> PipelineConfig:
    """
    Return a copy with dotted-path overrides applied, e.g. ``{"coarse.lambda_scale": 0}``.

    None values are ignored so unset CLI flags fall through.
    """
    data = config.model_dump(mode="json")
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            if key not in node or not isinstance(node[key], dict):
                raise ConfigurationError(f"unknown config section '{key}' in '{dotted}'")
            node = node[key]
        if leaf not in node:
            raise ConfigurationError(f"unknown config key '{dotted}'")
        node[leaf] = value
    return config_from_dict(data)
