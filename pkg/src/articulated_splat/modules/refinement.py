"""
Refinement of a coarse cloud against a repair oracle.

Reliable pose regions are boxes of Euler angles and translations around the
training poses; everything outside them is the noisy region. Noisy poses are
rendered, repaired by an oracle and used as pseudo ground truth together
with a plane-induced multi-view consistency term and the planar losses.
The leave-one-out pair generator produces the degraded/repaired image pairs
an external repair model would be fine-tuned on.
"""

import logging
import time
from collections import deque
from collections.abc import Sequence
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Protocol

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial.transform import Rotation

from ..core.config import CoarseConfig, RasterConfig, RefineConfig
from ..core.errors import (
    ConfigurationError,
    OracleAbortError,
    RepairFailedError,
    UsageError,
    WarningCounter,
)
from ..core.gaussians import GaussianCloud
from ..core.geometry import hemisphere_directions, look_at
from ..core.loss_registry import LossContext, LossRegistry, LossStage, LossTerm
from ..core.models import Camera, PoseRegion
from ..core.views import TrainingView
from ..utils.io import load_png, save_png, write_json
from ..utils.seeding import numpy_rng
from .coarse_trainer import (
    CoarseTrainer,
    DepthCorrection,
    PreparedView,
    TrainingResult,
    build_loss_registry,
    image_psnr,
)
from .planar_losses import ms_ssim
from .rasterizer import Rasterizer, RenderBuffers

if TYPE_CHECKING:
    from .synthetic import SyntheticScene

logger = logging.getLogger(__name__)

REGION_TOLERANCE = 1e-9
GRAZING_THRESHOLD = 1e-3
NOISY_ID_OFFSET = 20000


# =============================================================================
# Pose regions
# =============================================================================


def perturb_pose(
    base: Camera, angles: Sequence[float], offset: Sequence[float], pivot: Sequence[float]
) -> Camera:
    """
    Rotate the camera about ``pivot`` by intrinsic Z-Y-X Euler ``angles`` and
    shift its center by ``offset``; the view direction turns with it.
    """
    delta = Rotation.from_euler("ZYX", np.asarray(angles, dtype=np.float64)).as_matrix()
    pivot_np = np.asarray(pivot, dtype=np.float64)
    center = pivot_np + delta @ (base.center - pivot_np) + np.asarray(offset, dtype=np.float64)
    rotation = base.rotation @ delta.T
    return base.with_pose(rotation, -rotation @ center)


def pose_perturbation(region: PoseRegion, cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`perturb_pose`: Z-Y-X angles and center offset of ``cam`` from the base."""
    base = region.base
    delta = cam.rotation.T @ base.rotation
    angles = Rotation.from_matrix(delta).as_euler("ZYX")
    pivot = np.asarray(region.pivot, dtype=np.float64)
    offset = cam.center - pivot - delta @ (base.center - pivot)
    return angles, offset


def in_region(cam: Camera, region: PoseRegion, tolerance: float = REGION_TOLERANCE) -> bool:
    """Closed-box membership of ``cam`` in ``region``."""
    angles, offset = pose_perturbation(region, cam)
    bounds = np.array([region.d_theta_z, region.d_theta_y, region.d_theta_x])
    return bool((np.abs(angles) <= bounds + tolerance).all()) and bool(
        (np.abs(offset) <= region.d_t + tolerance).all()
    )


def in_noisy_region(cam: Camera, regions: Sequence[PoseRegion]) -> bool:
    """True iff ``cam`` lies outside every reliable region."""
    return not any(in_region(cam, region) for region in regions)


def sample_reliable_pose(region: PoseRegion, seed: int | np.random.Generator = 0) -> Camera:
    """Uniform sample from the region's Euler/translation box, composed onto its base pose."""
    rng = seed if isinstance(seed, np.random.Generator) else numpy_rng(seed, "refine")
    bounds = np.array([region.d_theta_z, region.d_theta_y, region.d_theta_x])
    if not bounds.any() and region.d_t == 0:
        return region.base
    angles = rng.uniform(-bounds, bounds)
    offset = rng.uniform(-region.d_t, region.d_t, size=3)
    return perturb_pose(region.base, angles, offset, region.pivot)


def build_reliable_regions(
    cameras: Sequence[Camera], config: RefineConfig, extent: float, pivot: Sequence[float]
) -> list[PoseRegion]:
    """One region per training camera with the configured angle and translation bounds."""
    angle = float(np.radians(config.d_theta_deg))
    pivot_t = tuple(float(v) for v in pivot)
    return [
        PoseRegion(
            base=cam,
            d_theta_z=angle,
            d_theta_y=angle,
            d_theta_x=angle,
            d_t=config.d_t_fraction * extent,
            pivot=pivot_t,
        )
        for cam in cameras
    ]


def sample_noisy_pose(
    regions: Sequence[PoseRegion],
    center: np.ndarray,
    radius: float,
    template: Camera,
    rng: np.random.Generator,
    attempts: int = 1000,
    camera_id: int = NOISY_ID_OFFSET,
    warnings: WarningCounter | None = None,
) -> Camera:
    """
    Rejection-sample a hemisphere camera looking at ``center`` that falls
    outside every reliable region. Falls back to the last draw, with a
    warning, when every attempt lands inside a region.
    """
    cam = template
    for _ in range(attempts):
        direction = hemisphere_directions(1, rng)[0]
        rotation, translation = look_at(center + radius * direction, center)
        cam = Camera.from_matrices(
            rotation,
            translation,
            template.width,
            template.height,
            template.fx,
            fy=template.fy,
            cx=template.cx,
            cy=template.cy,
            camera_id=camera_id,
            near=template.near,
            far=template.far,
        )
        if in_noisy_region(cam, regions):
            return cam
    if warnings is not None:
        warnings.bump("noisy_pose_fallback")
    logger.warning("no noisy pose found in %d attempts; using a reliable one", attempts)
    return cam


# =============================================================================
# Plane-induced homography and view consistency
# =============================================================================


def homography_matrix(
    cam_src: Camera, cam_dst: Camera, normal: np.ndarray, d: float
) -> np.ndarray:
    """
    H = K_dst (R_rel + t_rel n^T / d) K_src^-1 for the plane n^T X = d in the
    source camera frame. Pixel coordinates are continuous with pixel centers
    at half-integers.
    """
    r_rel = cam_dst.rotation @ cam_src.rotation.T
    t_rel = cam_dst.translation - r_rel @ cam_src.translation
    n = np.asarray(normal, dtype=np.float64)
    return cam_dst.intrinsics @ (r_rel + np.outer(t_rel, n) / d) @ np.linalg.inv(cam_src.intrinsics)


def plane_homography(
    pixels: np.ndarray,
    cam_src: Camera,
    cam_dst: Camera,
    normal: np.ndarray,
    d: float,
    grazing: float = GRAZING_THRESHOLD,
) -> np.ndarray | None:
    """
    Map (M, 2) source pixel coordinates (x, y) through the plane onto the
    destination image.

    Returns:
        (M, 2) destination coordinates, or None when the plane is seen at a
        grazing angle from any of the pixels or passes through the camera
    """
    pts = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n = np.asarray(normal, dtype=np.float64)
    n_norm = np.linalg.norm(n)
    if n_norm < 1e-12 or abs(d) < 1e-12:
        return None
    homog = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
    rays = homog @ np.linalg.inv(cam_src.intrinsics).T
    cosine = np.abs(rays @ n) / (np.linalg.norm(rays, axis=1) * n_norm)
    if (cosine < grazing).any():
        return None
    mapped = homog @ homography_matrix(cam_src, cam_dst, n, d).T
    return mapped[:, :2] / mapped[:, 2:3]


def sample_patch_centers(
    alpha: np.ndarray | torch.Tensor,
    count: int,
    patch_size: int,
    rng: np.random.Generator,
    threshold: float = 0.5,
) -> np.ndarray:
    """(P, 2) integer (y, x) centers of fully in-image patches over covered pixels."""
    a = alpha.detach().cpu().numpy() if isinstance(alpha, torch.Tensor) else np.asarray(alpha)
    half = patch_size // 2
    ok = np.zeros(a.shape, dtype=bool)
    h, w = a.shape
    if h > 2 * half and w > 2 * half:
        ok[half : h - half, half : w - half] = a[half : h - half, half : w - half] >= threshold
    ys, xs = np.nonzero(ok)
    if not len(ys):
        return np.zeros((0, 2), dtype=np.int64)
    pick = rng.choice(len(ys), size=min(count, len(ys)), replace=False)
    return np.stack([ys[pick], xs[pick]], axis=1).astype(np.int64)


def _backproject(
    depth: torch.Tensor, px: torch.Tensor, py: torch.Tensor, cam: Camera
) -> torch.Tensor:
    """World points for continuous pixel coordinates (px, py) at z-depth ``depth``."""
    dtype = depth.dtype
    rays = torch.stack(
        [(px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, torch.ones_like(px)], dim=-1
    )
    points_cam = depth.unsqueeze(-1) * rays
    rotation = torch.as_tensor(cam.rotation, dtype=dtype)
    translation = torch.as_tensor(cam.translation, dtype=dtype)
    return (points_cam - translation) @ rotation


def view_consistency_from_buffers(
    depth_a: torch.Tensor,
    alpha_a: torch.Tensor,
    normal_a: torch.Tensor,
    cam_a: Camera,
    depth_b: torch.Tensor,
    alpha_b: torch.Tensor,
    cam_b: Camera,
    centers: np.ndarray,
    patch_size: int = 7,
    alpha_threshold: float = 0.5,
    warnings: WarningCounter | None = None,
) -> torch.Tensor:
    """
    Mean world distance between points back-projected from patch pixels in
    view a and their plane-homography correspondents in view b.

    Each patch's plane comes from the rendered normal and depth of its center
    pixel in view a; the homography is held fixed and gradients flow through
    both depth maps. Pixels with alpha below the threshold in either view, or
    mapped outside view b, are excluded.
    """
    dtype = depth_a.dtype
    half = patch_size // 2
    dy, dx = np.meshgrid(np.arange(-half, half + 1), np.arange(-half, half + 1), indexing="ij")
    offsets = np.stack([dy.reshape(-1), dx.reshape(-1)], axis=1)

    homographies, pixels = [], []
    normal_np = normal_a.detach().cpu().numpy().astype(np.float64)
    depth_np = depth_a.detach().cpu().numpy().astype(np.float64)
    k_inv = np.linalg.inv(cam_a.intrinsics)
    for cy, cx in np.asarray(centers, dtype=np.int64).reshape(-1, 2):
        patch = offsets + np.array([cy, cx])
        if (patch < 0).any() or (patch >= (cam_a.height, cam_a.width)).any():
            continue
        n = normal_np[cy, cx]
        z = depth_np[cy, cx]
        if z <= 0 or np.linalg.norm(n) < 0.5:
            continue
        ray = k_inv @ np.array([cx + 0.5, cy + 0.5, 1.0])
        d = float(n @ (z * ray))
        xy = np.stack([patch[:, 1] + 0.5, patch[:, 0] + 0.5], axis=1)
        if plane_homography(xy, cam_a, cam_b, n, d) is None:
            if warnings is not None:
                warnings.bump("vc_grazing_patch")
            continue
        homographies.append(homography_matrix(cam_a, cam_b, n, d))
        pixels.append(patch)

    zero = depth_a.sum() * 0.0 + depth_b.sum() * 0.0
    if not pixels:
        if warnings is not None:
            warnings.bump("vc_no_valid_patches")
        logger.warning("view consistency: no valid patches")
        return zero

    patches = torch.as_tensor(np.stack(pixels))  # (P, S, 2) as (y, x)
    h_mats = torch.as_tensor(np.stack(homographies), dtype=torch.float64)
    py = patches[..., 0].to(torch.float64) + 0.5
    px = patches[..., 1].to(torch.float64) + 0.5
    homog = torch.stack([px, py, torch.ones_like(px)], dim=-1)
    mapped = homog @ h_mats.transpose(1, 2)
    w = mapped[..., 2]
    in_front = w > 1e-12
    safe_w = torch.where(in_front, w, torch.ones_like(w))
    qx, qy = mapped[..., 0] / safe_w, mapped[..., 1] / safe_w
    inside = in_front & (qx >= 0) & (qx <= cam_b.width) & (qy >= 0) & (qy <= cam_b.height)

    grid = torch.stack([2.0 * qx / cam_b.width - 1.0, 2.0 * qy / cam_b.height - 1.0], dim=-1)
    grid = torch.where(inside.unsqueeze(-1), grid, torch.zeros_like(grid)).to(dtype).unsqueeze(0)
    sampled = F.grid_sample(
        torch.stack([depth_b, alpha_b]).unsqueeze(0).to(dtype),
        grid,
        mode="bilinear",
        padding_mode="border",
        align_corners=False,
    )[0]
    z_b, a_b = sampled[0], sampled[1]

    iy, ix = patches[..., 0], patches[..., 1]
    z_a = depth_a[iy, ix]
    valid = (
        inside
        & (alpha_a[iy, ix].detach() >= alpha_threshold)
        & (a_b.detach() >= alpha_threshold)
        & (z_a.detach() > 0)
        & (z_b.detach() > 0)
    )
    if not bool(valid.any()):
        if warnings is not None:
            warnings.bump("vc_no_valid_patches")
        logger.warning("view consistency: no pixel maps into the other view")
        return zero

    world_a = _backproject(z_a, px.to(dtype), py.to(dtype), cam_a)
    world_b = _backproject(z_b, qx.to(dtype), qy.to(dtype), cam_b)
    distance = torch.sqrt(((world_a - world_b) ** 2).sum(-1) + 1e-18)
    return distance[valid].mean()


def loss_view_consistency(
    cloud: GaussianCloud,
    cam_a: Camera,
    cam_b: Camera,
    rasterizer: Rasterizer | None = None,
    patch_size: int = 7,
    num_patches: int = 64,
    seed: int | np.random.Generator = 0,
    buffers_a: RenderBuffers | None = None,
    buffers_b: RenderBuffers | None = None,
    warnings: WarningCounter | None = None,
) -> torch.Tensor:
    """
    Plane-homography consistency between two renders of ``cloud``.

    Args:
        cloud: Gaussian cloud
        cam_a: reference pose; patches and planes are taken from its render
        cam_b: second pose
        rasterizer: renderer (a default one is created when omitted)
        patch_size: odd patch side in pixels
        num_patches: patches sampled over covered pixels of view a
        seed: patch sampling seed or generator
        buffers_a: precomputed render of ``cam_a``
        buffers_b: precomputed render of ``cam_b``
        warnings: counter for skipped patches

    Returns:
        differentiable scalar, 0 when no patch is valid
    """
    rasterizer = rasterizer or Rasterizer()
    rng = seed if isinstance(seed, np.random.Generator) else numpy_rng(seed, "view-consistency")
    buffers_a = buffers_a or rasterizer.render(cloud, cam_a)
    buffers_b = buffers_b or rasterizer.render(cloud, cam_b)
    centers = sample_patch_centers(buffers_a.alpha, num_patches, patch_size, rng)
    return view_consistency_from_buffers(
        buffers_a.depth,
        buffers_a.alpha,
        buffers_a.normal,
        cam_a,
        buffers_b.depth,
        buffers_b.alpha,
        cam_b,
        centers,
        patch_size=patch_size,
        warnings=warnings,
    )


# =============================================================================
# Repair oracles
# =============================================================================


@dataclass(frozen=True)
class RepairRequest:
    """A render at a noisy pose awaiting repair; ``render`` is (H, W, 3) in [0, 1]."""

    request_id: int
    camera: Camera
    render: np.ndarray


class RepairOracle(Protocol):
    """Turns a degraded render into a plausible clean image of the same size."""

    name: str

    def repair(self, request: RepairRequest) -> np.ndarray: ...


class IdentityOracle:
    """Returns the render unchanged."""

    name = "identity"

    def repair(self, request: RepairRequest) -> np.ndarray:
        return request.render.copy()


class GroundTruthOracle:
    """Analytic render of a synthetic scene at the requested pose."""

    name = "gt"

    def __init__(self, scene: "SyntheticScene") -> None:
        self.scene = scene

    def repair(self, request: RepairRequest) -> np.ndarray:
        return self.scene.render(request.camera).rgb.astype(np.float32)


class ExternalDirectoryOracle:
    """
    File handshake with an external repair process: writes ``req_<id>.png``
    and ``req_<id>.json`` (the pose) and polls for ``rep_<id>.png``.
    """

    name = "external"

    def __init__(
        self, directory: str | Path, timeout: float = 300.0, poll_interval: float = 0.05
    ) -> None:
        self.directory = Path(directory)
        self.timeout = timeout
        self.poll_interval = poll_interval

    def repair(self, request: RepairRequest) -> np.ndarray:
        stem = f"{request.request_id:06d}"
        save_png(self.directory / f"req_{stem}.png", request.render)
        write_json(
            self.directory / f"req_{stem}.json",
            {"id": request.request_id, "camera": request.camera.to_json_dict()},
        )
        reply = self.directory / f"rep_{stem}.png"
        deadline = time.monotonic() + self.timeout
        while not reply.exists():
            if time.monotonic() > deadline:
                raise RepairFailedError(f"no reply for request {stem} within {self.timeout:.1f}s")
            time.sleep(self.poll_interval)
        image = load_png(reply)
        if image.shape != request.render.shape:
            raise RepairFailedError(
                f"reply {stem} has shape {image.shape}, expected {request.render.shape}"
            )
        return image


def make_oracle(
    spec: str, scene: "SyntheticScene | None" = None, config: RefineConfig | None = None
) -> RepairOracle:
    """
    Build an oracle from ``gt``, ``identity`` or ``external:<dir>``.

    Raises:
        ConfigurationError: unknown spec, or ``gt`` without a synthetic scene
    """
    config = config or RefineConfig()
    if spec == "identity":
        return IdentityOracle()
    if spec == "gt":
        if scene is None:
            raise ConfigurationError("the gt oracle needs a synthetic scene")
        return GroundTruthOracle(scene)
    if spec.startswith("external:"):
        directory = spec.split(":", 1)[1]
        if not directory:
            raise ConfigurationError("external oracle needs a directory: external:<dir>")
        return ExternalDirectoryOracle(
            directory, config.oracle_timeout, config.oracle_poll_interval
        )
    raise ConfigurationError(f"unknown oracle '{spec}'")


class RepairPipeline:
    """
    Order-preserving queue of in-flight repair requests.

    Results are consumed in submission order; an oracle exception is
    returned alongside its request instead of being raised.
    """

    def __init__(self, oracle: RepairOracle, max_in_flight: int = 4) -> None:
        self.oracle = oracle
        self.max_in_flight = max_in_flight
        self._pool = ThreadPoolExecutor(max_workers=max_in_flight, thread_name_prefix="repair")
        self._pending: deque[tuple[RepairRequest, Future[np.ndarray]]] = deque()

    @property
    def in_flight(self) -> int:
        return len(self._pending)

    def submit(self, request: RepairRequest) -> None:
        if self.in_flight >= self.max_in_flight:
            raise UsageError("repair pipeline is full")
        self._pending.append((request, self._pool.submit(self.oracle.repair, request)))

    def next_result(self) -> tuple[RepairRequest, np.ndarray | None, BaseException | None]:
        if not self._pending:
            raise UsageError("no repair request in flight")
        request, future = self._pending.popleft()
        try:
            return request, future.result(), None
        except Exception as exc:  # oracle failures are counted, not raised
            return request, None, exc

    def close(self) -> None:
        self._pool.shutdown(wait=False, cancel_futures=True)
        self._pending.clear()

    def __enter__(self) -> "RepairPipeline":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


# =============================================================================
# Refinement losses
# =============================================================================


def loss_repair(
    render: torch.Tensor, target: torch.Tensor, perceptual_weight: float = 1.0, scales: int = 3
) -> torch.Tensor:
    """Mean squared error plus ``perceptual_weight`` * (1 - MS-SSIM)."""
    if render.shape != target.shape:
        raise UsageError(f"image shapes differ: {tuple(render.shape)} vs {tuple(target.shape)}")
    target = target.to(render.dtype)
    mse = ((render - target) ** 2).mean()
    if perceptual_weight == 0:
        return mse
    return mse + perceptual_weight * (1.0 - ms_ssim(render, target, scales=scales))


def _term_repair_l2(context: LossContext) -> torch.Tensor:
    render = context["buffers"].color
    return ((render - context["target"].to(render.dtype)) ** 2).mean()


def _term_repair_perceptual(context: LossContext) -> torch.Tensor:
    config: RefineConfig = context["refine_config"]
    render = context["buffers"].color
    return 1.0 - ms_ssim(render, context["target"].to(render.dtype), scales=config.ms_ssim_scales)


def _term_view_consistency(context: LossContext) -> torch.Tensor:
    partner: Camera | None = context.get("vc_partner")
    buffers: RenderBuffers = context["buffers"]
    if partner is None:
        return buffers.depth.sum() * 0.0
    config: RefineConfig = context["refine_config"]
    rasterizer: Rasterizer = context["rasterizer"]
    return loss_view_consistency(
        context["cloud"],
        partner,
        buffers.camera,
        rasterizer,
        patch_size=config.patch_size,
        num_patches=config.num_patches,
        seed=context["vc_rng"],
        buffers_a=context.get("planar_buffers"),
        buffers_b=buffers,
        warnings=context.get("warnings"),
    )


def build_refine_registry(coarse_config: CoarseConfig, config: RefineConfig) -> LossRegistry:
    """Planar terms from the coarse registry plus the repair and view-consistency terms."""
    registry = build_loss_registry(coarse_config)
    registry.add_term(
        LossTerm(
            term_id="LR-001",
            name="repair_l2",
            description="Mean squared error to the repaired image",
            stages=(LossStage.REFINE,),
            fn=_term_repair_l2,
        )
    )
    registry.add_term(
        LossTerm(
            term_id="LR-002",
            name="repair_perceptual",
            description="1 - MS-SSIM to the repaired image",
            stages=(LossStage.REFINE,),
            weight=config.perceptual_weight,
            fn=_term_repair_perceptual,
        )
    )
    registry.add_term(
        LossTerm(
            term_id="LV-001",
            name="view_consistency",
            description="Back-projection disagreement with the nearest training view",
            stages=(LossStage.REFINE,),
            weight=config.lambda_vc,
            fn=_term_view_consistency,
        )
    )
    return registry


# =============================================================================
# Refinement loop
# =============================================================================


class RefineTrainer(CoarseTrainer):
    """
    Trainer whose per-iteration target is an oracle-repaired render at a
    freshly sampled noisy pose.

    Example:
        trainer = RefineTrainer(IdentityOracle(), regions, center, radius)
        result = trainer.train(coarse.cloud, views, iterations=100)
    """

    def __init__(
        self,
        oracle: RepairOracle,
        regions: Sequence[PoseRegion],
        center: np.ndarray,
        radius: float,
        config: RefineConfig | None = None,
        coarse_config: CoarseConfig | None = None,
        raster_config: RasterConfig | None = None,
        seed: int = 0,
    ) -> None:
        self.refine_config = config or RefineConfig()
        coarse = coarse_config or CoarseConfig()
        super().__init__(
            coarse,
            raster_config,
            seed=seed,
            stage=LossStage.REFINE,
            registry=build_refine_registry(coarse, self.refine_config),
            densify=False,
        )
        self.lr_factor = self.refine_config.lr_scale_factor
        self.oracle = oracle
        self.regions = list(regions)
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.rng = numpy_rng(seed, "refine")
        self.vc_rng = numpy_rng(seed, "view-consistency")
        self.pipeline: RepairPipeline | None = None
        self.requests = 0
        self.failures = 0
        self.consecutive_failures = 0
        self._training_cams: list[Camera] = []
        self._prepared: list[PreparedView] = []

    def _submit(self, live: GaussianCloud) -> None:
        assert self.pipeline is not None
        template = self.regions[0].base if self.regions else self._training_cams[0]
        cam = sample_noisy_pose(
            self.regions,
            self.center,
            self.radius,
            template,
            self.rng,
            attempts=self.refine_config.noisy_pose_attempts,
            camera_id=NOISY_ID_OFFSET + self.requests,
            warnings=self.warnings,
        )
        with torch.no_grad():
            render = self.rasterizer.render(live, cam).color.detach().cpu().numpy()
        self.pipeline.submit(RepairRequest(self.requests, cam, render))
        self.requests += 1

    def _next_item(
        self,
        iteration: int,
        prepared: list[PreparedView],
        generator: torch.Generator,
        live: GaussianCloud,
    ) -> PreparedView:
        if self.pipeline is None:
            self.pipeline = RepairPipeline(self.oracle, self.refine_config.max_in_flight)
            self._prepared = list(prepared)
            self._training_cams = [p.view.camera for p in prepared]
        while True:
            while self.pipeline.in_flight < self.pipeline.max_in_flight:
                self._submit(live)
            request, image, error = self.pipeline.next_result()
            if error is None and image is not None and image.shape == request.render.shape:
                self.consecutive_failures = 0
                image_t = torch.as_tensor(image, dtype=torch.float32)
                view = TrainingView(camera=request.camera, image=image_t)
                return PreparedView(view=view)
            self.failures += 1
            self.consecutive_failures += 1
            self.warnings.bump("oracle_failure")
            logger.warning(
                "repair request %d failed: %s", request.request_id, error or "shape mismatch"
            )
            if self.consecutive_failures >= self.refine_config.max_consecutive_failures:
                raise OracleAbortError(
                    f"{self.consecutive_failures} consecutive oracle failures (last: {error})"
                )

    def attach_partner(self, iteration: int, context: LossContext) -> None:
        """
        Loss-context hook: the nearest training view becomes the view-consistency
        partner and the target of the depth and smoothness terms, which need its
        pseudo-depth, regions and edge mask.
        """
        cam: Camera = context["buffers"].camera
        if self._prepared:
            centers = [p.view.camera.center for p in self._prepared]
            distances = [np.linalg.norm(c - cam.center) for c in centers]
            partner = self._prepared[int(np.argmin(distances))]
            partner_cam = partner.view.camera
            context["vc_partner"] = partner_cam
            context["planar_prepared"] = partner
            context["planar_buffers"] = self.rasterizer.render(context["cloud"], partner_cam)
        context["vc_rng"] = self.vc_rng
        context["refine_config"] = self.refine_config

    def close(self) -> None:
        if self.pipeline is not None:
            self.pipeline.close()
            self.pipeline = None


def refine(
    cloud: GaussianCloud,
    views: list[TrainingView],
    oracle: RepairOracle,
    config: RefineConfig | None = None,
    coarse_config: CoarseConfig | None = None,
    raster_config: RasterConfig | None = None,
    regions: Sequence[PoseRegion] | None = None,
    seed: int = 0,
    correction: DepthCorrection | None = None,
) -> TrainingResult:
    """
    Refine a coarse cloud on repaired renders from noisy poses.

    Args:
        cloud: coarse cloud
        views: training views (define the reliable regions and the
            view-consistency partners)
        oracle: repair oracle
        config: refinement settings
        coarse_config: planar-loss weights and base learning rates
        raster_config: renderer settings
        regions: reliable regions; built from the training cameras when omitted
        seed: manifest seed
        correction: depth-correction state from coarse training

    Returns:
        TrainingResult with the refined cloud

    Raises:
        OracleAbortError: too many consecutive oracle failures
    """
    config = config or RefineConfig()
    if not views:
        raise UsageError("refinement needs at least one training view")
    lower, upper = cloud.bounds()
    center = 0.5 * (np.asarray(lower) + np.asarray(upper))
    extent = max(cloud.extent(), 1e-3)
    cams = [v.camera for v in views]
    if regions is None:
        regions = build_reliable_regions(cams, config, extent, center)
    radius = float(np.mean([np.linalg.norm(c.center - center) for c in cams]))
    trainer = RefineTrainer(
        oracle, regions, center, radius, config, coarse_config, raster_config, seed
    )
    try:
        result = trainer.train(
            cloud,
            views,
            iterations=config.iterations,
            correction=correction,
            context_hook=trainer.attach_partner,
        )
    finally:
        trainer.close()
    logger.info(
        "refined %d iterations: %d repair requests, %d failures",
        result.iterations,
        trainer.requests,
        trainer.failures,
    )
    return result


# =============================================================================
# Leave-one-out training pairs
# =============================================================================


@dataclass
class LooPair:
    """Degraded render and its target for one left-out view."""

    view_id: int
    kind: str
    iteration: int
    degraded: np.ndarray
    target: np.ndarray
    camera: Camera


@dataclass
class LooPairSet:
    pairs: list[LooPair] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)

    def save(self, out_dir: str | Path) -> Path:
        """PNG pairs plus ``pairs.json`` describing them."""
        root = Path(out_dir)
        entries = []
        for index, pair in enumerate(self.pairs):
            stem = f"view{pair.view_id:03d}_{pair.kind}_{index:04d}"
            save_png(root / f"{stem}_input.png", pair.degraded)
            save_png(root / f"{stem}_target.png", pair.target)
            entries.append(
                {
                    "view": pair.view_id,
                    "kind": pair.kind,
                    "iteration": pair.iteration,
                    "input": f"{stem}_input.png",
                    "target": f"{stem}_target.png",
                    "camera": pair.camera.to_json_dict(),
                }
            )
        manifest = root / "pairs.json"
        write_json(manifest, {**self.metadata, "pairs": entries})
        logger.info("wrote %d leave-one-out pairs to %s", len(entries), root)
        return manifest


def _render_rgb(rasterizer: Rasterizer, cloud: GaussianCloud, cam: Camera) -> np.ndarray:
    with torch.no_grad():
        return rasterizer.render(cloud, cam).color.detach().cpu().numpy()


def generate_loo_pairs(
    cloud: GaussianCloud,
    views: list[TrainingView],
    config: RefineConfig | None = None,
    coarse_config: CoarseConfig | None = None,
    raster_config: RasterConfig | None = None,
    out_dir: str | Path | None = None,
    seed: int = 0,
) -> LooPairSet:
    """
    Leave-one-out degraded/repaired pairs.

    For every view: train ``cloud`` without it, render it and a nearby
    reliable pose (degraded); continue training with every view and render
    the nearby pose again (repaired). Renders of the left-out view taken
    every ``loo_snapshot_every`` degraded iterations are emitted as extra
    pairs against the real image.

    Raises:
        ConfigurationError: fewer than two views
    """
    config = config or RefineConfig()
    coarse_config = coarse_config or CoarseConfig()
    if len(views) < 2:
        raise ConfigurationError("leave-one-out needs at least two views")
    rasterizer = Rasterizer(raster_config)
    lower, upper = cloud.bounds()
    center = 0.5 * (np.asarray(lower) + np.asarray(upper))
    extent = max(cloud.extent(), 1e-3)
    rng = numpy_rng(seed, "leave-one-out")

    result = LooPairSet(
        metadata={
            "degraded_iterations": config.loo_degraded_iterations,
            "repaired_iterations": config.loo_repaired_iterations,
            "lambda_gen": config.lambda_gen,
            "views": [],
        }
    )
    for index, left in enumerate(views):
        others = [v for v in views if v.view_id != left.view_id]
        target = left.image.detach().cpu().numpy()
        snapshots: list[tuple[int, np.ndarray]] = []

        def capture(
            iteration: int,
            context: LossContext,
            cam: Camera = left.camera,
            store: list[tuple[int, np.ndarray]] = snapshots,
        ) -> None:
            if iteration % config.loo_snapshot_every == 0:
                store.append((iteration, _render_rgb(rasterizer, context["cloud"], cam)))

        trainer = CoarseTrainer(coarse_config, raster_config, seed=seed + index)
        degraded = trainer.train(
            cloud, others, iterations=config.loo_degraded_iterations, context_hook=capture
        )
        region = build_reliable_regions([left.camera], config, extent, center)[0]
        nearby = sample_reliable_pose(region, rng)
        x_deg = _render_rgb(rasterizer, degraded.cloud, left.camera)
        x_bar_deg = _render_rgb(rasterizer, degraded.cloud, nearby)

        repaired = CoarseTrainer(coarse_config, raster_config, seed=seed + index).train(
            degraded.cloud, views, iterations=config.loo_repaired_iterations
        )
        x_rep = _render_rgb(rasterizer, repaired.cloud, left.camera)
        x_bar_rep = _render_rgb(rasterizer, repaired.cloud, nearby)

        final = config.loo_degraded_iterations
        result.pairs.append(LooPair(left.view_id, "left", final, x_deg, target, left.camera))
        result.pairs.append(LooPair(left.view_id, "perturbed", final, x_bar_deg, x_bar_rep, nearby))
        for iteration, image in snapshots:
            if iteration != final:
                result.pairs.append(
                    LooPair(left.view_id, "intermediate", iteration, image, target, left.camera)
                )
        target_t = torch.as_tensor(target)
        psnr_deg = image_psnr(torch.as_tensor(x_deg), target_t)
        psnr_rep = image_psnr(torch.as_tensor(x_rep), target_t)
        result.metadata["views"].append(
            {"view": left.view_id, "psnr_degraded": psnr_deg, "psnr_repaired": psnr_rep}
        )
        logger.info(
            "leave-one-out view %d: degraded %.2f dB, repaired %.2f dB",
            left.view_id,
            psnr_deg,
            psnr_rep,
        )

    if out_dir is not None:
        result.save(out_dir)
    return result
