"""
Tiled Gaussian splatting in torch.

Forward pass per 16x16 tile: primitives overlapping the tile (3-sigma box)
are taken in stable view-depth order, alpha values are evaluated densely and
composited front to back with the usual 1/255 skip, 0.99 clamp and 1e-4
transmittance exit. Depth is the ray intersection with the weight-blended
local plane of each primitive. The backward pass is autograd over the same
graph.
"""

import logging
import weakref
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
import torch

from ..core.config import RasterConfig
from ..core.errors import UsageError
from ..core.gaussians import TRAINABLE_FIELDS, GaussianCloud
from ..core.geometry import (
    CameraTensors,
    camera_rays,
    camera_tensors,
    covariance_from_params,
    orient_normals,
    project_covariances,
    project_means,
    shortest_axis_normals,
)
from ..core.models import Camera
from ..utils.io import save_pfm, save_png

logger = logging.getLogger(__name__)


@dataclass
class RenderBuffers:
    """Per-pixel outputs of one render."""

    color: torch.Tensor
    alpha: torch.Tensor
    depth: torch.Tensor
    normal: torch.Tensor
    contributor_ids: torch.Tensor
    contributor_weights: torch.Tensor
    means2d: torch.Tensor
    visible: torch.Tensor
    camera: Camera

    @property
    def height(self) -> int:
        return int(self.alpha.shape[0])

    @property
    def width(self) -> int:
        return int(self.alpha.shape[1])

    def contributors(self, y: int, x: int) -> list[tuple[int, float]]:
        """(primitive index, blend weight) at one pixel, front to back."""
        ids = self.contributor_ids[y, x]
        weights = self.contributor_weights[y, x]
        return [(int(i), float(w)) for i, w in zip(ids, weights, strict=True) if i >= 0]


@dataclass
class GradientSet:
    """Per-primitive partials of a scalar pixel functional (raw parameterization)."""

    means: torch.Tensor
    quats: torch.Tensor
    log_scales: torch.Tensor
    opacity_logits: torch.Tensor
    colors: torch.Tensor

    def as_dict(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in TRAINABLE_FIELDS}

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(g).all()) for g in self.as_dict().values())


@dataclass
class GradcheckReport:
    """Worst relative error per parameter class against central differences."""

    functional: str
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-3

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


@dataclass
class _ForwardCache:
    cloud: weakref.ref[GaussianCloud]
    leaves: dict[str, torch.Tensor]
    buffers: RenderBuffers


@dataclass
class _Tile:
    pixel_index: torch.Tensor
    xs: torch.Tensor
    ys: torch.Tensor
    tx: int
    ty: int


class Rasterizer:
    """
    Differentiable tile rasterizer.

    Renders keep the autograd graph of whatever tensors the cloud holds; use
    ``render(..., retain_for_backward=True)`` followed by ``render_backward``
    for explicit adjoint queries. Each cached forward pass answers one
    ``render_backward`` call and is then released.
    """

    def __init__(self, config: RasterConfig | None = None) -> None:
        self.config = config or RasterConfig()
        self._cache: dict[tuple[int, Camera], _ForwardCache] = {}
        self._tiles: dict[tuple[int, int], list[_Tile]] = {}

    # -------------------------------------------------------------------------
    # Public API
    # -------------------------------------------------------------------------

    def render(
        self, cloud: GaussianCloud, cam: Camera, retain_for_backward: bool = False
    ) -> RenderBuffers:
        """
        Render color, alpha, depth, normal and contributor buffers.

        Args:
            cloud: non-empty Gaussian cloud
            cam: camera to render from
            retain_for_backward: cache the graph for ``render_backward``

        Returns:
            RenderBuffers for the camera's resolution
        """
        if cloud.num == 0:
            raise UsageError("cannot render an empty cloud")
        if retain_for_backward:
            leaves = {
                name: getattr(cloud, name).detach().clone().requires_grad_(True)
                for name in TRAINABLE_FIELDS
            }
            buffers = self._rasterize(
                leaves["means"],
                leaves["quats"],
                leaves["log_scales"],
                leaves["opacity_logits"],
                leaves["colors"],
                cam,
            )
            self._drop_dead_entries()
            self._cache[(id(cloud), cam)] = _ForwardCache(
                cloud=weakref.ref(cloud), leaves=leaves, buffers=buffers
            )
            return buffers
        return self._rasterize(
            cloud.means, cloud.quats, cloud.log_scales, cloud.opacity_logits, cloud.colors, cam
        )

    def render_backward(
        self, cloud: GaussianCloud, cam: Camera, upstream: dict[str, torch.Tensor]
    ) -> GradientSet:
        """
        Pull per-pixel gradients back to per-primitive parameters.

        Args:
            cloud: the cloud passed to the cached forward render
            cam: the camera passed to the cached forward render
            upstream: dL/d(buffer) for any of "color", "alpha", "depth", "normal"

        Returns:
            GradientSet with zeros for parameters that do not influence the buffers

        Raises:
            UsageError: no forward pass was cached for this cloud and camera
        """
        key = (id(cloud), cam)
        cache = self._cache.get(key)
        if cache is not None and cache.cloud() is not cloud:
            # id reused by a new cloud after the cached one was freed
            del self._cache[key]
            cache = None
        if cache is None:
            raise UsageError("render_backward needs a forward render with retain_for_backward=True")
        outputs, grads = [], []
        for name, grad in upstream.items():
            if name not in ("color", "alpha", "depth", "normal"):
                raise UsageError(f"unknown render buffer '{name}'")
            buffer = getattr(cache.buffers, name)
            if grad.shape != buffer.shape:
                raise UsageError(
                    f"upstream '{name}' has shape {tuple(grad.shape)}, "
                    f"expected {tuple(buffer.shape)}"
                )
            if buffer.requires_grad:
                outputs.append(buffer)
                grads.append(grad.to(buffer.dtype))
        leaves = [cache.leaves[name] for name in TRAINABLE_FIELDS]
        if outputs:
            partials = torch.autograd.grad(outputs, leaves, grad_outputs=grads, allow_unused=True)
        else:
            partials = tuple(None for _ in leaves)
        gradients = GradientSet(
            **{
                name: torch.zeros_like(leaf) if partial is None else partial
                for name, leaf, partial in zip(TRAINABLE_FIELDS, leaves, partials, strict=True)
            }
        )
        del self._cache[key]
        return gradients

    def clear_cache(self) -> None:
        self._cache.clear()

    @property
    def cached_renders(self) -> int:
        """Forward passes still waiting for ``render_backward``."""
        return len(self._cache)

    def _drop_dead_entries(self) -> None:
        for key in [k for k, entry in self._cache.items() if entry.cloud() is None]:
            del self._cache[key]

    # -------------------------------------------------------------------------
    # Forward pass
    # -------------------------------------------------------------------------

    def _tiles_for(self, width: int, height: int) -> list[_Tile]:
        key = (width, height)
        if key not in self._tiles:
            size = self.config.tile_size
            tiles = []
            for ty in range((height + size - 1) // size):
                for tx in range((width + size - 1) // size):
                    ys, xs = torch.meshgrid(
                        torch.arange(ty * size, min((ty + 1) * size, height)),
                        torch.arange(tx * size, min((tx + 1) * size, width)),
                        indexing="ij",
                    )
                    ys, xs = ys.reshape(-1), xs.reshape(-1)
                    tiles.append(_Tile(pixel_index=ys * width + xs, xs=xs, ys=ys, tx=tx, ty=ty))
            self._tiles[key] = tiles
        return self._tiles[key]

    def _rasterize(
        self,
        means: torch.Tensor,
        quats: torch.Tensor,
        log_scales: torch.Tensor,
        opacity_logits: torch.Tensor,
        colors: torch.Tensor,
        cam: Camera,
    ) -> RenderBuffers:
        cfg = self.config
        dtype = means.dtype
        cam_t = camera_tensors(cam, dtype=dtype)
        width, height = cam.width, cam.height

        p_cam_all, means2d, z_all = project_means(means, cam_t)
        if means2d.requires_grad:
            means2d.retain_grad()

        in_front = (z_all.detach() > cam.near) & (z_all.detach() < cam.far)
        front_idx = torch.nonzero(in_front).squeeze(-1)
        proj = self._project_visible(
            front_idx, p_cam_all, means2d, quats, log_scales, opacity_logits, colors, cam_t
        )
        visible = torch.zeros(means.shape[0], dtype=torch.bool)
        if proj is not None:
            visible[proj["ids"]] = True

        rays = camera_rays(cam, dtype=dtype).reshape(-1, 3)
        background = torch.tensor(cfg.background, dtype=dtype)
        k_max = cfg.max_contributors

        tile_color, tile_alpha, tile_depth, tile_normal = [], [], [], []
        tile_ids, tile_weights, order = [], [], []
        for tile in self._tiles_for(width, height):
            n_pix = tile.pixel_index.shape[0]
            order.append(tile.pixel_index)
            members = None
            if proj is not None:
                hit = (
                    (proj["tx0"] <= tile.tx)
                    & (proj["tx1"] >= tile.tx)
                    & (proj["ty0"] <= tile.ty)
                    & (proj["ty1"] >= tile.ty)
                )
                members = torch.nonzero(hit).squeeze(-1)
            if members is None or members.numel() == 0:
                tile_color.append(background.expand(n_pix, 3))
                tile_alpha.append(torch.zeros(n_pix, dtype=dtype))
                tile_depth.append(torch.zeros(n_pix, dtype=dtype))
                tile_normal.append(torch.zeros(n_pix, 3, dtype=dtype))
                tile_ids.append(torch.full((n_pix, k_max), -1, dtype=torch.long))
                tile_weights.append(torch.zeros(n_pix, k_max, dtype=dtype))
                continue
            out = self._blend_tile(tile, members, proj, rays, background, dtype)
            tile_color.append(out[0])
            tile_alpha.append(out[1])
            tile_depth.append(out[2])
            tile_normal.append(out[3])
            tile_ids.append(out[4])
            tile_weights.append(out[5])

        inverse = torch.argsort(torch.cat(order))
        color = torch.cat(tile_color)[inverse].reshape(height, width, 3)
        alpha = torch.cat(tile_alpha)[inverse].reshape(height, width)
        depth = torch.cat(tile_depth)[inverse].reshape(height, width)
        normal = torch.cat(tile_normal)[inverse].reshape(height, width, 3)
        ids = torch.cat(tile_ids)[inverse].reshape(height, width, k_max)
        weights = torch.cat(tile_weights)[inverse].reshape(height, width, k_max)
        return RenderBuffers(
            color=color,
            alpha=alpha,
            depth=depth,
            normal=normal,
            contributor_ids=ids,
            contributor_weights=weights,
            means2d=means2d,
            visible=visible,
            camera=cam,
        )

    def _project_visible(
        self,
        front_idx: torch.Tensor,
        p_cam_all: torch.Tensor,
        means2d: torch.Tensor,
        quats: torch.Tensor,
        log_scales: torch.Tensor,
        opacity_logits: torch.Tensor,
        colors: torch.Tensor,
        cam_t: CameraTensors,
    ) -> dict[str, torch.Tensor] | None:
        """Screen-space data for in-front primitives overlapping the image, in depth order."""
        if front_idx.numel() == 0:
            return None
        cfg = self.config
        p_cam = p_cam_all[front_idx]
        scales = torch.exp(log_scales[front_idx])
        cov3d = covariance_from_params(quats[front_idx], scales)
        cov2d = project_covariances(p_cam, cov3d, cam_t, cfg.cov2d_floor)
        a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
        det = a * c - b * b
        conic = torch.stack([c / det, -b / det, a / det], dim=-1)

        mean = means2d[front_idx]
        rx = cfg.sigma_extent * torch.sqrt(a.detach())
        ry = cfg.sigma_extent * torch.sqrt(c.detach())
        u, v = mean[:, 0].detach(), mean[:, 1].detach()
        size = cfg.tile_size
        n_tx = (cam_t.width + size - 1) // size
        n_ty = (cam_t.height + size - 1) // size
        tx0 = torch.floor((u - rx) / size).long()
        tx1 = torch.floor((u + rx) / size).long()
        ty0 = torch.floor((v - ry) / size).long()
        ty1 = torch.floor((v + ry) / size).long()
        on_screen = (tx1 >= 0) & (tx0 < n_tx) & (ty1 >= 0) & (ty0 < n_ty)
        if not bool(on_screen.any()):
            return None

        keep = torch.nonzero(on_screen).squeeze(-1)
        z = p_cam[keep, 2]
        # Stable sort on depth; ties keep ascending primitive index.
        _, sort_idx = torch.sort(z.detach(), stable=True)
        sel = keep[sort_idx]

        ids = front_idx[sel]
        normals_world = shortest_axis_normals(quats[ids], scales[sel])
        normals_cam = normals_world @ cam_t.rotation.T
        view_dirs = p_cam[sel] / p_cam[sel].norm(dim=-1, keepdim=True)
        normals_cam = orient_normals(normals_cam, view_dirs)
        plane_d = (normals_cam * p_cam[sel]).sum(-1)
        return {
            "ids": ids,
            "mean": mean[sel],
            "conic": conic[sel],
            "opacity": torch.sigmoid(opacity_logits[ids]),
            "color": colors[ids],
            "normal": normals_cam,
            "plane_d": plane_d,
            "tx0": tx0[sel].clamp(0, n_tx - 1),
            "tx1": tx1[sel].clamp(0, n_tx - 1),
            "ty0": ty0[sel].clamp(0, n_ty - 1),
            "ty1": ty1[sel].clamp(0, n_ty - 1),
        }

    def _blend_tile(
        self,
        tile: _Tile,
        members: torch.Tensor,
        proj: dict[str, torch.Tensor],
        rays: torch.Tensor,
        background: torch.Tensor,
        dtype: torch.dtype,
    ) -> tuple[torch.Tensor, ...]:
        cfg = self.config
        px = tile.xs.to(dtype) + 0.5
        py = tile.ys.to(dtype) + 0.5
        mean = proj["mean"][members]
        conic = proj["conic"][members]
        dx = px[:, None] - mean[None, :, 0]
        dy = py[:, None] - mean[None, :, 1]
        power = (
            -0.5 * (conic[None, :, 0] * dx * dx + conic[None, :, 2] * dy * dy)
            - conic[None, :, 1] * dx * dy
        )
        alpha = torch.clamp(proj["opacity"][members][None, :] * torch.exp(power), max=cfg.max_alpha)
        alpha = torch.where(
            (alpha < cfg.min_alpha) | (power > 0), torch.zeros_like(alpha), alpha
        )

        one_minus = 1.0 - alpha
        t_after = torch.cumprod(one_minus, dim=1)
        t_before = torch.cat([torch.ones_like(t_after[:, :1]), t_after[:, :-1]], dim=1)
        keep = t_after.detach() >= cfg.transmittance_min
        nonzero = alpha.detach() > 0
        # Contributor cap: the deepest entries beyond the cap are dropped.
        rank = torch.cumsum((nonzero & keep).to(torch.int32), dim=1)
        keep = keep & (rank <= cfg.max_contributors)
        weights = torch.where(keep, alpha * t_before, torch.zeros_like(alpha))

        acc = weights.sum(dim=1)
        color = weights @ proj["color"][members] + (1.0 - acc)[:, None] * background

        normals = proj["normal"][members]
        blended_n = weights @ normals
        n_norm = blended_n.norm(dim=-1, keepdim=True)
        covered = n_norm > 1e-12
        safe_norm = torch.where(covered, n_norm, torch.ones_like(n_norm))
        normal = torch.where(covered, blended_n / safe_norm, torch.zeros_like(blended_n))

        ray = rays[tile.pixel_index]
        num = weights @ proj["plane_d"][members]
        den = (blended_n * ray).sum(-1)
        valid = (acc.detach() >= max(cfg.depth_alpha_min, 1e-12)) & (den.detach().abs() > 1e-12)
        safe_den = torch.where(valid, den, torch.ones_like(den))
        depth = torch.where(valid, num / safe_den, torch.zeros_like(num))

        ids, w = self._compact_contributors(weights.detach(), nonzero & keep, proj["ids"][members])
        return color, acc, depth, normal, ids, w

    def _compact_contributors(
        self, weights: torch.Tensor, valid: torch.Tensor, global_ids: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Front-to-back contributor lists padded to max_contributors with -1 / 0."""
        k_max = self.config.max_contributors
        n_pix, count = weights.shape
        sort_key = (~valid).to(torch.int32)
        order = torch.argsort(sort_key, dim=1, stable=True)[:, : min(k_max, count)]
        ids = torch.gather(global_ids[None, :].expand(n_pix, -1), 1, order)
        w = torch.gather(weights, 1, order)
        is_valid = torch.gather(valid, 1, order)
        ids = torch.where(is_valid, ids, torch.full_like(ids, -1))
        w = torch.where(is_valid, w, torch.zeros_like(w))
        if ids.shape[1] < k_max:
            pad = k_max - ids.shape[1]
            ids = torch.cat([ids, torch.full((n_pix, pad), -1, dtype=torch.long)], dim=1)
            w = torch.cat([w, torch.zeros((n_pix, pad), dtype=w.dtype)], dim=1)
        return ids, w


# =============================================================================
# Verification harness
# =============================================================================


def _weight_pattern(shape: tuple[int, ...], dtype: torch.dtype) -> torch.Tensor:
    generator = torch.Generator().manual_seed(0)
    return torch.rand(shape, generator=generator, dtype=torch.float64).to(dtype)


def _functional_color(buffers: RenderBuffers) -> torch.Tensor:
    return (buffers.color * _weight_pattern(tuple(buffers.color.shape), buffers.color.dtype)).sum()


def _functional_alpha(buffers: RenderBuffers) -> torch.Tensor:
    return (buffers.alpha * _weight_pattern(tuple(buffers.alpha.shape), buffers.alpha.dtype)).sum()


def _functional_depth(buffers: RenderBuffers) -> torch.Tensor:
    return (buffers.depth * _weight_pattern(tuple(buffers.depth.shape), buffers.depth.dtype)).sum()


def _functional_normal(buffers: RenderBuffers) -> torch.Tensor:
    pattern = _weight_pattern(tuple(buffers.normal.shape), buffers.normal.dtype)
    return (buffers.normal * pattern).sum()


def _functional_l1_color(buffers: RenderBuffers) -> torch.Tensor:
    target = _weight_pattern(tuple(buffers.color.shape), buffers.color.dtype)
    return (buffers.color - target).abs().mean()


FUNCTIONALS: dict[str, Callable[[RenderBuffers], torch.Tensor]] = {
    "color": _functional_color,
    "alpha": _functional_alpha,
    "depth": _functional_depth,
    "normal": _functional_normal,
    "l1_color": _functional_l1_color,
}

# A loss over one render and the cloud that produced it.
LossFunctional = Callable[[RenderBuffers, GaussianCloud], torch.Tensor]


def _buffer_only(buffer_fn: Callable[[RenderBuffers], torch.Tensor]) -> LossFunctional:
    def loss(buffers: RenderBuffers, cloud: GaussianCloud) -> torch.Tensor:
        return buffer_fn(buffers)

    return loss


def gradcheck(
    cloud: GaussianCloud,
    cam: Camera,
    functional: str | LossFunctional = "color",
    tolerance: float = 1e-3,
    eps: float = 1e-4,
    config: RasterConfig | None = None,
    extra_params: dict[str, torch.Tensor] | None = None,
) -> GradcheckReport:
    """
    Compare autograd gradients with central differences in float64.

    The error for a parameter class is max|analytic - numeric| divided by
    max|numeric| over that class (0 when both vanish).

    Args:
        cloud: cloud to check; converted to float64
        cam: camera
        functional: key of FUNCTIONALS, or a loss callable(buffers, cloud)
        tolerance: threshold for ``report.passed``
        eps: finite-difference step
        config: raster settings
        extra_params: further float64 leaves the loss reads (for example the
            depth-correction parameters); they are perturbed in place and
            restored

    Returns:
        GradcheckReport with the worst error per parameter class
    """
    if isinstance(functional, str):
        if functional not in FUNCTIONALS:
            raise UsageError(f"unknown functional '{functional}'")
        fn = _buffer_only(FUNCTIONALS[functional])
        name = functional
    else:
        fn = functional
        name = getattr(functional, "__name__", "loss")
    extras = dict(extra_params or {})
    for key, tensor in extras.items():
        if tensor.dtype != torch.float64 or not tensor.requires_grad:
            raise UsageError(f"extra parameter '{key}' must be a float64 tensor requiring grad")
    rasterizer = Rasterizer(config)
    base = cloud.to(torch.float64)
    params = {
        field_name: getattr(base, field_name).clone().requires_grad_(True)
        for field_name in TRAINABLE_FIELDS
    }

    def evaluate(values: dict[str, torch.Tensor]) -> torch.Tensor:
        buffers = rasterizer._rasterize(
            values["means"],
            values["quats"],
            values["log_scales"],
            values["opacity_logits"],
            values["colors"],
            cam,
        )
        live = GaussianCloud(
            potential=base.potential,
            part_probs=base.part_probs,
            **{field_name: values[field_name] for field_name in TRAINABLE_FIELDS},
        )
        return fn(buffers, live)

    value = evaluate(params)
    leaves = {**params, **extras}
    analytic = torch.autograd.grad(value, list(leaves.values()), allow_unused=True)
    report = GradcheckReport(functional=name, tolerance=tolerance)
    with torch.no_grad():
        frozen = {key: t.detach().clone() for key, t in params.items()}
        targets = {**frozen, **extras}
        for key, grad in zip(leaves, analytic, strict=True):
            grad = torch.zeros_like(targets[key]) if grad is None else grad
            numeric = torch.zeros_like(targets[key])
            flat = targets[key].view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + eps
                plus = evaluate(frozen).item()
                flat[i] = original - eps
                minus = evaluate(frozen).item()
                flat[i] = original
                numeric.view(-1)[i] = (plus - minus) / (2 * eps)
            scale = numeric.abs().max().item()
            diff = (grad - numeric).abs().max().item()
            report.max_rel_error[key] = 0.0 if diff == 0.0 else diff / max(scale, 1e-12)
    logger.debug("gradcheck %s: %s", name, report.max_rel_error)
    return report


def save_buffers(buffers: RenderBuffers, out_dir: str, stem: str) -> None:
    """PNG color plus PFM depth, normal and alpha."""
    save_png(f"{out_dir}/{stem}_color.png", buffers.color.detach().cpu().numpy())
    save_pfm(f"{out_dir}/{stem}_depth.pfm", buffers.depth.detach().cpu().numpy().astype(np.float32))
    save_pfm(f"{out_dir}/{stem}_alpha.pfm", buffers.alpha.detach().cpu().numpy().astype(np.float32))
    normal = buffers.normal.detach().cpu().numpy().astype(np.float32)
    save_pfm(f"{out_dir}/{stem}_normal.pfm", normal)
