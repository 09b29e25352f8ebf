"""
Photometric and planar loss family.

Color (L1 + SSIM), scale flattening, corrected depth regularization and
region-gated, edge-masked depth smoothness, plus the depth-correction
parameters and the region/edge preprocessing those losses consume.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from scipy.cluster.vq import kmeans2
from torch import nn

from ..core.errors import ConfigurationError, UsageError, WarningCounter
from ..core.gaussians import GaussianCloud

logger = logging.getLogger(__name__)

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
LUMA = (0.299, 0.587, 0.114)


# =============================================================================
# SSIM
# =============================================================================


def gaussian_window(
    size: int = 11, sigma: float = 1.5, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Normalized 2D Gaussian kernel (size, size)."""
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).to(dtype)


def _to_nchw(image: torch.Tensor) -> torch.Tensor:
    if image.ndim == 2:
        return image[None, None]
    if image.ndim == 3:
        return image.permute(2, 0, 1)[None]
    raise UsageError(f"expected (H, W) or (H, W, C) image, got {tuple(image.shape)}")


def _ssim_maps(
    x: torch.Tensor, y: torch.Tensor, window_size: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-pixel SSIM and contrast-structure maps for NCHW inputs."""
    channels = x.shape[1]
    size = min(window_size, x.shape[-2], x.shape[-1])
    if size % 2 == 0:
        size -= 1
    window = gaussian_window(size, dtype=x.dtype).expand(channels, 1, size, size).contiguous()
    pad = size // 2

    def blur(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(t, window, padding=pad, groups=channels)

    mu_x, mu_y = blur(x), blur(y)
    sigma_x = blur(x * x) - mu_x * mu_x
    sigma_y = blur(y * y) - mu_y * mu_y
    sigma_xy = blur(x * y) - mu_x * mu_y
    cs = (2 * sigma_xy + SSIM_C2) / (sigma_x + sigma_y + SSIM_C2)
    luminance = (2 * mu_x * mu_y + SSIM_C1) / (mu_x * mu_x + mu_y * mu_y + SSIM_C1)
    return luminance * cs, cs


def ssim(img1: torch.Tensor, img2: torch.Tensor, window_size: int = 11) -> torch.Tensor:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), zero padded."""
    if img1.shape != img2.shape:
        raise UsageError(f"image shapes differ: {tuple(img1.shape)} vs {tuple(img2.shape)}")
    ssim_map, _ = _ssim_maps(_to_nchw(img1), _to_nchw(img2), window_size)
    return ssim_map.mean()


def ms_ssim(
    img1: torch.Tensor, img2: torch.Tensor, scales: int = 3, window_size: int = 11
) -> torch.Tensor:
    """
    Multi-scale SSIM over ``scales`` dyadic levels.

    Level weights are the standard five-scale weights truncated and
    renormalized; contrast terms are clamped at a small positive floor so
    fractional powers stay differentiable.
    """
    if img1.shape != img2.shape:
        raise UsageError(f"image shapes differ: {tuple(img1.shape)} vs {tuple(img2.shape)}")
    weights = torch.tensor(MS_SSIM_WEIGHTS[:scales], dtype=img1.dtype)
    weights = weights / weights.sum()
    x, y = _to_nchw(img1), _to_nchw(img2)
    value = torch.ones((), dtype=img1.dtype)
    for level in range(scales):
        ssim_map, cs_map = _ssim_maps(x, y, window_size)
        if level == scales - 1:
            value = value * ssim_map.mean().clamp_min(1e-6) ** weights[level]
        else:
            value = value * cs_map.mean().clamp_min(1e-6) ** weights[level]
            if min(x.shape[-2:]) < 2:
                break
            x = F.avg_pool2d(x, 2)
            y = F.avg_pool2d(y, 2)
    return value


# =============================================================================
# Photometric and flattening losses
# =============================================================================


def loss_color(
    render: torch.Tensor, target: torch.Tensor, ssim_weight: float = 0.2
) -> torch.Tensor:
    """
    0.8 * L1 + 0.2 * (1 - SSIM).

    Raises:
        UsageError: shapes differ
    """
    if render.shape != target.shape:
        raise UsageError(f"render {tuple(render.shape)} and target {tuple(target.shape)} differ")
    target = target.to(render.dtype)
    l1 = (render - target).abs().mean()
    return (1.0 - ssim_weight) * l1 + ssim_weight * (1.0 - ssim(render, target))


def loss_scale(cloud: GaussianCloud) -> torch.Tensor:
    """Mean smallest activated scale; the gradient reaches only that axis (ties -> lowest)."""
    if cloud.num == 0:
        raise UsageError("loss_scale needs a non-empty cloud")
    scales = torch.exp(cloud.log_scales)
    idx = torch.argmin(scales.detach(), dim=-1, keepdim=True)
    return torch.gather(scales, 1, idx).mean()


# =============================================================================
# Depth correction and regularization
# =============================================================================


class DepthCorrection(nn.Module):
    """
    Per-view affine correction of pseudo-depth: exp(log_phi) * D + eta.

    eta is a low-resolution offset grid bilinearly upsampled to the image;
    a 1x1 grid is the strict scalar-offset mode.
    """

    def __init__(
        self,
        view_ids: list[int],
        height: int,
        width: int,
        grid: int = 16,
        freeze_scale: bool = False,
        freeze_offset: bool = False,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        if grid > 1 and (height % grid or width % grid):
            raise ConfigurationError(
                f"offset grid {grid} must divide the image resolution {width}x{height}"
            )
        self.view_index = {view_id: row for row, view_id in enumerate(view_ids)}
        self.grid = grid
        self.log_phi = nn.Parameter(
            torch.zeros(len(view_ids), dtype=dtype), requires_grad=not freeze_scale
        )
        self.eta = nn.Parameter(
            torch.zeros(len(view_ids), grid, grid, dtype=dtype), requires_grad=not freeze_offset
        )

    def _row(self, view_id: int) -> int:
        if view_id not in self.view_index:
            raise UsageError(f"no depth correction for view {view_id}")
        return self.view_index[view_id]

    def phi(self, view_id: int) -> torch.Tensor:
        return torch.exp(self.log_phi[self._row(view_id)])

    def offset_field(self, view_id: int, height: int, width: int) -> torch.Tensor:
        eta = self.eta[self._row(view_id)]
        if self.grid == 1:
            return eta.reshape(()).expand(height, width)
        return F.interpolate(
            eta[None, None], size=(height, width), mode="bilinear", align_corners=True
        )[0, 0]

    def correct(self, view_id: int, pseudo_depth: torch.Tensor) -> torch.Tensor:
        height, width = pseudo_depth.shape
        return self.phi(view_id) * pseudo_depth + self.offset_field(view_id, height, width)

    def summary(self) -> dict[int, dict[str, float]]:
        """phi and mean eta per view, for logs and tests."""
        return {
            view_id: {
                "phi": float(torch.exp(self.log_phi[row]).detach()),
                "eta_mean": float(self.eta[row].detach().mean()),
            }
            for view_id, row in self.view_index.items()
        }


def loss_depth_reg(
    rendered_depth: torch.Tensor,
    pseudo_depth: torch.Tensor,
    alpha: torch.Tensor,
    correction: DepthCorrection | None = None,
    view_id: int | None = None,
    alpha_threshold: float = 0.5,
    warnings: WarningCounter | None = None,
) -> torch.Tensor:
    """
    Masked mean L1 between rendered depth and corrected pseudo-depth.

    Pixels with alpha below ``alpha_threshold`` or without a pseudo-depth
    measurement (<= 0) are excluded.

    Returns:
        Scalar loss; 0 (and a counted warning) when every pixel is masked
    """
    if rendered_depth.shape != pseudo_depth.shape or alpha.shape != rendered_depth.shape:
        raise UsageError("depth, pseudo-depth and alpha must share one shape")
    pseudo = pseudo_depth.to(rendered_depth.dtype)
    target = pseudo
    if correction is not None:
        if view_id is None:
            raise UsageError("a view id is required to apply depth correction")
        target = correction.correct(view_id, pseudo).to(rendered_depth.dtype)
    mask = (alpha.detach() >= alpha_threshold) & (pseudo > 0)
    if not bool(mask.any()):
        if warnings is not None:
            warnings.bump("depth_all_masked")
        logger.warning("depth regularization: every pixel masked, contributing 0")
        return rendered_depth.sum() * 0.0
    return (rendered_depth - target).abs()[mask].mean()


# =============================================================================
# Regions, edges and smoothness
# =============================================================================


@dataclass
class RegionSegmentation:
    """Per-pixel region labels in 0..num_regions-1, sorted by mean depth."""

    labels: np.ndarray
    num_regions: int
    means: np.ndarray


def segment_regions(
    pseudo_depth: np.ndarray | torch.Tensor, c: int, seed: int = 0
) -> RegionSegmentation:
    """
    1D k-means over depth values (k-means++ init, 50 iterations).

    Fewer distinct depths than ``c`` merge clusters; labels stay contiguous
    and ascend with the cluster mean.
    """
    if c < 1:
        raise ConfigurationError("region count must be >= 1")
    if isinstance(pseudo_depth, torch.Tensor):
        pseudo_depth = pseudo_depth.detach().cpu().numpy()
    depth = np.asarray(pseudo_depth, dtype=np.float64)
    values = depth.reshape(-1, 1)
    k = min(c, len(np.unique(values)))
    if k <= 1:
        return RegionSegmentation(
            labels=np.zeros(depth.shape, dtype=np.int64),
            num_regions=1,
            means=np.array([values.mean()]),
        )
    _, raw = kmeans2(values, k, iter=50, minit="++", seed=np.random.default_rng(seed))
    present = np.unique(raw)
    means = np.array([values[raw == label].mean() for label in present])
    order = present[np.argsort(means, kind="stable")]
    remap = np.empty(raw.max() + 1, dtype=np.int64)
    remap[order] = np.arange(len(order))
    return RegionSegmentation(
        labels=remap[raw].reshape(depth.shape), num_regions=len(order), means=np.sort(means)
    )


def luminance(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img[..., :3] @ np.asarray(LUMA)


def sobel_edge_mask(image: np.ndarray | torch.Tensor, threshold: float) -> np.ndarray:
    """True off-edge: Sobel gradient magnitude of the luminance (scaled by 1/4) below threshold."""
    arr = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else image
    gray = luminance(arr)
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    magnitude = np.hypot(gx, gy) / 4.0
    return magnitude < threshold


def loss_depth_smooth(
    depth: torch.Tensor,
    regions: np.ndarray | torch.Tensor,
    edge_mask: np.ndarray | torch.Tensor,
    reduction: str = "mean",
) -> torch.Tensor:
    """
    Total variation of rendered depth over forward-difference pairs that stay
    inside one region and start at an off-edge pixel.

    Args:
        depth: (H, W) rendered depth
        regions: (H, W) integer labels
        edge_mask: (H, W) boolean, True where smoothing applies
        reduction: "sum" or "mean" over the gated pairs
    """
    labels = torch.as_tensor(regions)
    mask = torch.as_tensor(edge_mask, dtype=torch.bool)
    if labels.shape != depth.shape or mask.shape != depth.shape:
        raise UsageError("regions and edge mask must match the depth shape")
    gate_x = (labels[:, 1:] == labels[:, :-1]) & mask[:, :-1]
    gate_y = (labels[1:, :] == labels[:-1, :]) & mask[:-1, :]
    dx = (depth[:, 1:] - depth[:, :-1]).abs()
    dy = (depth[1:, :] - depth[:-1, :]).abs()
    total = dx[gate_x].sum() + dy[gate_y].sum()
    if reduction == "sum":
        return total
    if reduction != "mean":
        raise UsageError(f"unknown reduction '{reduction}'")
    count = int(gate_x.sum()) + int(gate_y.sum())
    return total / max(count, 1)
