"""
Closed-form geometry shared by every stage: quaternions, covariances,
EWA projection, planar normals and camera helpers.

Quaternions are stored scalar-first (w, x, y, z).
"""

from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from .errors import GeometryValidationError
from .models import QUATERNION_TOLERANCE, Camera, GaussianPrimitive

# Off-screen means are clamped to this multiple of the half field of view
# before evaluating the projection Jacobian.
FOV_CLAMP = 1.3


@dataclass(frozen=True)
class ProjectedGaussian:
    """Screen-space footprint of one primitive."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float


@dataclass(frozen=True)
class CameraTensors:
    """Torch views of a camera used inside differentiable code."""

    rotation: torch.Tensor
    translation: torch.Tensor
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float


def camera_tensors(
    cam: Camera, dtype: torch.dtype = torch.float32, device: torch.device | str = "cpu"
) -> CameraTensors:
    return CameraTensors(
        rotation=torch.as_tensor(cam.rotation, dtype=dtype, device=device),
        translation=torch.as_tensor(cam.translation, dtype=dtype, device=device),
        fx=cam.fx,
        fy=cam.fy,
        cx=cam.cx,
        cy=cam.cy,
        width=cam.width,
        height=cam.height,
        near=cam.near,
    )


# =============================================================================
# Quaternions
# =============================================================================


def quaternion_to_matrix(quats: torch.Tensor) -> torch.Tensor:
    """Rotation matrices for (..., 4) quaternions; input is normalized first."""
    q = quats / quats.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z),
            2 * (x * y - w * z),
            2 * (x * z + w * y),
            2 * (x * y + w * z),
            1 - 2 * (x * x + z * z),
            2 * (y * z - w * x),
            2 * (x * z - w * y),
            2 * (y * z + w * x),
            1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    ).reshape(*q.shape[:-1], 3, 3)


def quaternion_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hamilton product a * b (rotation b applied first)."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def matrix_to_quaternion(rotation: np.ndarray) -> np.ndarray:
    """Scalar-first quaternion of a rotation matrix."""
    x, y, z, w = Rotation.from_matrix(np.asarray(rotation, dtype=np.float64)).as_quat()
    return np.array([w, x, y, z])


def rodrigues(omega: torch.Tensor) -> torch.Tensor:
    """Differentiable axis-angle to rotation matrix, safe at zero angle."""
    theta_sq = (omega * omega).sum()
    theta = torch.sqrt(theta_sq.clamp_min(1e-24))
    wx, wy, wz = omega.unbind(-1)
    zero = torch.zeros_like(wx)
    skew = torch.stack([zero, -wz, wy, wz, zero, -wx, -wy, wx, zero]).reshape(3, 3)
    small = theta_sq < 1e-8
    # Taylor expansions keep gradients finite near the identity.
    a = torch.where(small, 1 - theta_sq / 6, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta_sq / 24, (1 - torch.cos(theta)) / theta_sq.clamp_min(1e-24))
    eye = torch.eye(3, dtype=omega.dtype, device=omega.device)
    return eye + a * skew + b * (skew @ skew)


# =============================================================================
# Covariance and projection
# =============================================================================


def covariance_from_params(quats: torch.Tensor, scales: torch.Tensor) -> torch.Tensor:
    """Sigma = R S S^T R^T for raw (unnormalized) quaternions and activated scales."""
    rot = quaternion_to_matrix(quats)
    m = rot * scales.unsqueeze(-2)
    return m @ m.transpose(-1, -2)


def build_covariance(
    rotation: torch.Tensor | np.ndarray, scales: torch.Tensor | np.ndarray
) -> torch.Tensor:
    """
    Build the 3D covariance of a Gaussian.

    Args:
        rotation: unit quaternion(s) (..., 4), scalar first
        scales: positive scales (..., 3)

    Returns:
        Symmetric positive-definite (..., 3, 3) matrices

    Raises:
        GeometryValidationError: quaternion norm off by more than 1e-6, or scales <= 0
    """
    q = rotation
    if isinstance(q, np.ndarray):
        q = torch.as_tensor(q, dtype=torch.float64)
    s = torch.as_tensor(scales, dtype=q.dtype) if isinstance(scales, np.ndarray) else scales
    norms = q.detach().norm(dim=-1)
    if bool(((norms - 1.0).abs() > QUATERNION_TOLERANCE).any()):
        raise GeometryValidationError(f"non-unit quaternion (norm {norms.max().item():.8f})")
    if bool((s.detach() <= 0).any()):
        raise GeometryValidationError("scales must be positive")
    return covariance_from_params(q, s)


def project_means(
    means: torch.Tensor, cam: CameraTensors
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Camera-space points, pixel means and view depths for (N, 3) world means."""
    p_cam = means @ cam.rotation.T + cam.translation
    z = p_cam[:, 2]
    safe_z = torch.where(z.abs() > 1e-12, z, torch.ones_like(z))
    u = cam.fx * p_cam[:, 0] / safe_z + cam.cx
    v = cam.fy * p_cam[:, 1] / safe_z + cam.cy
    return p_cam, torch.stack([u, v], dim=-1), z


def project_covariances(
    p_cam: torch.Tensor, cov3d: torch.Tensor, cam: CameraTensors, floor: float
) -> torch.Tensor:
    """EWA 2D covariances J W Sigma W^T J^T + floor * I."""
    z = p_cam[:, 2]
    safe_z = torch.where(z.abs() > 1e-12, z, torch.ones_like(z))
    lim_x = FOV_CLAMP * 0.5 * cam.width / cam.fx
    lim_y = FOV_CLAMP * 0.5 * cam.height / cam.fy
    tx = (p_cam[:, 0] / safe_z).clamp(-lim_x, lim_x) * safe_z
    ty = (p_cam[:, 1] / safe_z).clamp(-lim_y, lim_y) * safe_z
    zeros = torch.zeros_like(z)
    jac = torch.stack(
        [
            cam.fx / safe_z,
            zeros,
            -cam.fx * tx / (safe_z * safe_z),
            zeros,
            cam.fy / safe_z,
            -cam.fy * ty / (safe_z * safe_z),
        ],
        dim=-1,
    ).reshape(-1, 2, 3)
    t = jac @ cam.rotation
    cov2d = t @ cov3d @ t.transpose(-1, -2)
    eye = torch.eye(2, dtype=cov2d.dtype, device=cov2d.device)
    return cov2d + floor * eye


def project_gaussian(
    g: GaussianPrimitive, cam: Camera, cov_floor: float = 0.3
) -> ProjectedGaussian | None:
    """
    Project one primitive with the EWA approximation.

    Returns:
        The screen-space footprint, or None when the primitive is culled
        (view depth <= near).
    """
    cam_t = camera_tensors(cam, dtype=torch.float64)
    means = torch.tensor([g.position], dtype=torch.float64)
    p_cam, mean2d, depth = project_means(means, cam_t)
    if depth.item() <= cam.near:
        return None
    cov3d = build_covariance(
        torch.tensor([g.rotation], dtype=torch.float64),
        torch.tensor([g.scales], dtype=torch.float64),
    )
    cov2d = project_covariances(p_cam, cov3d, cam_t, cov_floor)
    return ProjectedGaussian(
        mean2d=mean2d[0].numpy(), cov2d=cov2d[0].numpy(), depth=float(depth.item())
    )


# =============================================================================
# Planar normals
# =============================================================================


def shortest_axis_normals(quats: torch.Tensor, scales: torch.Tensor) -> torch.Tensor:
    """World-frame axis of the smallest scale per primitive (ties -> lowest axis index)."""
    rot = quaternion_to_matrix(quats)
    idx = torch.argmin(scales.detach(), dim=-1)
    gather_idx = idx.view(-1, 1, 1).expand(-1, 3, 1)
    return torch.gather(rot, 2, gather_idx).squeeze(-1)


def orient_normals(normals: torch.Tensor, view_dirs: torch.Tensor) -> torch.Tensor:
    """Flip normals so that dot(n, view_dir) <= 0."""
    sign = torch.where((normals * view_dirs).sum(-1, keepdim=True).detach() > 0, -1.0, 1.0)
    return normals * sign.to(normals.dtype)


def planar_normal(
    g: GaussianPrimitive, view_dir: np.ndarray | tuple[float, float, float]
) -> np.ndarray:
    """
    Normal of a flattened primitive as seen along ``view_dir``.

    Args:
        g: the primitive
        view_dir: unit viewing direction (from the eye toward the primitive)

    Returns:
        Unit normal along the shortest scale axis, facing the viewer
    """
    quats = torch.tensor([g.rotation], dtype=torch.float64)
    scales = torch.tensor([g.scales], dtype=torch.float64)
    normal = shortest_axis_normals(quats, scales)
    direction = torch.tensor([tuple(view_dir)], dtype=torch.float64)
    oriented = orient_normals(normal, direction)[0]
    return (oriented / oriented.norm()).numpy()


# =============================================================================
# Camera helpers
# =============================================================================


def look_at(
    eye: np.ndarray, target: np.ndarray, up: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up_vec = np.array([0.0, 0.0, 1.0]) if up is None else np.asarray(up, dtype=np.float64)
    forward = target - eye
    forward /= np.linalg.norm(forward)
    if abs(float(forward @ up_vec)) > 1.0 - 1e-6:
        up_vec = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up_vec)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    return rotation, -rotation @ eye


def camera_rays(cam: Camera, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Camera-frame ray directions with z = 1 through every pixel center, (H, W, 3)."""
    ys, xs = torch.meshgrid(
        torch.arange(cam.height, dtype=dtype) + 0.5,
        torch.arange(cam.width, dtype=dtype) + 0.5,
        indexing="ij",
    )
    return torch.stack(
        [(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, torch.ones_like(xs)], dim=-1
    )


def hemisphere_directions(
    count: int, rng: np.random.Generator, min_z: float = 0.15, max_z: float = 0.9
) -> np.ndarray:
    """Area-uniform unit directions on the band min_z <= z <= max_z of the upper hemisphere."""
    z = rng.uniform(min_z, max_z, size=count)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=count)
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def orbit_cameras(
    center: np.ndarray,
    radius: float,
    count: int,
    width: int,
    height: int,
    fov_deg: float = 50.0,
    rng: np.random.Generator | None = None,
    start_id: int = 0,
) -> list[Camera]:
    """Cameras on the upper hemisphere looking at ``center``; seeded random or golden-spiral."""
    center = np.asarray(center, dtype=np.float64)
    if rng is not None:
        directions = hemisphere_directions(count, rng)
    else:
        # Golden-angle spiral gives an even deterministic cover of the band.
        k = np.arange(count) + 0.5
        z = 0.15 + (0.9 - 0.15) * k / count
        phi = np.pi * (3.0 - np.sqrt(5.0)) * k
        r = np.sqrt(1.0 - z * z)
        directions = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
    focal = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
    cams = []
    for offset, direction in enumerate(directions):
        rotation, translation = look_at(center + radius * direction, center)
        cams.append(
            Camera.from_matrices(
                rotation, translation, width, height, focal, camera_id=start_id + offset
            )
        )
    return cams
