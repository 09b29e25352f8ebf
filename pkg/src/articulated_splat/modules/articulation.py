"""
Part-aware segmentation and joint handling.

Part masks are back-projected onto primitives through the renderer's blend
weights, primitives are assigned to parts by thresholding, the primitives
where two parts meet are collected, and a joint-estimation client (mock,
subprocess or Gemini) turns renders of those regions into joint parameters.
Joints are replayed on the cloud to generate unseen articulation states.
"""

import json
import logging
import os
import subprocess
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import numpy as np
import torch
from pydantic import ValidationError
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from ..core.config import ArticulationConfig
from ..core.errors import ConfigurationError, JointSchemaError, UsageError, WarningCounter
from ..core.gaussians import GaussianCloud
from ..core.geometry import matrix_to_quaternion, quaternion_multiply
from ..core.models import ArticulatedTree, Camera, JointParams, JointSpec, JointType
from ..utils.io import read_json, save_png, write_json
from .rasterizer import Rasterizer

try:
    from google import genai
    from google.genai import types
except ImportError:
    genai = None
    types = None

logger = logging.getLogger(__name__)

UNASSIGNED = -1

JOINT_SYSTEM_MESSAGE = """You estimate the joints of articulated objects.

You receive an articulated tree (parts, parents, joint types) and renderings
of the regions where each child part meets its parent. For every joint in
the tree return its axis (unit 3-vector in world coordinates), its pivot
(a 3D point on the axis, required for revolute joints) and its motion range
[min, max] in radians (revolute) or world units (prismatic).

Respond with JSON only:
{"joints": [{"child": str, "type": "revolute"|"prismatic",
             "axis": [x, y, z], "pivot": [x, y, z] | null,
             "range": [min, max]}]}"""


# =============================================================================
# Part probabilities
# =============================================================================


def backproject_part_probs(
    cloud: GaussianCloud,
    cameras: Sequence[Camera],
    masks: Sequence[torch.Tensor | np.ndarray],
    rasterizer: Rasterizer | None = None,
) -> GaussianCloud:
    """
    Weight-normalized accumulation of part masks onto primitives.

    m_i^o = sum over views and pixels of M^o(p) w_i(p), divided by the sum of
    w_i(p), where w_i(p) is primitive i's blend weight at pixel p. Primitives
    that contribute to no pixel keep their previous probabilities.

    Args:
        cloud: Gaussian cloud
        cameras: one camera per mask set
        masks: per view, (Q, H, W) binary part masks at render resolution
        rasterizer: renderer (a default one is created when omitted)

    Returns:
        copy of ``cloud`` with Q part probabilities per primitive

    Raises:
        UsageError: mask count or resolution does not match the cameras
    """
    if len(cameras) != len(masks):
        raise UsageError(f"{len(masks)} mask sets for {len(cameras)} cameras")
    rasterizer = rasterizer or Rasterizer()
    if not masks:
        return cloud.clone()
    part_count = int(torch.as_tensor(np.asarray(masks[0])).shape[0])
    numerator = torch.zeros(cloud.num, part_count, dtype=torch.float64)
    denominator = torch.zeros(cloud.num, dtype=torch.float64)

    for cam, mask in zip(cameras, masks, strict=True):
        mask_t = torch.as_tensor(np.asarray(mask), dtype=torch.float64)
        if tuple(mask_t.shape) != (part_count, cam.height, cam.width):
            raise UsageError(
                f"masks of camera {cam.id} have shape {tuple(mask_t.shape)}, "
                f"expected {(part_count, cam.height, cam.width)}"
            )
        with torch.no_grad():
            buffers = rasterizer.render(cloud, cam)
        ids = buffers.contributor_ids.reshape(cam.height * cam.width, -1)
        weights = buffers.contributor_weights.detach().to(torch.float64).reshape(ids.shape)
        pixel_masks = mask_t.reshape(part_count, -1).T  # (P, Q)
        valid = ids >= 0
        flat_ids = ids[valid]
        flat_w = weights[valid]
        pixel_index = torch.nonzero(valid)[:, 0]
        denominator.index_add_(0, flat_ids, flat_w)
        numerator.index_add_(0, flat_ids, flat_w.unsqueeze(-1) * pixel_masks[pixel_index])

    seen = denominator > 1e-12
    same_width = cloud.part_count == part_count
    updated = cloud.clone() if same_width else cloud.with_part_count(part_count)
    probs = updated.part_probs.to(torch.float64)
    probs[seen] = numerator[seen] / denominator[seen].unsqueeze(-1)
    updated.part_probs = probs.clamp(0.0, 1.0).to(cloud.dtype)
    logger.info(
        "back-projected %d part masks over %d views; %d/%d primitives observed",
        part_count,
        len(cameras),
        int(seen.sum()),
        cloud.num,
    )
    return updated


def assign_parts(cloud: GaussianCloud | torch.Tensor | np.ndarray, tau: float = 0.5) -> np.ndarray:
    """
    Part index per primitive: argmax of the part probabilities when the
    maximum exceeds ``tau`` (strictly), otherwise -1. Ties go to the lower
    part index.
    """
    probs = cloud.part_probs if isinstance(cloud, GaussianCloud) else cloud
    values = np.asarray(torch.as_tensor(probs).detach().cpu(), dtype=np.float64)
    if values.ndim != 2 or values.shape[1] == 0:
        return np.full(len(values), UNASSIGNED, dtype=np.int64)
    best = values.argmax(axis=1)
    return np.where(values.max(axis=1) > tau, best, UNASSIGNED).astype(np.int64)


def attach_unassigned(cloud: GaussianCloud, labels: np.ndarray) -> np.ndarray:
    """Give every unassigned primitive the part of its nearest assigned neighbour."""
    labels = np.asarray(labels, dtype=np.int64).copy()
    assigned = labels != UNASSIGNED
    if assigned.all() or not assigned.any():
        return labels
    centers = cloud.centers()
    _, nearest = cKDTree(centers[assigned]).query(centers[~assigned])
    labels[~assigned] = labels[assigned][nearest]
    return labels


def assignment_accuracy(labels: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of primitives whose label matches the ground-truth part."""
    labels = np.asarray(labels)
    truth = np.asarray(truth)
    return float((labels == truth).mean()) if len(truth) else 0.0


# =============================================================================
# Connecting regions
# =============================================================================


def default_connect_threshold(cloud: GaussianCloud, factor: float = 3.0) -> float:
    """``factor`` times the median nearest-neighbour spacing of the centers."""
    centers = cloud.centers()
    if len(centers) < 2:
        return 0.0
    distances, _ = cKDTree(centers).query(centers, k=2)
    return factor * float(np.median(distances[:, 1]))


def connecting_region(
    cloud: GaussianCloud,
    labels: np.ndarray,
    part_a: int,
    part_b: int,
    threshold: float | None = None,
    warnings: WarningCounter | None = None,
) -> np.ndarray:
    """
    Primitives of either part whose center lies within ``threshold`` of some
    center of the other part.

    Returns:
        sorted primitive indices; empty (with a warning) when a part is empty
    """
    labels = np.asarray(labels, dtype=np.int64)
    index_a = np.nonzero(labels == part_a)[0]
    index_b = np.nonzero(labels == part_b)[0]
    if not len(index_a) or not len(index_b):
        if warnings is not None:
            warnings.bump("connect_empty_part")
        logger.warning("connecting region %d/%d: a part is empty", part_a, part_b)
        return np.zeros(0, dtype=np.int64)
    if threshold is None:
        threshold = default_connect_threshold(cloud)
    centers = cloud.centers()
    tree_a, tree_b = cKDTree(centers[index_a]), cKDTree(centers[index_b])
    bound = threshold * (1 + 1e-12)
    near_a = np.isfinite(tree_b.query(centers[index_a], distance_upper_bound=bound)[0])
    near_b = np.isfinite(tree_a.query(centers[index_b], distance_upper_bound=bound)[0])
    return np.sort(np.concatenate([index_a[near_a], index_b[near_b]]))


# =============================================================================
# Joint clients
# =============================================================================


@dataclass
class JointRequest:
    """Tree serialization plus the paths of the connecting-region renders."""

    tree: dict[str, Any]
    image_paths: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict[str, Any]:
        return {"tree": self.tree, "image_paths": self.image_paths}


class JointClient(Protocol):
    """Answers a JointRequest with a payload following the joint response schema."""

    def estimate(self, request: JointRequest) -> Any: ...


class MockJointClient:
    """Deterministic client returning configured joint parameters."""

    def __init__(self, joints: dict[str, JointParams]) -> None:
        self.joints = dict(joints)

    @classmethod
    def from_tree(cls, tree: ArticulatedTree) -> "MockJointClient":
        return cls({j.child: j.params for j in tree.joints if j.params is not None})

    def estimate(self, request: JointRequest) -> Any:
        return {
            "joints": [
                {
                    "child": child,
                    "type": params.joint_type.value,
                    "axis": list(params.axis),
                    "pivot": None if params.pivot is None else list(params.pivot),
                    "range": list(params.range),
                }
                for child, params in self.joints.items()
            ]
        }


class SubprocessJointClient:
    """Sends the request as JSON on stdin of ``command`` and reads JSON from its stdout."""

    def __init__(self, command: Sequence[str], timeout: float = 60.0) -> None:
        if not command:
            raise ConfigurationError("subprocess joint client needs a command")
        self.command = list(command)
        self.timeout = timeout

    def estimate(self, request: JointRequest) -> Any:
        try:
            completed = subprocess.run(
                self.command,
                input=json.dumps(request.to_json_dict()),
                capture_output=True,
                text=True,
                timeout=self.timeout,
                check=False,
            )
        except subprocess.TimeoutExpired as exc:
            raise JointSchemaError(f"joint client timed out after {self.timeout:.0f}s") from exc
        if completed.returncode != 0:
            raise JointSchemaError(
                f"joint client exited with {completed.returncode}", raw_payload=completed.stderr
            )
        return completed.stdout


class GeminiJointClient:
    """Queries a Gemini model with the tree and the connecting-region renders."""

    def __init__(self, model: str = "gemini-2.5-flash", api_key: str | None = None) -> None:
        if genai is None:
            raise ConfigurationError(
                "Google GenAI SDK not installed. Run: pip install google-genai"
            )
        key = api_key or os.environ.get("GEMINI_API_KEY") or os.environ.get("GOOGLE_API_KEY")
        if not key:
            raise ConfigurationError("set GEMINI_API_KEY to use the gemini joint client")
        self.model = model
        self.client = genai.Client(api_key=key)

    def estimate(self, request: JointRequest) -> Any:
        parts = [types.Part(text=f"ARTICULATED TREE:\n{json.dumps(request.tree, indent=2)}")]
        for path in request.image_paths:
            parts.append(types.Part.from_bytes(data=Path(path).read_bytes(), mime_type="image/png"))
        response = self.client.models.generate_content(
            model=self.model,
            contents=types.Content(parts=parts),
            config=types.GenerateContentConfig(
                system_instruction=JOINT_SYSTEM_MESSAGE,
                temperature=0.2,
                response_mime_type="application/json",
            ),
        )
        return response.text


def make_joint_client(
    config: ArticulationConfig, tree: ArticulatedTree | None = None
) -> JointClient:
    if config.client == "mock":
        if tree is None:
            raise ConfigurationError("the mock joint client needs a tree with parameters")
        return MockJointClient.from_tree(tree)
    if config.client == "subprocess":
        return SubprocessJointClient(config.client_command, config.client_timeout)
    return GeminiJointClient(config.gemini_model)


def _strip_fences(text: str) -> str:
    text = text.strip()
    if text.startswith("```"):
        lines = text.split("\n")
        if lines[0].startswith("```"):
            lines = lines[1:]
        if lines and lines[-1].strip() == "```":
            lines = lines[:-1]
        text = "\n".join(lines)
    return text


def parse_joint_response(payload: Any, tree: ArticulatedTree) -> dict[str, JointParams]:
    """
    Validate a client payload against the tree.

    Raises:
        JointSchemaError: unparseable JSON, missing or unknown joints, a type
            that disagrees with the tree, or parameters violating JointParams
    """
    raw = payload
    if isinstance(payload, (str, bytes)):
        try:
            text = payload.decode() if isinstance(payload, bytes) else payload
            payload = json.loads(_strip_fences(text))
        except json.JSONDecodeError as exc:
            logger.error("joint response is not JSON: %r", raw)
            raise JointSchemaError(f"joint response is not JSON: {exc}", raw_payload=raw) from exc
    if not isinstance(payload, dict) or not isinstance(payload.get("joints"), list):
        logger.error("joint response lacks a joints list: %r", raw)
        raise JointSchemaError(
            "joint response must be an object with a 'joints' list", raw_payload=raw
        )

    expected = {j.child: j for j in tree.joints}
    result: dict[str, JointParams] = {}
    for entry in payload["joints"]:
        if not isinstance(entry, dict) or entry.get("child") not in expected:
            logger.error("joint response names an unknown joint: %r", raw)
            raise JointSchemaError(f"unknown joint entry {entry!r}", raw_payload=raw)
        spec = expected[entry["child"]]
        if entry.get("type", spec.joint_type.value) != spec.joint_type.value:
            raise JointSchemaError(
                f"joint '{spec.child}' has type {entry.get('type')}, "
                f"tree says {spec.joint_type.value}",
                raw_payload=raw,
            )
        try:
            result[spec.child] = JointParams(
                joint_type=spec.joint_type,
                axis=tuple(entry["axis"]),
                pivot=None if entry.get("pivot") is None else tuple(entry["pivot"]),
                range=tuple(entry["range"]),
            )
        except (KeyError, TypeError, ValidationError) as exc:
            logger.error("invalid parameters for joint '%s': %r", spec.child, raw)
            raise JointSchemaError(
                f"invalid parameters for joint '{spec.child}': {exc}", raw_payload=raw
            ) from exc
    missing = set(expected) - set(result)
    if missing:
        raise JointSchemaError(f"joint response misses {sorted(missing)}", raw_payload=raw)
    return result


def render_connecting_regions(
    cloud: GaussianCloud,
    labels: np.ndarray,
    tree: ArticulatedTree,
    cameras: Sequence[Camera],
    out_dir: str | Path,
    threshold: float | None = None,
    rasterizer: Rasterizer | None = None,
    warnings: WarningCounter | None = None,
) -> list[str]:
    """Render each joint's connecting region from every camera; returns the PNG paths."""
    rasterizer = rasterizer or Rasterizer()
    paths = []
    for joint in tree.joints:
        child = tree.part_index(joint.child)
        parent_name = tree.parent_of(joint.child)
        assert parent_name is not None
        parent = tree.part_index(parent_name)
        region = connecting_region(cloud, labels, child, parent, threshold, warnings)
        if not len(region):
            continue
        subset = cloud.subset(torch.as_tensor(region))
        for cam in cameras:
            with torch.no_grad():
                color = rasterizer.render(subset, cam).color.detach().cpu().numpy()
            path = Path(out_dir) / f"connect_{joint.child}_{cam.id:03d}.png"
            save_png(path, color)
            paths.append(str(path))
    return paths


def estimate_joints(
    tree: ArticulatedTree,
    client: JointClient,
    image_paths: Sequence[str] = (),
) -> ArticulatedTree:
    """
    Ask ``client`` for every joint of ``tree``.

    Returns:
        a copy of the tree with validated parameters on every joint

    Raises:
        JointSchemaError: malformed client response
    """
    skeleton = ArticulatedTree(
        parts=tree.parts,
        joints=[JointSpec(child=j.child, joint_type=j.joint_type) for j in tree.joints],
    )
    request = JointRequest(tree=skeleton.to_json_dict(), image_paths=list(image_paths))
    params = parse_joint_response(client.estimate(request), tree)
    joints = [j.model_copy(update={"params": params[j.child]}) for j in tree.joints]
    logger.info("estimated %d joints", len(joints))
    return ArticulatedTree(parts=tree.parts, joints=joints)


def save_tree(path: str | Path, tree: ArticulatedTree) -> None:
    write_json(path, tree.to_json_dict())


def load_tree(path: str | Path) -> ArticulatedTree:
    return ArticulatedTree.from_json_dict(read_json(path))


# =============================================================================
# Joint replay
# =============================================================================


def joint_transform(joint: JointParams, magnitude: float) -> tuple[np.ndarray, np.ndarray]:
    """Rigid (rotation, translation) of a joint motion: x -> R x + t."""
    axis = np.asarray(joint.axis, dtype=np.float64)
    if joint.joint_type == JointType.PRISMATIC:
        return np.eye(3), axis * magnitude
    rotation = Rotation.from_rotvec(axis * magnitude).as_matrix()
    pivot = np.asarray(joint.pivot, dtype=np.float64)
    return rotation, pivot - rotation @ pivot


def moving_parts(tree: ArticulatedTree, child: str) -> list[int]:
    """Index of ``child`` and of every part below it."""
    moving = [child]
    frontier = [child]
    while frontier:
        node = frontier.pop()
        for part in tree.parts:
            if part.parent == node:
                moving.append(part.name)
                frontier.append(part.name)
    return sorted(tree.part_index(name) for name in moving)


def apply_joint(
    cloud: GaussianCloud,
    labels: np.ndarray,
    parts: int | Sequence[int],
    joint: JointParams,
    magnitude: float,
    warnings: WarningCounter | None = None,
) -> GaussianCloud:
    """
    Move the primitives of ``parts`` by the joint motion.

    Revolute joints rotate positions about the axis through the pivot and
    compose the rotation onto the quaternions; prismatic joints translate
    along the axis. Magnitudes outside the joint range are clamped.
    """
    low, high = joint.range
    if magnitude < low or magnitude > high:
        clamped = min(max(magnitude, low), high)
        if warnings is not None:
            warnings.bump("joint_clamped")
        logger.warning("joint magnitude %.4f outside [%.4f, %.4f]; clamped", magnitude, low, high)
        magnitude = clamped
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != cloud.num:
        raise UsageError(f"{len(labels)} labels for {cloud.num} primitives")
    selected = torch.as_tensor(np.isin(labels, np.atleast_1d(parts)))
    moved = cloud.clone()
    if magnitude == 0 or not bool(selected.any()):
        return moved

    rotation, translation = joint_transform(joint, magnitude)
    dtype = cloud.dtype
    with torch.no_grad():
        means = moved.means[selected].to(torch.float64)
        rot_t = torch.as_tensor(rotation)
        moved.means[selected] = (means @ rot_t.T + torch.as_tensor(translation)).to(dtype)
        if joint.joint_type == JointType.REVOLUTE:
            count = int(selected.sum())
            q_motion = torch.as_tensor(matrix_to_quaternion(rotation)).expand(count, 4)
            quats = quaternion_multiply(q_motion, moved.quats[selected].to(torch.float64))
            moved.quats[selected] = quats.to(dtype)
    return moved
