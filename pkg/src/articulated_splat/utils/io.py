"""
File formats: PNG (Pillow), PFM, camera JSON, mesh OBJ/PLY.
"""

import json
import logging
from collections.abc import Sequence
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement

from ..core.models import Camera

if TYPE_CHECKING:
    from ..modules.meshing import TriangleMesh

logger = logging.getLogger(__name__)


def _ensure_parent(path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    return target


# =============================================================================
# Images
# =============================================================================


def save_png(path: str | Path, image: np.ndarray) -> None:
    """8-bit PNG from a float image in [0, 1] (H, W) or (H, W, 3)."""
    data = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(data * 255.0).astype(np.uint8)).save(_ensure_parent(path))


def load_png(path: str | Path) -> np.ndarray:
    """Float RGB image in [0, 1]."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def save_pfm(path: str | Path, data: np.ndarray) -> None:
    """32-bit float PFM; (H, W) as grayscale 'Pf', (H, W, 3) as color 'PF'."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        header = "Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = "PF"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3) data, got {arr.shape}")
    height, width = arr.shape[:2]
    with open(_ensure_parent(path), "wb") as handle:
        handle.write(f"{header}\n{width} {height}\n-1.0\n".encode("ascii"))
        # PFM rows run bottom to top, little endian.
        handle.write(np.flipud(arr).astype("<f4").tobytes())


def load_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as handle:
        header = handle.readline().decode("ascii").strip()
        width, height = (int(v) for v in handle.readline().decode("ascii").split())
        scale = float(handle.readline().decode("ascii").strip())
        channels = 3 if header == "PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(handle.read(), dtype=dtype, count=width * height * channels)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.flipud(data.reshape(shape)).astype(np.float32)


# =============================================================================
# JSON
# =============================================================================


def write_json(path: str | Path, payload: Any) -> None:
    with open(_ensure_parent(path), "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)


def read_json(path: str | Path) -> Any:
    with open(path, encoding="utf-8") as handle:
        return json.load(handle)


def save_cameras(path: str | Path, cameras: Sequence[Camera]) -> None:
    write_json(path, [cam.to_json_dict() for cam in cameras])


def load_cameras(path: str | Path) -> list[Camera]:
    return [Camera.model_validate(entry) for entry in read_json(path)]


# =============================================================================
# Meshes
# =============================================================================


def save_mesh_ply(path: str | Path, mesh: "TriangleMesh") -> None:
    """Binary PLY with optional per-vertex part id and color."""
    fields = [("x", "f4"), ("y", "f4"), ("z", "f4")]
    if mesh.part_ids is not None:
        fields.append(("part", "i4"))
    if mesh.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    vertex = np.empty(len(mesh.vertices), dtype=fields)
    vertex["x"], vertex["y"], vertex["z"] = mesh.vertices.T
    if mesh.part_ids is not None:
        vertex["part"] = mesh.part_ids
    if mesh.colors is not None:
        rgb = np.round(np.clip(mesh.colors, 0.0, 1.0) * 255).astype(np.uint8)
        vertex["red"], vertex["green"], vertex["blue"] = rgb.T
    faces = np.empty(len(mesh.faces), dtype=[("vertex_indices", "i4", (3,))])
    faces["vertex_indices"] = mesh.faces
    PlyData(
        [PlyElement.describe(vertex, "vertex"), PlyElement.describe(faces, "face")]
    ).write(str(_ensure_parent(path)))


def save_meshes_obj(
    path: str | Path, meshes: Sequence["TriangleMesh"], names: Sequence[str]
) -> None:
    """One OBJ with a group and material per part, plus a sibling .mtl file."""
    target = _ensure_parent(path)
    mtl_path = target.with_suffix(".mtl")
    palette = np.array(
        [[0.85, 0.33, 0.10], [0.00, 0.45, 0.74], [0.47, 0.67, 0.19], [0.93, 0.69, 0.13]]
    )
    with open(mtl_path, "w", encoding="utf-8") as mtl:
        for index, name in enumerate(names):
            r, g, b = palette[index % len(palette)]
            mtl.write(f"newmtl {name}\nKd {r:.3f} {g:.3f} {b:.3f}\n\n")
    offset = 1
    with open(target, "w", encoding="utf-8") as obj:
        obj.write(f"mtllib {mtl_path.name}\n")
        for mesh, name in zip(meshes, names, strict=True):
            obj.write(f"g {name}\nusemtl {name}\n")
            for vx, vy, vz in mesh.vertices:
                obj.write(f"v {vx:.6f} {vy:.6f} {vz:.6f}\n")
            for a, b, c in mesh.faces + offset:
                obj.write(f"f {a} {b} {c}\n")
            offset += len(mesh.vertices)
    logger.info("wrote %d part meshes to %s", len(meshes), target)


# =============================================================================
# Point clouds
# =============================================================================


def save_points_ply(path: str | Path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    vertex = np.empty(len(pts), dtype=[("x", "f4"), ("y", "f4"), ("z", "f4")])
    vertex["x"], vertex["y"], vertex["z"] = pts.T
    PlyData([PlyElement.describe(vertex, "vertex")]).write(str(_ensure_parent(path)))


def load_points_ply(path: str | Path) -> np.ndarray:
    """x, y, z of every vertex; works for plain point clouds and Gaussian PLYs."""
    vertex = PlyData.read(str(path))["vertex"]
    return np.stack([vertex["x"], vertex["y"], vertex["z"]], axis=-1).astype(np.float64)
