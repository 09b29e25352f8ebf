"""
Utility modules for the articulated splat engine.
"""

from .io import load_cameras, load_png, save_cameras, save_png, write_json
from .seeding import manifest_seeds, numpy_rng, torch_generator

__all__ = [
    "load_cameras",
    "load_png",
    "manifest_seeds",
    "numpy_rng",
    "save_cameras",
    "save_png",
    "torch_generator",
    "write_json",
]
