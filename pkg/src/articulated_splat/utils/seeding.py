"""
Named random sub-streams derived from one manifest seed.
"""

import zlib

import numpy as np
import torch

STREAMS = ("planner", "trainer", "refiner", "sampler", "scene", "registration", "eval")


def stream_seed(seed: int, name: str) -> int:
    """Stable 63-bit seed for a named stream (independent of PYTHONHASHSEED)."""
    sequence = np.random.SeedSequence([seed, zlib.crc32(name.encode("utf-8"))])
    low, high = (int(v) for v in sequence.generate_state(2, dtype=np.uint32))
    return low | ((high & 0x7FFFFFFF) << 32)


def numpy_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(seed, name))


def torch_generator(seed: int, name: str) -> torch.Generator:
    return torch.Generator().manual_seed(stream_seed(seed, name))


def manifest_seeds(seed: int) -> dict[str, int]:
    """Every named stream's seed, as recorded in the run manifest."""
    return {name: stream_seed(seed, name) for name in STREAMS}
