"""
Observation records shared by the planner, trainers and the refinement loop.
"""

from dataclasses import dataclass
from typing import Protocol

import numpy as np
import torch

from .models import Camera


@dataclass
class TrainingView:
    """An observed view: RGB target plus optional pseudo-depth and part masks."""

    camera: Camera
    image: torch.Tensor
    pseudo_depth: torch.Tensor | None = None
    part_masks: torch.Tensor | None = None

    @property
    def view_id(self) -> int:
        return self.camera.id


class ViewProvider(Protocol):
    """Source of observations; only called for views that were selected."""

    def observe(self, cam: Camera) -> TrainingView: ...

    def scene_bounds(self) -> tuple[np.ndarray, np.ndarray]: ...
