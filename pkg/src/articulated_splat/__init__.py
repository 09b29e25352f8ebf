"""
Articulated Splat Engine.

Sparse-view reconstruction of articulated desk-scale objects with planar
Gaussian splatting: information-field view planning, planar coarse
training, oracle-driven refinement, part segmentation, joint replay and
mesh extraction.
"""

from .core.config import PipelineConfig, load_config
from .core.errors import SplatEngineError, StageFailedError
from .core.gaussians import GaussianCloud
from .core.models import (
    ArticulatedTree,
    Camera,
    GaussianPrimitive,
    JointParams,
    JointType,
    Sim3Params,
    StageStatus,
    ViewPolicy,
)
from .engine import ReconstructionEngine, run_pipeline
from .modules.meshing import TriangleMesh
from .modules.rasterizer import Rasterizer
from .modules.synthetic import SyntheticScene, synth_scene
from .reporting.metrics import chamfer_f1, psnr_ssim
from .reporting.report import EvalReport, ReportBuilder, ReportFormatter

__version__ = "0.1.0"

__all__ = [
    # Main Engine
    "ReconstructionEngine",
    "run_pipeline",
    # Config
    "PipelineConfig",
    "load_config",
    # Models
    "ArticulatedTree",
    "Camera",
    "GaussianCloud",
    "GaussianPrimitive",
    "JointParams",
    "JointType",
    "Sim3Params",
    "StageStatus",
    "TriangleMesh",
    "ViewPolicy",
    # Rendering
    "Rasterizer",
    # Scenes
    "SyntheticScene",
    "synth_scene",
    # Reporting
    "EvalReport",
    "ReportBuilder",
    "ReportFormatter",
    "chamfer_f1",
    "psnr_ssim",
    # Errors
    "SplatEngineError",
    "StageFailedError",
]
