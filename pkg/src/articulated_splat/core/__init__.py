"""
Core components for the articulated splat engine.
"""

from .config import (
    ArticulationConfig,
    CoarseConfig,
    EvalConfig,
    MeshConfig,
    PipelineConfig,
    PlannerConfig,
    RasterConfig,
    RefineConfig,
    RegistrationConfig,
    apply_overrides,
    load_config,
)
from .errors import (
    ConfigurationError,
    GeometryValidationError,
    JointSchemaError,
    OracleAbortError,
    PlannerExhaustedError,
    RegistrationIllPosedError,
    RepairFailedError,
    SplatEngineError,
    StageFailedError,
    TrainingDivergedError,
    UsageError,
    WarningCounter,
)
from .gaussians import GaussianCloud
from .loss_registry import LossBreakdown, LossContext, LossRegistry, LossStage, LossTerm
from .models import (
    ArticulatedTree,
    Camera,
    GaussianPrimitive,
    JointParams,
    JointSpec,
    JointType,
    PartNode,
    PoseRegion,
    PyramidLevel,
    PyramidSchedule,
    Sim3Params,
    StageStatus,
    ViewPolicy,
)
from .views import TrainingView, ViewProvider

__all__ = [
    # Config
    "ArticulationConfig",
    "CoarseConfig",
    "EvalConfig",
    "MeshConfig",
    "PipelineConfig",
    "PlannerConfig",
    "RasterConfig",
    "RefineConfig",
    "RegistrationConfig",
    "apply_overrides",
    "load_config",
    # Errors
    "ConfigurationError",
    "GeometryValidationError",
    "JointSchemaError",
    "OracleAbortError",
    "PlannerExhaustedError",
    "RegistrationIllPosedError",
    "RepairFailedError",
    "SplatEngineError",
    "StageFailedError",
    "TrainingDivergedError",
    "UsageError",
    "WarningCounter",
    # Gaussians
    "GaussianCloud",
    # Loss Registry
    "LossBreakdown",
    "LossContext",
    "LossRegistry",
    "LossStage",
    "LossTerm",
    # Models
    "ArticulatedTree",
    "Camera",
    "GaussianPrimitive",
    "JointParams",
    "JointSpec",
    "JointType",
    "PartNode",
    "PoseRegion",
    "PyramidLevel",
    "PyramidSchedule",
    "Sim3Params",
    "StageStatus",
    "ViewPolicy",
    # Views
    "TrainingView",
    "ViewProvider",
]
