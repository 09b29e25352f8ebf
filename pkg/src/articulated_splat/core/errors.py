"""
Exception hierarchy for the articulated splat engine.
"""

from collections import Counter
from typing import Any


class SplatEngineError(Exception):
    """Base class for every error raised by the engine."""


class GeometryValidationError(SplatEngineError, ValueError):
    """A geometric value object violates its invariants."""


class UsageError(SplatEngineError):
    """An operation was called with inconsistent inputs or in the wrong order."""


class ConfigurationError(SplatEngineError, ValueError):
    """Configuration is invalid or incompatible with the inputs."""


class PlannerExhaustedError(SplatEngineError):
    """No candidate views remain for selection."""


class RegistrationIllPosedError(SplatEngineError):
    """The source cloud cannot determine a similarity transform."""


class JointSchemaError(SplatEngineError, ValueError):
    """A joint-estimation client returned a payload that fails validation."""

    def __init__(self, message: str, raw_payload: Any = None) -> None:
        super().__init__(message)
        self.raw_payload = raw_payload


class TrainingDivergedError(SplatEngineError):
    """The optimization produced a non-finite loss."""

    def __init__(self, message: str, snapshot: dict[str, Any] | None = None) -> None:
        super().__init__(message)
        self.snapshot = snapshot or {}


class RepairFailedError(SplatEngineError):
    """A single repair request produced no usable image."""


class OracleAbortError(SplatEngineError):
    """The repair oracle failed too many times in a row."""


class StageFailedError(SplatEngineError):
    """A pipeline stage failed; downstream stages are skipped."""

    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class WarningCounter(Counter[str]):
    """Named counters for non-fatal conditions that are also logged."""

    def bump(self, name: str, amount: int = 1) -> None:
        self[name] += amount
