"""
Loading helpers for run directories written by the engine.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import pandas as pd

from ..core.errors import UsageError
from .report import EvalReport


@dataclass
class RunSummary:
    """Manifest, report and logs of one run directory."""

    path: Path
    manifest: dict[str, Any]
    report: EvalReport | None = None
    logs: dict[str, pd.DataFrame] = field(default_factory=dict)

    @property
    def run_id(self) -> str:
        return str(self.manifest.get("run_id", self.path.name))

    def stage_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.manifest.get("stages", []))


def load_run(path: str | Path) -> RunSummary:
    """
    Read ``manifest.json``, ``report.json`` and the training logs of a run.

    Raises:
        UsageError: the directory has no manifest
    """
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise UsageError(f"{root} is not a run directory (no manifest.json)")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    report = None
    report_path = root / "report.json"
    if report_path.exists():
        data = json.loads(report_path.read_text(encoding="utf-8"))
        data.pop("chamfer_dynamic", None)
        data.pop("chamfer_static", None)
        report = EvalReport.model_validate(data)
    logs = {
        stage: pd.read_csv(root / stage / "log.csv")
        for stage in ("coarse", "refine")
        if (root / stage / "log.csv").exists()
    }
    return RunSummary(path=root, manifest=manifest, report=report, logs=logs)


def list_runs(root: str | Path) -> list[Path]:
    """Run directories below ``root`` (any depth), sorted."""
    return sorted(p.parent for p in Path(root).rglob("manifest.json"))


def load_ablations(root: str | Path) -> dict[str, pd.DataFrame]:
    """Study name -> ablation table for every ``<study>.csv`` in ``root``."""
    studies = ("policy", "views", "components")
    return {
        study: pd.read_csv(Path(root) / f"{study}.csv")
        for study in studies
        if (Path(root) / f"{study}.csv").exists()
    }
