"""
Evaluation report for one pipeline run.
Builds EvalReport records and formats them as text, dict, JSON or CSV.
"""

import json
import math
from pathlib import Path
from typing import Any

import pandas as pd
from pydantic import BaseModel, Field

from ..core.models import StageStatus


class PartMetric(BaseModel):
    """Mesh accuracy for one part."""

    part: str
    dynamic: bool
    chamfer: float
    f1: float


class StageRecord(BaseModel):
    """Outcome of one pipeline stage."""

    name: str
    status: StageStatus
    seconds: float = 0.0
    message: str = ""


class EvalReport(BaseModel):
    """Metrics of one run: novel-view image quality, mesh accuracy, segmentation accuracy."""

    run_id: str
    fixture: str
    seed: int
    config_hash: str
    policy: str
    num_views: int
    selected_views: list[int] = Field(default_factory=list)
    psnr: float = math.nan
    ssim: float = math.nan
    chamfer: float = math.nan
    f1: float = math.nan
    parts: list[PartMetric] = Field(default_factory=list)
    assignment_accuracy: dict[str, float] = Field(default_factory=dict)
    stages: list[StageRecord] = Field(default_factory=list)
    runtimes: dict[str, float] = Field(default_factory=dict)
    warnings: dict[str, int] = Field(default_factory=dict)

    @property
    def chamfer_dynamic(self) -> float:
        values = [p.chamfer for p in self.parts if p.dynamic]
        return sum(values) / len(values) if values else math.nan

    @property
    def chamfer_static(self) -> float:
        values = [p.chamfer for p in self.parts if not p.dynamic]
        return sum(values) / len(values) if values else math.nan

    @property
    def completed(self) -> bool:
        return not any(s.status == StageStatus.FAILED for s in self.stages)


class ReportFormatter:
    """
    Formats evaluation reports for various output formats.

    Runtimes appear in the text and JSON forms only; the CSV row holds
    deterministic quantities so reruns of a manifest compare byte for byte.
    """

    STATUS_ICONS = {
        StageStatus.COMPLETED: "✅",
        StageStatus.FAILED: "❌",
        StageStatus.SKIPPED: "⏭️",
        StageStatus.PENDING: "•",
    }

    def __init__(self, report: EvalReport, psnr_cap: float = 99.0) -> None:
        self.report = report
        self.psnr_cap = psnr_cap

    def to_text(self, include_details: bool = True) -> str:
        r = self.report
        lines: list[str] = []
        lines.append("=" * 70)
        lines.append("RECONSTRUCTION EVALUATION REPORT")
        lines.append("=" * 70)
        lines.append("")
        lines.append(f"Run: {r.run_id}")
        lines.append(f"Fixture: {r.fixture}   Seed: {r.seed}   Config: {r.config_hash[:12]}")
        lines.append(f"Policy: {r.policy}   Views: {r.num_views} {r.selected_views}")
        lines.append("")

        lines.append("-" * 70)
        lines.append("METRICS")
        lines.append("-" * 70)
        lines.append(f"Novel-view PSNR: {self._fmt(r.psnr, cap=True)} dB")
        lines.append(f"Novel-view SSIM: {self._fmt(r.ssim)}")
        lines.append(f"Chamfer (x1000): {self._fmt(r.chamfer)}")
        lines.append(f"F1: {self._fmt(r.f1)}")
        if r.parts:
            lines.append(f"CD dynamic: {self._fmt(r.chamfer_dynamic)}")
            lines.append(f"CD static: {self._fmt(r.chamfer_static)}")
        for tau, accuracy in sorted(r.assignment_accuracy.items()):
            lines.append(f"Part accuracy @ tau={tau}: {accuracy:.3f}")
        lines.append("")

        if include_details:
            if r.parts:
                lines.append("-" * 70)
                lines.append("PARTS")
                lines.append("-" * 70)
                for part in r.parts:
                    kind = "dynamic" if part.dynamic else "static"
                    lines.append(
                        f"  {part.part:<16} {kind:<8} "
                        f"CD {self._fmt(part.chamfer)}  F1 {self._fmt(part.f1)}"
                    )
                lines.append("")
            lines.append("-" * 70)
            lines.append("STAGES")
            lines.append("-" * 70)
            for stage in r.stages:
                icon = self.STATUS_ICONS.get(stage.status, "•")
                line = f"{icon} {stage.name:<12} {stage.status.value:<10} {stage.seconds:8.1f}s"
                if stage.message:
                    line += f"  {stage.message}"
                lines.append(line)
            if r.warnings:
                lines.append("")
                counts = ", ".join(f"{k}={v}" for k, v in sorted(r.warnings.items()))
                lines.append(f"Warnings: {counts}")
            lines.append("")

        lines.append("=" * 70)
        lines.append("END OF REPORT")
        lines.append("=" * 70)
        return "\n".join(lines)

    def _fmt(self, value: float, cap: bool = False) -> str:
        if math.isnan(value):
            return "n/a"
        if cap and (math.isinf(value) or value > self.psnr_cap):
            return f">{self.psnr_cap:.0f}"
        return "inf" if math.isinf(value) else f"{value:.4f}"

    def to_dict(self) -> dict[str, Any]:
        data = self.report.model_dump(mode="json")
        data["chamfer_dynamic"] = self.report.chamfer_dynamic
        data["chamfer_static"] = self.report.chamfer_static
        return _finite(data, self.psnr_cap)

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def to_row(self) -> dict[str, Any]:
        """Flat CSV row; infinite values are replaced by the cap."""
        r = self.report
        row: dict[str, Any] = {
            "run_id": r.run_id,
            "fixture": r.fixture,
            "seed": r.seed,
            "config_hash": r.config_hash,
            "policy": r.policy,
            "num_views": r.num_views,
            "selected_views": " ".join(str(v) for v in r.selected_views),
            "psnr": r.psnr,
            "ssim": r.ssim,
            "chamfer": r.chamfer,
            "f1": r.f1,
            "chamfer_dynamic": r.chamfer_dynamic,
            "chamfer_static": r.chamfer_static,
            "completed": r.completed,
        }
        for part in r.parts:
            row[f"chamfer_{part.part}"] = part.chamfer
        for tau, accuracy in sorted(r.assignment_accuracy.items()):
            row[f"accuracy_tau_{tau}"] = accuracy
        return _finite(row, self.psnr_cap)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([self.to_row()])

    def write_csv(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)

    def print_summary(self) -> None:
        """Print a brief summary to stdout."""
        print(self.to_text(include_details=False))

    def print_full(self) -> None:
        """Print the full report to stdout."""
        print(self.to_text(include_details=True))


def _finite(data: Any, cap: float) -> Any:
    if isinstance(data, dict):
        return {k: _finite(v, cap) for k, v in data.items()}
    if isinstance(data, list):
        return [_finite(v, cap) for v in data]
    if isinstance(data, float) and math.isinf(data):
        return cap if data > 0 else -cap
    return data


class ReportBuilder:
    """
    Builder for constructing evaluation reports.
    """

    def __init__(
        self,
        run_id: str,
        fixture: str,
        seed: int,
        config_hash: str,
        policy: str,
        num_views: int,
    ) -> None:
        self.report = EvalReport(
            run_id=run_id,
            fixture=fixture,
            seed=seed,
            config_hash=config_hash,
            policy=policy,
            num_views=num_views,
        )

    def set_views(self, selected: list[int]) -> "ReportBuilder":
        self.report.selected_views = list(selected)
        return self

    def set_image_metrics(self, psnr: float, ssim: float) -> "ReportBuilder":
        self.report.psnr = psnr
        self.report.ssim = ssim
        return self

    def set_mesh_metrics(self, chamfer: float, f1: float) -> "ReportBuilder":
        self.report.chamfer = chamfer
        self.report.f1 = f1
        return self

    def add_part(self, part: str, dynamic: bool, chamfer: float, f1: float) -> "ReportBuilder":
        self.report.parts.append(PartMetric(part=part, dynamic=dynamic, chamfer=chamfer, f1=f1))
        return self

    def add_assignment_accuracy(self, tau: float, accuracy: float) -> "ReportBuilder":
        self.report.assignment_accuracy[f"{tau:g}"] = accuracy
        return self

    def add_stage(
        self, name: str, status: StageStatus, seconds: float = 0.0, message: str = ""
    ) -> "ReportBuilder":
        self.report.stages.append(
            StageRecord(name=name, status=status, seconds=seconds, message=message)
        )
        self.report.runtimes[name] = seconds
        return self

    def add_warnings(self, counts: dict[str, int]) -> "ReportBuilder":
        for name, count in counts.items():
            self.report.warnings[name] = self.report.warnings.get(name, 0) + int(count)
        return self

    def build(self) -> EvalReport:
        return self.report

    def get_formatter(self, psnr_cap: float = 99.0) -> ReportFormatter:
        return ReportFormatter(self.build(), psnr_cap)


def reports_to_frame(reports: list[EvalReport], psnr_cap: float = 99.0) -> pd.DataFrame:
    """One CSV row per report, columns unioned."""
    return pd.DataFrame([ReportFormatter(r, psnr_cap).to_row() for r in reports])
