"""
Tests for evaluation reports and run loading.
"""

import json
import math
from pathlib import Path

import pandas as pd
import pytest

from articulated_splat import EvalReport, ReportBuilder, ReportFormatter, StageStatus
from articulated_splat.core.errors import UsageError
from articulated_splat.reporting.report import reports_to_frame
from articulated_splat.reporting.runs import list_runs, load_ablations, load_run
from articulated_splat.utils.io import write_json


@pytest.fixture
def builder() -> ReportBuilder:
    """Builder for a two-part run with one failed stage."""
    builder = ReportBuilder("hinge-optimal-k3-s7", "hinge", 7, "ab" * 32, "optimal", 3)
    builder.set_views([0, 5, 9])
    builder.set_image_metrics(math.inf, 0.91)
    builder.set_mesh_metrics(1.5, 0.8)
    builder.add_part("base", False, 1.0, 0.9)
    builder.add_part("lid", True, 3.0, 0.6)
    builder.add_assignment_accuracy(0.5, 0.95)
    builder.add_stage("coarse", StageStatus.COMPLETED, 12.5)
    builder.add_stage("refine", StageStatus.FAILED, 0.4, "oracle unavailable")
    builder.add_warnings({"joint_clamped": 1})
    builder.add_warnings({"joint_clamped": 2})
    return builder


class TestEvalReport:
    """Tests for EvalReport and ReportBuilder."""

    def test_part_averages(self, builder: ReportBuilder) -> None:
        """Test dynamic and static Chamfer split."""
        report = builder.build()
        assert report.chamfer_dynamic == 3.0
        assert report.chamfer_static == 1.0

    def test_completed_flag(self, builder: ReportBuilder) -> None:
        """Test a failed stage marks the run incomplete."""
        assert not builder.build().completed
        empty = EvalReport(
            run_id="r", fixture="plane", seed=0, config_hash="", policy="random", num_views=1
        )
        assert empty.completed
        assert math.isnan(empty.chamfer_dynamic)

    def test_warnings_accumulate(self, builder: ReportBuilder) -> None:
        """Test repeated warning counts add up."""
        assert builder.build().warnings == {"joint_clamped": 3}


class TestReportFormatter:
    """Tests for ReportFormatter."""

    def test_text(self, builder: ReportBuilder) -> None:
        """Test the text report lists metrics, parts and stages."""
        text = builder.get_formatter().to_text()
        assert "RECONSTRUCTION EVALUATION REPORT" in text
        assert "Novel-view PSNR: >99 dB" in text
        assert "lid" in text and "dynamic" in text
        assert "oracle unavailable" in text
        assert "Warnings: joint_clamped=3" in text
        assert "PARTS" not in builder.get_formatter().to_text(include_details=False)

    def test_json_is_finite(self, builder: ReportBuilder) -> None:
        """Test infinities are capped so the JSON is strict."""
        data = json.loads(builder.get_formatter(psnr_cap=50.0).to_json())
        assert data["psnr"] == 50.0
        assert data["chamfer_dynamic"] == 3.0
        assert data["runtimes"]["coarse"] == 12.5

    def test_row_is_deterministic(self, builder: ReportBuilder) -> None:
        """Test the CSV row omits runtimes and flattens parts and accuracies."""
        row = builder.get_formatter().to_row()
        assert row["psnr"] == 99.0
        assert row["selected_views"] == "0 5 9"
        assert row["chamfer_lid"] == 3.0
        assert row["accuracy_tau_0.5"] == 0.95
        assert not any("seconds" in key or "runtime" in key for key in row)

    def test_write_csv(self, builder: ReportBuilder, tmp_path: Path) -> None:
        """Test one CSV row is written."""
        path = tmp_path / "nested" / "report.csv"
        ReportFormatter(builder.build()).write_csv(path)
        frame = pd.read_csv(path)
        assert len(frame) == 1
        assert frame.loc[0, "run_id"] == "hinge-optimal-k3-s7"

    def test_reports_to_frame_unions_columns(self, builder: ReportBuilder) -> None:
        """Test reports with different parts share one table."""
        plain = EvalReport(
            run_id="p", fixture="plane", seed=1, config_hash="", policy="random", num_views=2
        )
        frame = reports_to_frame([builder.build(), plain])
        assert len(frame) == 2
        assert "chamfer_lid" in frame.columns
        assert pd.isna(frame.loc[1, "chamfer_lid"])


class TestRuns:
    """Tests for loading run directories."""

    def test_load_run(self, builder: ReportBuilder, tmp_path: Path) -> None:
        """Test manifest, report and logs are read back."""
        run = tmp_path / "hinge"
        write_json(run / "manifest.json", {"run_id": "hinge-1", "stages": [{"name": "coarse"}]})
        write_json(run / "report.json", builder.get_formatter().to_dict())
        (run / "coarse").mkdir()
        pd.DataFrame({"iteration": [0, 1], "total": [0.5, 0.4]}).to_csv(
            run / "coarse" / "log.csv", index=False
        )
        summary = load_run(run)
        assert summary.run_id == "hinge-1"
        assert summary.report is not None
        assert summary.report.selected_views == [0, 5, 9]
        assert list(summary.logs) == ["coarse"]
        assert list(summary.stage_frame()["name"]) == ["coarse"]

    def test_not_a_run(self, tmp_path: Path) -> None:
        """Test directories without a manifest are rejected."""
        with pytest.raises(UsageError):
            load_run(tmp_path)

    def test_list_runs_and_ablations(self, tmp_path: Path) -> None:
        """Test nested run discovery and study tables."""
        write_json(tmp_path / "policy" / "random-s1" / "manifest.json", {})
        write_json(tmp_path / "policy" / "optimal-s1" / "manifest.json", {})
        pd.DataFrame({"variant": ["optimal"]}).to_csv(tmp_path / "policy.csv", index=False)
        assert [p.name for p in list_runs(tmp_path)] == ["optimal-s1", "random-s1"]
        assert list(load_ablations(tmp_path)) == ["policy"]
