"""
Articulated Splat Engine - Streamlit Run Viewer.
Browse run manifests, stage status, evaluation reports, training curves
and ablation tables.

    streamlit run src/articulated_splat/dashboard.py -- runs/
"""

import sys
from pathlib import Path

import pandas as pd
import streamlit as st

from articulated_splat import StageStatus
from articulated_splat.core.errors import UsageError
from articulated_splat.reporting.report import ReportFormatter
from articulated_splat.reporting.runs import RunSummary, list_runs, load_ablations, load_run

# =============================================================================
# Page Configuration
# =============================================================================
st.set_page_config(
    page_title="Articulated Splat Runs",
    page_icon="🧩",
    layout="wide",
    initial_sidebar_state="expanded",
)

STATUS_COLORS = {
    StageStatus.COMPLETED.value: "🟢",
    StageStatus.FAILED.value: "🔴",
    StageStatus.SKIPPED.value: "⚪",
    StageStatus.PENDING.value: "🟡",
}


# =============================================================================
# Helper Functions
# =============================================================================
def metric_value(value: float, digits: int = 3) -> str:
    return "n/a" if pd.isna(value) else f"{value:.{digits}f}"


def render_run(run: RunSummary) -> None:
    st.header(run.run_id)
    st.caption(f"config {run.manifest.get('config_hash', '')[:12]}  ·  {run.path}")

    stages = run.stage_frame()
    if not stages.empty:
        stages.insert(0, "", stages["status"].map(STATUS_COLORS))
        st.dataframe(stages, use_container_width=True, hide_index=True)

    report = run.report
    if report is not None:
        kpi1, kpi2, kpi3, kpi4 = st.columns(4)
        kpi1.metric("PSNR (dB)", metric_value(report.psnr, 2))
        kpi2.metric("SSIM", metric_value(report.ssim))
        kpi3.metric("Chamfer x1000", metric_value(report.chamfer))
        kpi4.metric("F1", metric_value(report.f1))
        if report.parts:
            st.subheader("Parts")
            st.dataframe(
                pd.DataFrame([p.model_dump() for p in report.parts]),
                use_container_width=True,
                hide_index=True,
            )
        with st.expander("Full report", expanded=False):
            st.code(ReportFormatter(report).to_text(), language=None)

    for stage, log in run.logs.items():
        st.subheader(f"{stage.capitalize()} training loss")
        columns = [c for c in log.columns if c not in ("iteration", "view", "num_primitives")]
        st.line_chart(log.set_index("iteration")[columns] if "iteration" in log else log[columns])

    with st.expander("Manifest", expanded=False):
        st.json(run.manifest)


# =============================================================================
# Sidebar
# =============================================================================
default_root = sys.argv[1] if len(sys.argv) > 1 else "runs"
with st.sidebar:
    st.title("🧩 Runs")
    root = Path(st.text_input("Run root", value=default_root))
    runs = list_runs(root) if root.exists() else []
    choice = st.selectbox("Run", runs, format_func=lambda p: str(p.relative_to(root)))


# =============================================================================
# Main
# =============================================================================
if choice is None:
    st.info("No run directories found. Start one with `artsplat run --out runs/<name>`.")
else:
    try:
        render_run(load_run(choice))
    except UsageError as exc:
        st.error(str(exc))

tables = load_ablations(root) if root.exists() else {}
if tables:
    st.markdown("---")
    st.header("Ablations")
    for study, frame in tables.items():
        st.subheader(study)
        st.dataframe(frame, use_container_width=True, hide_index=True)
