"""
Reporting modules for the articulated splat engine.
"""

from .metrics import ChamferResult, chamfer_f1, psnr_ssim
from .report import EvalReport, ReportBuilder, ReportFormatter, reports_to_frame
from .runs import RunSummary, load_run

__all__ = [
    "ChamferResult",
    "EvalReport",
    "ReportBuilder",
    "ReportFormatter",
    "RunSummary",
    "chamfer_f1",
    "load_run",
    "psnr_ssim",
    "reports_to_frame",
]
