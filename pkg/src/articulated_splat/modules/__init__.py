"""
Reconstruction stages for the articulated splat engine.
"""

from .articulation import apply_joint, assign_parts, backproject_part_probs, estimate_joints
from .coarse_trainer import CoarseTrainer, TrainingResult, train_coarse
from .meshing import TriangleMesh, TsdfVolume, extract_mesh, extract_part_meshes, tsdf_integrate
from .rasterizer import Rasterizer, RenderBuffers, gradcheck
from .refinement import RepairPipeline, generate_loo_pairs, make_oracle, refine
from .registration import register, sim3_apply
from .synthetic import SyntheticScene, synth_scene
from .view_planner import PlanResult, ViewPlanner, ifi, plan_views, select_next_view

__all__ = [
    "CoarseTrainer",
    "PlanResult",
    "Rasterizer",
    "RenderBuffers",
    "RepairPipeline",
    "SyntheticScene",
    "TrainingResult",
    "TriangleMesh",
    "TsdfVolume",
    "ViewPlanner",
    "apply_joint",
    "assign_parts",
    "backproject_part_probs",
    "estimate_joints",
    "extract_mesh",
    "extract_part_meshes",
    "generate_loo_pairs",
    "gradcheck",
    "ifi",
    "make_oracle",
    "plan_views",
    "refine",
    "register",
    "select_next_view",
    "sim3_apply",
    "synth_scene",
    "train_coarse",
    "tsdf_integrate",
]
