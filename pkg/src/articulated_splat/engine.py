"""
Articulated Splat Engine - Main Orchestrator.
Runs view planning, registration, coarse training, refinement, part
segmentation, meshing and evaluation on a synthetic fixture.
"""

import logging
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import torch
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .core.config import PipelineConfig, apply_overrides
from .core.errors import (
    ConfigurationError,
    SplatEngineError,
    StageFailedError,
    WarningCounter,
)
from .core.gaussians import GaussianCloud
from .core.models import Camera, Sim3Params, StageStatus, ViewPolicy
from .core.views import TrainingView
from .modules.articulation import (
    JointClient,
    apply_joint,
    assign_parts,
    assignment_accuracy,
    attach_unassigned,
    backproject_part_probs,
    estimate_joints,
    make_joint_client,
    moving_parts,
    render_connecting_regions,
    save_tree,
)
from .modules.coarse_trainer import CoarseTrainer, TrainingResult
from .modules.meshing import TriangleMesh, extract_cloud_mesh, extract_part_meshes
from .modules.rasterizer import Rasterizer
from .modules.refinement import RepairOracle, make_oracle, refine
from .modules.registration import RegistrationResult, register, sim3_apply
from .modules.synthetic import SyntheticScene, synth_scene
from .modules.view_planner import PlanResult, ViewPlanner
from .reporting.metrics import chamfer_f1, psnr_ssim
from .reporting.report import EvalReport, ReportBuilder, reports_to_frame
from .utils.io import save_cameras, save_mesh_ply, save_meshes_obj, write_json
from .utils.seeding import manifest_seeds, numpy_rng

logger = logging.getLogger(__name__)

STAGES = ("plan-views", "register", "coarse", "refine", "segment", "mesh", "eval")
VIEW_SWEEP = (2, 3, 4, 8, 16)
COMPONENT_VARIANTS: dict[str, dict[str, Any]] = {
    "full": {},
    "no_planar": {"use_planar": False},
    "no_refinement": {"use_refinement": False},
    "no_view_consistency": {"use_view_consistency": False},
    "with_registration": {"use_registration": True},
}
# Structured-cloud size for the registration stage.
REGISTRATION_POINTS = 1000
# Stage errors that are recorded in the manifest instead of propagating.
RECOVERABLE_ERRORS = (SplatEngineError, RuntimeError, ValueError, OSError)


@dataclass
class PipelineState:
    """Intermediate results handed from stage to stage."""

    scene: SyntheticScene
    plan: PlanResult | None = None
    registration: RegistrationResult | None = None
    coarse: TrainingResult | None = None
    cloud: GaussianCloud | None = None
    labels: np.ndarray | None = None
    mesh: TriangleMesh | None = None
    part_meshes: dict[int, TriangleMesh] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)

    def require_cloud(self) -> GaussianCloud:
        if self.cloud is None:
            raise StageFailedError("state", RuntimeError("no cloud has been produced yet"))
        return self.cloud


class ReconstructionEngine:
    """
    Main orchestrator for sparse-view articulated reconstruction.

    Stages run sequentially; a failed stage is recorded and every later
    stage is skipped. Every random choice derives from ``config.seed``.

    Example:
        engine = ReconstructionEngine(PipelineConfig(fixture="hinge"))
        report = engine.configure(num_views=3).run("runs/hinge-k3")
    """

    def __init__(
        self,
        config: PipelineConfig | None = None,
        scene: SyntheticScene | None = None,
        oracle: RepairOracle | None = None,
        joint_client: JointClient | None = None,
    ) -> None:
        """
        Initialize the engine.

        Args:
            config: pipeline configuration
            scene: fixture to reconstruct; built from the config when omitted
            oracle: repair oracle; built from ``config.refine.oracle`` when omitted
            joint_client: joint estimator; built from ``config.articulation`` when omitted
        """
        self.config = config or PipelineConfig()
        self.warnings = WarningCounter()
        self.last_error: StageFailedError | None = None

        # Built lazily
        self._scene = scene
        self._oracle = oracle
        self._joint_client = joint_client
        self._rasterizer: Rasterizer | None = None

    @property
    def scene(self) -> SyntheticScene:
        """Get or create the synthetic fixture."""
        if self._scene is None:
            self._scene = synth_scene(
                self.config.fixture,
                seed=self.config.seed,
                resolution=self.config.resolution,
                num_candidates=self.config.num_candidates,
                pseudo_depth_noise=self.config.pseudo_depth_noise,
            )
        return self._scene

    @property
    def rasterizer(self) -> Rasterizer:
        """Get or create the shared rasterizer."""
        if self._rasterizer is None:
            self._rasterizer = Rasterizer(self.config.raster)
        return self._rasterizer

    @property
    def oracle(self) -> RepairOracle:
        """Get or create the repair oracle."""
        if self._oracle is None:
            self._oracle = make_oracle(self.config.refine.oracle, self.scene, self.config.refine)
        return self._oracle

    @property
    def joint_client(self) -> JointClient:
        """Get or create the joint-estimation client."""
        if self._joint_client is None:
            self._joint_client = make_joint_client(self.config.articulation, self.scene.tree)
        return self._joint_client

    def configure(self, **overrides: Any) -> "ReconstructionEngine":
        """
        Apply dotted-path config overrides, e.g. ``configure(**{"coarse.iterations": 500})``.

        Fixture-level changes drop the cached scene and oracle.

        Returns:
            Self for method chaining
        """
        self.config = apply_overrides(self.config, overrides)
        scene_keys = {"fixture", "seed", "resolution", "num_candidates", "pseudo_depth_noise"}
        if scene_keys & {k for k, v in overrides.items() if v is not None}:
            self._scene = None
            self._oracle = None
            self._joint_client = None
        self._rasterizer = None
        return self

    def run_id(self) -> str:
        cfg = self.config
        return f"{cfg.fixture}-{cfg.policy.value}-k{cfg.num_views}-s{cfg.seed}"

    # -------------------------------------------------------------------------
    # Stages
    # -------------------------------------------------------------------------

    def plan_views(self, state: PipelineState) -> None:
        cfg = self.config
        planner = ViewPlanner(cfg.planner, cfg.raster, cfg.effective_coarse(), seed=cfg.seed)
        plan = planner.plan(
            state.scene.candidates,
            cfg.num_views,
            state.scene,
            policy=cfg.policy,
            part_count=state.scene.part_count,
        )
        state.plan = plan
        state.cloud = plan.cloud

    def register_structured(self, state: PipelineState) -> None:
        """
        Align a structured cloud, known only up to a similarity transform, to
        the planner cloud and add it to the initialization.

        The structured cloud is sampled from the fixture's surface and moved
        by a seeded random sim3.
        """
        cloud = state.require_cloud()
        opaque = cloud.opacities.detach().cpu().numpy() >= 0.05
        target = cloud.centers()[opaque] if opaque.sum() >= 4 else cloud.centers()
        rng = numpy_rng(self.config.seed, "registration-frame")
        surface = state.scene.ground_truth_mesh().sample(REGISTRATION_POINTS, rng)
        hidden = Sim3Params.from_components(
            Rotation.random(random_state=rng).as_matrix(),
            rng.normal(scale=0.1 * state.scene.extent, size=3),
            float(np.exp(rng.uniform(-0.3, 0.3))),
        )
        source = sim3_apply(hidden, surface)
        result = register(source, target, self.config.registration.schedule(), self.config.seed)
        aligned = sim3_apply(result.transform, source)
        _, nearest = cKDTree(cloud.centers()).query(aligned)
        colors = cloud.colors.detach().cpu().numpy()[nearest]
        spacing = max(state.scene.extent / np.sqrt(REGISTRATION_POINTS), 1e-3)
        addition = GaussianCloud.from_points(
            aligned,
            colors,
            scale=0.5 * spacing,
            part_count=cloud.part_count,
            dtype=cloud.dtype,
        )
        state.registration = result
        state.cloud = cloud.concat(addition)

    def train_coarse(self, state: PipelineState) -> None:
        assert state.plan is not None
        cfg = self.config
        trainer = CoarseTrainer(cfg.effective_coarse(), cfg.raster, cfg.seed)
        state.coarse = trainer.train(state.require_cloud(), state.plan.views)
        self.warnings.update(state.coarse.warnings)
        state.cloud = state.coarse.cloud

    def refine_cloud(self, state: PipelineState) -> None:
        assert state.plan is not None and state.coarse is not None
        result = refine(
            state.require_cloud(),
            state.plan.views,
            self.oracle,
            self.config.effective_refine(),
            self.config.effective_coarse(),
            self.config.raster,
            seed=self.config.seed,
            correction=state.coarse.correction,
        )
        self.warnings.update(result.warnings)
        state.cloud = result.cloud

    def mask_cameras(self, state: PipelineState) -> list[Camera]:
        """Selected views first, then further candidates in id order."""
        selected = list(state.plan.selected) if state.plan is not None else []
        by_id = {cam.id: cam for cam in state.scene.candidates}
        order = selected + [i for i in sorted(by_id) if i not in selected]
        return [by_id[i] for i in order[: self.config.articulation.num_mask_views]]

    def segment(self, state: PipelineState) -> None:
        cams = self.mask_cameras(state)
        masks = [torch.as_tensor(state.scene.part_masks(cam)) for cam in cams]
        cloud = backproject_part_probs(state.require_cloud(), cams, masks, self.rasterizer)
        labels = assign_parts(cloud, self.config.articulation.tau)
        if self.config.articulation.attach_unassigned:
            labels = attach_unassigned(cloud, labels)
        state.cloud = cloud
        state.labels = labels

    def mesh(self, state: PipelineState) -> None:
        cloud = state.require_cloud()
        state.mesh = extract_cloud_mesh(
            cloud,
            self.config.mesh,
            self.config.raster,
            seed=self.config.seed,
            warnings=self.warnings,
        )
        if state.labels is not None:
            state.part_meshes = extract_part_meshes(
                cloud,
                state.labels,
                self.config.mesh,
                self.config.raster,
                seed=self.config.seed,
                warnings=self.warnings,
            )

    def evaluate(self, state: PipelineState, builder: ReportBuilder) -> None:
        cfg = self.config
        cloud = state.require_cloud()
        scene = state.scene
        psnrs, ssims = [], []
        with torch.no_grad():
            for cam in scene.heldout_cameras(cfg.eval.heldout_views):
                render = self.rasterizer.render(cloud, cam).color
                psnr, ssim = psnr_ssim(render, scene.render(cam).rgb)
                psnrs.append(psnr)
                ssims.append(ssim)
        builder.set_image_metrics(float(np.mean(psnrs)), float(np.mean(ssims)))

        if state.mesh is not None:
            whole = chamfer_f1(
                state.mesh,
                scene.ground_truth_mesh(),
                cfg.eval.chamfer_samples,
                f1_fraction=cfg.eval.f1_fraction,
                seed=cfg.seed,
            )
            builder.set_mesh_metrics(whole.chamfer, whole.f1)
        truth_meshes = scene.ground_truth_meshes()
        dynamic = set(scene.moving_parts)
        for index, mesh in sorted(state.part_meshes.items()):
            name = scene.tree.part_names[index]
            result = chamfer_f1(
                mesh,
                truth_meshes[index],
                cfg.eval.chamfer_samples,
                f1_fraction=cfg.eval.f1_fraction,
                seed=cfg.seed,
            )
            builder.add_part(name, name in dynamic, result.chamfer, result.f1)

        if scene.part_count > 1:
            truth = scene.label_points(cloud.centers())
            for tau in cfg.eval.tau_sweep:
                labels = assign_parts(cloud, tau)
                builder.add_assignment_accuracy(tau, assignment_accuracy(labels, truth))

    # -------------------------------------------------------------------------
    # Orchestration
    # -------------------------------------------------------------------------

    def _stage_plan(self, state: PipelineState) -> list[tuple[str, bool, Callable[..., None]]]:
        cfg = self.config
        return [
            ("plan-views", True, self.plan_views),
            ("register", cfg.use_registration, self.register_structured),
            ("coarse", True, self.train_coarse),
            ("refine", cfg.use_refinement, self.refine_cloud),
            ("segment", True, self.segment),
            ("mesh", True, self.mesh),
        ]

    def run(self, out_dir: str | Path | None = None) -> EvalReport:
        """
        Execute every stage and write artifacts, the manifest and the report.

        Args:
            out_dir: run directory; defaults to ``config.output_dir``

        Returns:
            EvalReport; failed and skipped stages are listed in ``stages``
        """
        cfg = self.config
        root = Path(out_dir or cfg.output_dir)
        root.mkdir(parents=True, exist_ok=True)
        self.warnings = WarningCounter()
        self.last_error = None
        state = PipelineState(scene=self.scene)
        builder = ReportBuilder(
            self.run_id(), cfg.fixture, cfg.seed, cfg.config_hash(), cfg.policy.value, cfg.num_views
        )
        write_json(root / "scene.json", state.scene.to_json_dict())
        save_cameras(root / "cameras.json", state.scene.candidates)

        failed = False
        stages = self._stage_plan(state) + [
            ("eval", True, lambda s: self.evaluate(s, builder))
        ]
        for name, enabled, action in stages:
            if failed or not enabled:
                reason = "upstream failure" if failed else "disabled"
                builder.add_stage(name, StageStatus.SKIPPED, message=reason)
                logger.info("stage %s skipped (%s)", name, reason)
                continue
            logger.info("stage %s started", name)
            started = time.perf_counter()
            try:
                action(state)
            except RECOVERABLE_ERRORS as exc:
                elapsed = time.perf_counter() - started
                self.last_error = StageFailedError(name, exc)
                builder.add_stage(name, StageStatus.FAILED, elapsed, str(exc))
                logger.error("stage %s failed: %s", name, exc)
                failed = True
                continue
            elapsed = time.perf_counter() - started
            builder.add_stage(name, StageStatus.COMPLETED, elapsed)
            self.write_artifacts(name, state, root)
            logger.info("stage %s completed in %.1fs", name, elapsed)

        if state.plan is not None:
            builder.set_views(state.plan.selected)
        builder.add_warnings(dict(self.warnings))
        report = builder.build()
        formatter = builder.get_formatter(cfg.eval.psnr_cap)
        (root / "report.json").write_text(formatter.to_json(), encoding="utf-8")
        (root / "report.txt").write_text(formatter.to_text(), encoding="utf-8")
        formatter.write_csv(root / "report.csv")
        self._write_manifest(root, report, state)
        return report

    def write_artifacts(self, stage: str, state: PipelineState, root: Path) -> None:
        if stage == "plan-views" and state.plan is not None:
            write_json(root / "plan.json", state.plan.to_json_dict())
            state.artifacts["plan"] = "plan.json"
        elif stage == "register" and state.registration is not None:
            write_json(root / "registration" / "transform.json", state.registration.to_json_dict())
            state.artifacts["registration"] = "registration/transform.json"
        elif stage == "coarse" and state.coarse is not None:
            state.coarse.cloud.save_ply(root / "coarse" / "cloud.ply")
            state.coarse.save_log(root / "coarse" / "log.csv")
            if state.coarse.correction is not None:
                write_json(
                    root / "coarse" / "depth_correction.json", state.coarse.correction.summary()
                )
            state.artifacts["coarse"] = "coarse/cloud.ply"
        elif stage == "refine" and state.cloud is not None:
            state.cloud.save_ply(root / "refine" / "cloud.ply")
            state.artifacts["refine"] = "refine/cloud.ply"
        elif stage == "segment" and state.labels is not None and state.cloud is not None:
            state.cloud.save_ply(root / "segment" / "cloud.ply")
            write_json(root / "segment" / "labels.json", state.labels.tolist())
            state.artifacts["segment"] = "segment/labels.json"
        elif stage == "mesh" and state.mesh is not None:
            save_mesh_ply(root / "mesh" / "mesh.ply", state.mesh)
            if state.part_meshes:
                names = state.scene.tree.part_names
                indices = sorted(state.part_meshes)
                save_meshes_obj(
                    root / "mesh" / "parts.obj",
                    [state.part_meshes[i] for i in indices],
                    [names[i] for i in indices],
                )
            state.artifacts["mesh"] = "mesh/mesh.ply"

    def _write_manifest(self, root: Path, report: EvalReport, state: PipelineState) -> None:
        cfg = self.config
        write_json(
            root / "manifest.json",
            {
                "run_id": report.run_id,
                "config_hash": report.config_hash,
                "config": cfg.model_dump(mode="json"),
                "seed": cfg.seed,
                "seeds": manifest_seeds(cfg.seed),
                "stages": [s.model_dump(mode="json") for s in report.stages],
                "completed": report.completed,
                "artifacts": state.artifacts,
                "warnings": dict(self.warnings),
            },
        )

    # -------------------------------------------------------------------------
    # Single-stage entry points
    # -------------------------------------------------------------------------

    def views_for(self, view_ids: list[int]) -> list[TrainingView]:
        """Observe the given candidate ids in order."""
        by_id = {cam.id: cam for cam in self.scene.candidates}
        missing = [i for i in view_ids if i not in by_id]
        if missing:
            raise ConfigurationError(f"unknown candidate ids {missing}")
        return [self.scene.observe(by_id[i]) for i in view_ids]

    def evaluate_cloud(
        self,
        cloud: GaussianCloud,
        labels: np.ndarray | None = None,
        selected: list[int] | None = None,
        out_dir: str | Path | None = None,
    ) -> EvalReport:
        """
        Mesh and evaluate an already trained cloud.

        Args:
            cloud: trained cloud (with part probabilities for the tau sweep)
            labels: part index per primitive; enables per-part meshes
            selected: training view ids recorded in the report
            out_dir: where mesh artifacts and the report are written

        Returns:
            EvalReport with the mesh and eval stages
        """
        cfg = self.config
        state = PipelineState(scene=self.scene, cloud=cloud, labels=labels)
        builder = ReportBuilder(
            self.run_id(), cfg.fixture, cfg.seed, cfg.config_hash(), cfg.policy.value, cfg.num_views
        )
        builder.set_views(selected or [])
        for name, action in (("mesh", self.mesh), ("eval", lambda s: self.evaluate(s, builder))):
            started = time.perf_counter()
            action(state)
            builder.add_stage(name, StageStatus.COMPLETED, time.perf_counter() - started)
        builder.add_warnings(dict(self.warnings))
        if out_dir is not None:
            root = Path(out_dir)
            self.write_artifacts("mesh", state, root)
            formatter = builder.get_formatter(cfg.eval.psnr_cap)
            write_json(root / "report.json", formatter.to_dict())
            formatter.write_csv(root / "report.csv")
        return builder.build()

    # -------------------------------------------------------------------------
    # Articulation
    # -------------------------------------------------------------------------

    def articulate(
        self,
        cloud: GaussianCloud,
        labels: np.ndarray,
        out_dir: str | Path,
        states: dict[str, float] | None = None,
        remesh: bool = False,
    ) -> GaussianCloud:
        """
        Estimate the joints of the fixture's tree and replay them.

        Connecting regions are rendered from the mask cameras and sent to the
        joint client with the part tree; each joint in ``states`` is then
        applied to its child part and every part below it.

        Returns:
            the articulated cloud (also written to ``out_dir/articulated.ply``)
        """
        root = Path(out_dir)
        root.mkdir(parents=True, exist_ok=True)
        tree = self.scene.tree
        state = PipelineState(scene=self.scene)
        images = render_connecting_regions(
            cloud,
            labels,
            tree,
            self.mask_cameras(state),
            root / "connect",
            rasterizer=self.rasterizer,
            warnings=self.warnings,
        )
        estimated = estimate_joints(tree, self.joint_client, images)
        save_tree(root / "tree.json", estimated)
        moved = cloud
        for child, magnitude in (states or {}).items():
            joint = estimated.joint_for(child).params
            assert joint is not None
            parts = moving_parts(estimated, child)
            moved = apply_joint(moved, labels, parts, joint, magnitude, self.warnings)
        moved.save_ply(root / "articulated.ply")
        if remesh:
            meshes = extract_part_meshes(
                moved, labels, self.config.mesh, self.config.raster, seed=self.config.seed
            )
            if meshes:
                names = tree.part_names
                indices = sorted(meshes)
                save_meshes_obj(
                    root / "articulated.obj",
                    [meshes[i] for i in indices],
                    [names[i] for i in indices],
                )
        return moved

    # -------------------------------------------------------------------------
    # Ablations
    # -------------------------------------------------------------------------

    def _variant(self, overrides: dict[str, Any]) -> "ReconstructionEngine":
        return ReconstructionEngine(apply_overrides(self.config, overrides))

    def ablate(
        self, study: str, out_dir: str | Path, seeds: list[int] | None = None
    ) -> pd.DataFrame:
        """
        Run an ablation study and write ``<out_dir>/<study>.csv``.

        Studies:
            policy: optimal, random and predefined selection per seed
            views: K in {2, 3, 4, 8, 16} (capped by the candidate count)
            components: full pipeline against each switched-off component

        Raises:
            ConfigurationError: unknown study
        """
        root = Path(out_dir)
        seeds = seeds or [self.config.seed]
        variants: list[tuple[str, dict[str, Any]]] = []
        for seed in seeds:
            if study == "policy":
                variants += [
                    (policy.value, {"policy": policy.value, "seed": seed}) for policy in ViewPolicy
                ]
            elif study == "views":
                variants += [
                    (f"k{k}", {"num_views": k, "seed": seed})
                    for k in VIEW_SWEEP
                    if k <= self.config.num_candidates
                ]
            elif study == "components":
                variants += [
                    (name, {**overrides, "seed": seed})
                    for name, overrides in COMPONENT_VARIANTS.items()
                ]
            else:
                raise ConfigurationError(
                    f"unknown study '{study}'; choose policy, views or components"
                )
        reports: list[EvalReport] = []
        names: list[str] = []
        for name, overrides in variants:
            run_dir = root / study / f"{name}-s{overrides['seed']}"
            logger.info("ablation %s: %s", study, run_dir.name)
            reports.append(self._variant(overrides).run(run_dir))
            names.append(name)
        frame = reports_to_frame(reports, self.config.eval.psnr_cap)
        frame.insert(0, "variant", names)
        frame.insert(0, "study", study)
        root.mkdir(parents=True, exist_ok=True)
        frame.to_csv(root / f"{study}.csv", index=False)
        return frame


# Convenience function for quick runs
def run_pipeline(
    scene: SyntheticScene | None = None,
    config: PipelineConfig | None = None,
    out_dir: str | Path | None = None,
) -> EvalReport:
    """
    Convenience function for an end-to-end run.

    Args:
        scene: fixture; built from the config when omitted
        config: pipeline configuration
        out_dir: run directory

    Returns:
        EvalReport of the run
    """
    return ReconstructionEngine(config, scene=scene).run(out_dir)
