"""
Command-line interface: ``artsplat <subcommand>``.

Every subcommand reads an optional TOML config; flags override it.
"""

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .core.config import PipelineConfig, apply_overrides, load_config
from .core.errors import SplatEngineError
from .core.gaussians import GaussianCloud
from .core.models import PyramidSchedule, ViewPolicy
from .engine import PipelineState, ReconstructionEngine
from .modules.coarse_trainer import CoarseTrainer
from .modules.rasterizer import Rasterizer, save_buffers
from .modules.refinement import refine
from .modules.registration import register
from .modules.view_planner import PlanResult, ViewPlanner
from .reporting.report import ReportFormatter
from .utils.io import (
    load_cameras,
    load_points_ply,
    read_json,
    save_cameras,
    save_pfm,
    save_png,
    write_json,
)

logger = logging.getLogger(__name__)

# Flag name -> dotted config path.
OVERRIDES = {
    "seed": "seed",
    "fixture": "fixture",
    "resolution": "resolution",
    "num_views": "num_views",
    "policy": "policy",
    "oracle": "refine.oracle",
    "coarse_iterations": "coarse.iterations",
    "refine_iterations": "refine.iterations",
    "lambda_scale": "coarse.lambda_scale",
    "lambda_depth": "coarse.lambda_depth",
    "lambda_smooth": "coarse.lambda_smooth",
    "lambda_vc": "refine.lambda_vc",
    "tau": "articulation.tau",
    "voxel_size": "mesh.voxel_size",
}


# =============================================================================
# Argument parsing
# =============================================================================


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="TOML config file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--fixture")
    parser.add_argument("--resolution", type=int)
    parser.add_argument("--num-views", type=int)
    parser.add_argument("--policy", choices=[p.value for p in ViewPolicy])
    parser.add_argument("--oracle", help="gt | identity | external:<dir>")
    parser.add_argument("--coarse-iterations", type=int)
    parser.add_argument("--refine-iterations", type=int)
    parser.add_argument("--lambda-scale", type=float)
    parser.add_argument("--lambda-depth", type=float)
    parser.add_argument("--lambda-smooth", type=float)
    parser.add_argument("--lambda-vc", type=float)
    parser.add_argument("--tau", type=float)
    parser.add_argument("--voxel-size", type=float)
    parser.add_argument("--out", type=Path, help="output directory or file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="artsplat", description="Sparse-view articulated Gaussian splatting"
    )
    parser.add_argument(
        "--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"]
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="build a fixture and write its candidate views")
    _add_common(p)
    p.add_argument("--candidates", type=int, help="number of candidate poses")

    p = sub.add_parser("plan-views", help="select training views")
    _add_common(p)

    p = sub.add_parser("register", help="align a structured cloud to a noisy cloud")
    p.add_argument("--source", type=Path, required=True)
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--levels", type=int, default=9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("transform.json"))

    for name, text in (("train", "coarse training"), ("refine", "refinement")):
        p = sub.add_parser(name, help=text)
        _add_common(p)
        p.add_argument("--cloud", type=Path, required=True, help="starting cloud PLY")
        p.add_argument("--plan", type=Path, required=True, help="plan.json from plan-views")

    p = sub.add_parser("segment", help="back-project part masks and assign parts")
    _add_common(p)
    p.add_argument("--cloud", type=Path, required=True)
    p.add_argument("--plan", type=Path)

    p = sub.add_parser("articulate", help="estimate joints and move parts")
    _add_common(p)
    p.add_argument("--cloud", type=Path, required=True)
    p.add_argument("--labels", type=Path, required=True)
    p.add_argument(
        "--state", action="append", default=[], metavar="PART=VALUE", help="joint magnitude"
    )
    p.add_argument("--remesh", action="store_true")

    for name, text in (("mesh", "extract meshes"), ("eval", "mesh and evaluate a cloud")):
        p = sub.add_parser(name, help=text)
        _add_common(p)
        p.add_argument("--cloud", type=Path, required=True)
        p.add_argument("--labels", type=Path)

    p = sub.add_parser("run", help="run the whole pipeline")
    _add_common(p)

    p = sub.add_parser("ablate", help="run an ablation study")
    _add_common(p)
    p.add_argument("--study", choices=["policy", "views", "components"], required=True)
    p.add_argument("--seeds", type=int, nargs="+")

    p = sub.add_parser("render", help="render a cloud from cameras")
    p.add_argument("--cloud", type=Path, required=True)
    p.add_argument("--cameras", type=Path, required=True)
    p.add_argument("--ids", type=int, nargs="+")
    p.add_argument("--out", type=Path, default=Path("renders"))
    return parser


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    config = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    overrides: dict[str, Any] = {
        path: getattr(args, flag, None) for flag, path in OVERRIDES.items()
    }
    if getattr(args, "candidates", None) is not None:
        overrides["num_candidates"] = args.candidates
    return apply_overrides(config, overrides)


def _out(args: argparse.Namespace, config: PipelineConfig) -> Path:
    return Path(args.out) if args.out is not None else Path(config.output_dir)


def _load_labels(path: Path | None) -> np.ndarray | None:
    return None if path is None else np.asarray(read_json(path), dtype=np.int64)


def _parse_states(items: Sequence[str]) -> dict[str, float]:
    states = {}
    for item in items:
        name, sep, value = item.partition("=")
        if not sep:
            raise SplatEngineError(f"joint state '{item}' must look like PART=VALUE")
        states[name] = float(value)
    return states


# =============================================================================
# Subcommands
# =============================================================================


def cmd_synth(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    engine = ReconstructionEngine(config)
    out = _out(args, config)
    scene = engine.scene
    write_json(out / "scene.json", scene.to_json_dict())
    save_cameras(out / "cameras.json", scene.candidates)
    for cam in scene.candidates:
        oracle = scene.render(cam)
        save_png(out / "views" / f"{cam.id:03d}_rgb.png", oracle.rgb)
        save_pfm(out / "views" / f"{cam.id:03d}_depth.pfm", oracle.depth)
    print(f"fixture '{scene.fixture}': {scene.part_count} parts, {len(scene.candidates)} views")
    return 0


def cmd_plan_views(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    engine = ReconstructionEngine(config)
    out = _out(args, config)
    planner = ViewPlanner(
        config.planner, config.raster, config.effective_coarse(), seed=config.seed
    )
    plan = planner.plan(
        engine.scene.candidates,
        config.num_views,
        engine.scene,
        policy=config.policy,
        part_count=engine.scene.part_count,
    )
    write_json(out / "plan.json", plan.to_json_dict())
    plan.cloud.save_ply(out / "planner_cloud.ply")
    print(f"selected views: {plan.selected}")
    return 0


def cmd_register(args: argparse.Namespace) -> int:
    source = load_points_ply(args.source)
    target = load_points_ply(args.target)
    schedule = PyramidSchedule.geometric(num_levels=args.levels)
    result = register(source, target, schedule, seed=args.seed)
    write_json(args.out, result.to_json_dict())
    print(f"residual {result.residual:.6e}, scale {result.transform.scale:.4f}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    engine = ReconstructionEngine(config)
    out = _out(args, config)
    views = engine.views_for(read_json(args.plan)["selected"])
    cloud = GaussianCloud.load_ply(args.cloud)
    if cloud.part_count != engine.scene.part_count:
        cloud = cloud.with_part_count(engine.scene.part_count)
    trainer = CoarseTrainer(config.effective_coarse(), config.raster, seed=config.seed)
    result = trainer.train(cloud, views)
    result.cloud.save_ply(out / "cloud.ply")
    result.save_log(out / "log.csv")
    if result.correction is not None:
        write_json(out / "depth_correction.json", result.correction.summary())
    print(f"trained {result.iterations} iterations, {result.cloud.num} primitives")
    return 0


def cmd_refine(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    engine = ReconstructionEngine(config)
    out = _out(args, config)
    views = engine.views_for(read_json(args.plan)["selected"])
    result = refine(
        GaussianCloud.load_ply(args.cloud),
        views,
        engine.oracle,
        config.effective_refine(),
        config.effective_coarse(),
        config.raster,
        seed=config.seed,
    )
    result.cloud.save_ply(out / "cloud.ply")
    result.save_log(out / "log.csv")
    print(f"refined {result.iterations} iterations")
    return 0


def cmd_segment(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    engine = ReconstructionEngine(config)
    out = _out(args, config)
    cloud = GaussianCloud.load_ply(args.cloud)
    state = PipelineState(scene=engine.scene, cloud=cloud)
    if args.plan is not None:
        selected = read_json(args.plan)["selected"]
        state.plan = PlanResult(selected=selected, ifi_trace=[], cloud=cloud, views=[])
    engine.segment(state)
    assert state.labels is not None
    labels = state.labels
    engine.write_artifacts("segment", state, out)
    counts = np.bincount(labels[labels >= 0], minlength=engine.scene.part_count)
    print("primitives per part: " + ", ".join(str(int(c)) for c in counts))
    return 0


def cmd_articulate(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    engine = ReconstructionEngine(config)
    out = _out(args, config)
    labels = _load_labels(args.labels)
    assert labels is not None
    engine.articulate(
        GaussianCloud.load_ply(args.cloud),
        labels,
        out,
        states=_parse_states(args.state),
        remesh=args.remesh,
    )
    print(f"articulated cloud written to {out / 'articulated.ply'}")
    return 0


def cmd_mesh(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    engine = ReconstructionEngine(config)
    out = _out(args, config)
    state = PipelineState(
        scene=engine.scene,
        cloud=GaussianCloud.load_ply(args.cloud),
        labels=_load_labels(args.labels),
    )
    engine.mesh(state)
    engine.write_artifacts("mesh", state, out)
    assert state.mesh is not None
    print(f"mesh: {state.mesh.num_vertices} vertices, {state.mesh.num_faces} faces")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    engine = ReconstructionEngine(config)
    report = engine.evaluate_cloud(
        GaussianCloud.load_ply(args.cloud),
        _load_labels(args.labels),
        out_dir=_out(args, config),
    )
    ReportFormatter(report, config.eval.psnr_cap).print_full()
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    engine = ReconstructionEngine(config)
    report = engine.run(_out(args, config))
    ReportFormatter(report, config.eval.psnr_cap).print_summary()
    return 0 if report.completed else 1


def cmd_ablate(args: argparse.Namespace) -> int:
    config = config_from_args(args)
    frame = ReconstructionEngine(config).ablate(args.study, _out(args, config), args.seeds)
    print(frame.to_string(index=False))
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    cloud = GaussianCloud.load_ply(args.cloud)
    cameras = load_cameras(args.cameras)
    if args.ids:
        cameras = [cam for cam in cameras if cam.id in set(args.ids)]
    rasterizer = Rasterizer()
    with torch.no_grad():
        for cam in cameras:
            save_buffers(rasterizer.render(cloud, cam), str(args.out), f"{cam.id:03d}")
    print(f"rendered {len(cameras)} views to {args.out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "plan-views": cmd_plan_views,
    "register": cmd_register,
    "train": cmd_train,
    "refine": cmd_refine,
    "segment": cmd_segment,
    "articulate": cmd_articulate,
    "mesh": cmd_mesh,
    "eval": cmd_eval,
    "run": cmd_run,
    "ablate": cmd_ablate,
    "render": cmd_render,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except SplatEngineError as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
