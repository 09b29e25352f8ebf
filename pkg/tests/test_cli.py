"""
Tests for the artsplat command line.
"""

from pathlib import Path

import numpy as np
import pytest

from articulated_splat.cli import _parse_states, build_parser, config_from_args, main
from articulated_splat.core.errors import SplatEngineError
from articulated_splat.core.gaussians import GaussianCloud
from articulated_splat.core.models import ViewPolicy
from articulated_splat.modules.synthetic import synth_scene
from articulated_splat.utils.io import load_pfm, read_json, save_cameras, save_points_ply


class TestArguments:
    """Tests for argument parsing and config overrides."""

    def test_flags_override_config(self, tmp_path: Path) -> None:
        """Test TOML values are loaded and flags win over them."""
        config_path = tmp_path / "run.toml"
        config_path.write_text(
            'fixture = "drawer"\nseed = 4\n\n[coarse]\niterations = 50\n', encoding="utf-8"
        )
        args = build_parser().parse_args(
            ["run", "--config", str(config_path), "--seed", "9", "--policy", "random"]
        )
        config = config_from_args(args)
        assert config.fixture == "drawer"
        assert config.seed == 9
        assert config.coarse.iterations == 50
        assert config.policy == ViewPolicy.RANDOM

    def test_unset_flags_fall_through(self) -> None:
        """Test defaults survive when no flag is given."""
        args = build_parser().parse_args(["plan-views", "--lambda-vc", "0.2"])
        config = config_from_args(args)
        assert config.refine.lambda_vc == 0.2
        assert config.seed == 7

    def test_parse_states(self) -> None:
        """Test PART=VALUE joint magnitudes."""
        assert _parse_states(["lid=0.5", "drawer=-0.1"]) == {"lid": 0.5, "drawer": -0.1}
        with pytest.raises(SplatEngineError):
            _parse_states(["lid"])

    def test_subcommand_required(self) -> None:
        """Test argparse rejects a bare invocation."""
        with pytest.raises(SystemExit):
            build_parser().parse_args([])


class TestCommands:
    """Tests for running subcommands through main."""

    def test_synth(self, tmp_path: Path) -> None:
        """Test the fixture, cameras and oracle views are written."""
        code = main(
            [
                "synth",
                "--fixture",
                "plane",
                "--resolution",
                "8",
                "--candidates",
                "3",
                "--out",
                str(tmp_path),
            ]
        )
        assert code == 0
        assert read_json(tmp_path / "scene.json")["fixture"] == "plane"
        assert len(read_json(tmp_path / "cameras.json")) == 3
        assert load_pfm(tmp_path / "views" / "000_depth.pfm").shape == (8, 8)

    def test_engine_errors_exit_with_2(self, tmp_path: Path) -> None:
        """Test engine errors are logged and mapped to exit status 2."""
        assert main(["synth", "--fixture", "teapot", "--out", str(tmp_path)]) == 2

    def test_register(self, tmp_path: Path) -> None:
        """Test registering a shifted copy of a point cloud."""
        points = np.random.default_rng(5).normal(size=(100, 3)) * np.array([2.0, 1.0, 0.5])
        save_points_ply(tmp_path / "source.ply", points)
        save_points_ply(tmp_path / "target.ply", points + np.array([0.1, 0.0, 0.0]))
        out = tmp_path / "transform.json"
        code = main(
            [
                "register",
                "--source",
                str(tmp_path / "source.ply"),
                "--target",
                str(tmp_path / "target.ply"),
                "--levels",
                "2",
                "--out",
                str(out),
            ]
        )
        assert code == 0
        assert read_json(out)["t"] == pytest.approx([0.1, 0.0, 0.0], abs=1e-3)

    def test_render(self, tmp_path: Path) -> None:
        """Test rendering selected cameras of a saved cloud."""
        scene = synth_scene("plane", seed=0, resolution=8, num_candidates=3)
        points = scene.ground_truth_mesh().sample(50, np.random.default_rng(0))
        GaussianCloud.from_points(points, scale=0.05, opacity=0.7).save_ply(tmp_path / "c.ply")
        save_cameras(tmp_path / "cameras.json", scene.candidates)
        code = main(
            [
                "render",
                "--cloud",
                str(tmp_path / "c.ply"),
                "--cameras",
                str(tmp_path / "cameras.json"),
                "--ids",
                "1",
                "--out",
                str(tmp_path / "renders"),
            ]
        )
        assert code == 0
        assert sorted(p.name for p in (tmp_path / "renders").iterdir()) == [
            "001_alpha.pfm",
            "001_color.png",
            "001_depth.pfm",
            "001_normal.pfm",
        ]
