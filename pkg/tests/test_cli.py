"""Tests for the command-line interface."""

import numpy as np
import pandas as pd
import pytest
import yaml
from click.testing import CliRunner

from pixel_mamba.cli import cli
from pixel_mamba.core.io import save_tensor


INSPECT = ["inspect", "--config", "tiny-4"]

SPEC_YAML = {
    "height": 16,
    "width": 16,
    "window": "8x8",
    "n_classes": 2,
    "t_bins": 3,
    "censor_rate": 0.0,
}


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def spec_file(tmp_path):
    path = tmp_path / "spec.yaml"
    path.write_text(yaml.dump(SPEC_YAML))
    return path


@pytest.fixture
def dataset_dir(runner, spec_file, tmp_path):
    """Four 16x16 classification slides written by `synth`."""
    out = tmp_path / "data"
    result = runner.invoke(
        cli, ["synth", "--spec", str(spec_file), "--out", str(out), "--n-slides", "4"]
    )
    assert result.exit_code == 0, result.output
    return out


@pytest.fixture
def trained_run(runner, dataset_dir, tmp_path):
    """One-epoch tiny-4 run on the synthetic dataset."""
    out = tmp_path / "run"
    result = runner.invoke(
        cli,
        [
            "train",
            "--config",
            "tiny-4",
            "--data",
            str(dataset_dir),
            "--epochs",
            "1",
            "--accumulation",
            "2",
            "--out",
            str(out),
        ],
    )
    assert result.exit_code == 0, result.output
    return out


class TestGroup:
    """Test global options."""

    def test_version(self, runner):
        result = runner.invoke(cli, ["--version"])
        assert result.exit_code == 0
        assert "pixel-mamba" in result.output

    def test_help_lists_commands(self, runner):
        result = runner.invoke(cli, ["--help"])
        assert result.exit_code == 0
        for command in ("synth", "train", "eval", "serialize", "inspect", "km", "logs"):
            assert command in result.output

    def test_invalid_workers_env(self, runner, monkeypatch):
        """A bad environment setting is a validation error."""
        monkeypatch.setenv("PIXELMAMBA_WORKERS", "0")
        result = runner.invoke(cli, [*INSPECT, "--dims", "16x16"])
        assert result.exit_code == 2


class TestSynth:
    """Test the synth command."""

    def test_writes_dataset(self, dataset_dir):
        assert (dataset_dir / "manifest.yaml").exists()
        frame = pd.read_csv(dataset_dir / "records.csv")
        assert len(frame) == 4
        assert frame["label"].tolist() == [0, 1, 0, 1]

    def test_seed_flag_replaces_spec_seed(self, runner, spec_file, tmp_path):
        out = tmp_path / "d"
        result = runner.invoke(
            cli,
            ["--seed", "7", "synth", "--spec", str(spec_file), "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        manifest = yaml.safe_load((out / "manifest.yaml").read_text())
        assert manifest["spec"]["seed"] == 7

    def test_invalid_spec(self, runner, tmp_path):
        bad = tmp_path / "bad.yaml"
        bad.write_text(yaml.dump({"height": 10, "width": 16, "window": "8x8"}))
        result = runner.invoke(
            cli, ["synth", "--spec", str(bad), "--out", str(tmp_path / "d")]
        )
        assert result.exit_code == 2

    def test_out_required(self, runner):
        assert runner.invoke(cli, ["synth"]).exit_code == 2


class TestTrainAndEval:
    """Test train followed by eval."""

    def test_train_outputs(self, trained_run):
        curve = pd.read_csv(trained_run / "loss_curve.csv")
        assert curve["epoch"].tolist() == [1]
        assert curve["updates"].tolist() == [2]
        assert (trained_run / "checkpoint" / "checkpoint.yaml").exists()

    def test_train_unknown_config(self, runner, dataset_dir):
        result = runner.invoke(
            cli, ["train", "--config", "no-such-config", "--data", str(dataset_dir)]
        )
        assert result.exit_code == 2

    def test_eval_report(self, runner, trained_run, dataset_dir, tmp_path):
        out = tmp_path / "report"
        result = runner.invoke(
            cli,
            [
                "eval",
                "--ckpt",
                str(trained_run / "checkpoint"),
                "--data",
                str(dataset_dir),
                "--folds",
                "2",
                "--out",
                str(out),
            ],
        )
        assert result.exit_code == 0, result.output
        assert "macro_f1" in result.output
        assert (out / "report.csv").exists()
        assert (out / "predictions.csv").exists()

    def test_eval_config_mismatch(self, runner, trained_run, dataset_dir):
        result = runner.invoke(
            cli,
            [
                "eval",
                "--ckpt",
                str(trained_run / "checkpoint"),
                "--data",
                str(dataset_dir),
                "--folds",
                "2",
                "--config",
                "tiny-8",
            ],
        )
        assert result.exit_code == 2
        assert "mismatch" in result.output

    def test_eval_too_many_folds(self, runner, trained_run, dataset_dir):
        result = runner.invoke(
            cli,
            [
                "eval",
                "--ckpt",
                str(trained_run / "checkpoint"),
                "--data",
                str(dataset_dir),
                "--folds",
                "9",
            ],
        )
        assert result.exit_code == 2


class TestSerialize:
    """Test the serialize command."""

    @pytest.fixture
    def image_file(self, tmp_path, small_image):
        return save_tensor(tmp_path / "image.pxmt", small_image)

    def test_summary(self, runner, image_file):
        result = runner.invoke(
            cli, ["serialize", "--image", str(image_file), "--window", "8"]
        )
        assert result.exit_code == 0, result.output
        assert "4 regions" in result.output
        assert "M = 260 tokens" in result.output

    def test_writes_tokens(self, runner, image_file, tmp_path):
        out = str(tmp_path / "seq")
        result = runner.invoke(
            cli,
            ["serialize", "--image", str(image_file), "--window", "8", "--out", out],
        )
        assert result.exit_code == 0, result.output
        positions = pd.read_csv(tmp_path / "seq.csv")
        assert positions["cls_position"].tolist() == [32, 97, 162, 227]
        assert (tmp_path / "seq.pxmt").exists()

    def test_window_does_not_tile(self, runner, image_file):
        result = runner.invoke(
            cli, ["serialize", "--image", str(image_file), "--window", "5"]
        )
        assert result.exit_code == 2

    def test_bad_window_text(self, runner, image_file):
        result = runner.invoke(
            cli, ["serialize", "--image", str(image_file), "--window", "abc"]
        )
        assert result.exit_code == 2


class TestInspect:
    """Test the inspect command."""

    def test_shape_trace(self, runner):
        result = runner.invoke(cli, [*INSPECT, "--dims", "16x16"])
        assert result.exit_code == 0, result.output
        assert "Shape trace" in result.output
        assert "Peak within 2M" in result.output

    def test_fusion_csv(self, runner, tmp_path):
        out = tmp_path / "fusion.csv"
        result = runner.invoke(
            cli,
            [*INSPECT, "--dims", "16x16", "--fusion-csv", str(out)],
        )
        assert result.exit_code == 0, result.output
        frame = pd.read_csv(out)
        assert frame["k"].tolist() == [1, 1, 1, 0]

    def test_dims_do_not_tile(self, runner):
        result = runner.invoke(cli, [*INSPECT, "--dims", "12x16"])
        assert result.exit_code == 2


class TestKm:
    """Test the km command."""

    def test_writes_curves(self, runner, tmp_path):
        ids = [f"slide-{i:04d}" for i in range(6)]
        pd.DataFrame({"slide_id": ids, "risk": np.linspace(0.1, 0.6, 6)}).to_csv(
            tmp_path / "risks.csv", index=False
        )
        pd.DataFrame(
            {
                "slide_id": ids,
                "time_bin": [4, 4, 3, 2, 1, 1],
                "censor": [1, 0, 0, 0, 0, 0],
            }
        ).to_csv(tmp_path / "records.csv", index=False)
        result = runner.invoke(
            cli,
            [
                "km",
                "--risks",
                str(tmp_path / "risks.csv"),
                "--records",
                str(tmp_path / "records.csv"),
                "--out",
                str(tmp_path / "km.svg"),
            ],
        )
        assert result.exit_code == 0, result.output
        assert "High risk: 3 slides" in result.output
        assert (tmp_path / "km.csv").exists()
        assert (tmp_path / "km.svg").exists()

    def test_missing_column(self, runner, tmp_path):
        pd.DataFrame({"slide_id": ["a"], "score": [1.0]}).to_csv(
            tmp_path / "risks.csv", index=False
        )
        pd.DataFrame({"slide_id": ["a"], "time_bin": [1], "censor": [0]}).to_csv(
            tmp_path / "records.csv", index=False
        )
        result = runner.invoke(
            cli,
            [
                "km",
                "--risks",
                str(tmp_path / "risks.csv"),
                "--records",
                str(tmp_path / "records.csv"),
                "--out",
                str(tmp_path / "km.svg"),
            ],
        )
        assert result.exit_code == 2


class TestLogsCommands:
    """Test the logs group."""

    def test_path(self, runner, isolated_logs):
        result = runner.invoke(cli, ["logs", "path"])
        assert result.exit_code == 0
        assert "pixel-mamba.log" in "".join(result.output.split())

    def test_clear_empty(self, runner):
        result = runner.invoke(cli, ["logs", "clear"])
        assert result.exit_code == 0
        assert "No log files to clear." in result.output

    def test_show_written_log(self, runner, isolated_logs):
        isolated_logs.mkdir(parents=True, exist_ok=True)
        (isolated_logs / "pixel-mamba.log").write_text("first\nsecond\nthird\n")
        result = runner.invoke(cli, ["logs", "show", "-n", "2"])
        assert result.exit_code == 0
        assert "second" in result.output and "third" in result.output
        assert "first" not in result.output

    def test_stats_without_files(self, runner):
        result = runner.invoke(cli, ["logs", "stats"])
        assert result.exit_code == 0
        assert "No log files found." in result.output
