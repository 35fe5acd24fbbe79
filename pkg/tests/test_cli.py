"""Command line surface: subcommands, outputs, exit codes."""

import json

import numpy as np
import pytest
from click.testing import CliRunner

from tfckit.cli import main


@pytest.fixture()
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def mini_data(tmp_path_factory):
    from tfckit.cater import export_dataset
    root = tmp_path_factory.mktemp("cli") / "data"
    export_dataset(root, n_train=8, n_val=4, grid=4, num_frames=48, height=20,
                   width=20, difficulty="hard", seed=2)
    return root


def test_plan_video_test_mode(runner):
    result = runner.invoke(main, ["plan", "--strategy", "video", "--length", "300",
                                  "--frames", "4", "--dump-plan"])
    assert result.exit_code == 0
    assert json.loads(result.output.strip()) == [37, 112, 187, 262]


def test_plan_clip_eval(runner):
    result = runner.invoke(main, ["plan", "--strategy", "clip", "--length", "100",
                                  "--frames", "8", "--clip-len", "16",
                                  "--stride", "2", "--eval-clips", "4",
                                  "--dump-plan"])
    assert result.exit_code == 0
    lines = [json.loads(l) for l in result.output.strip().splitlines()]
    assert [l[0] for l in lines] == [0, 28, 56, 84]


def test_cost_ops_table_and_json(runner):
    result = runner.invoke(main, ["cost", "--ops", "--dims", "1,256,256,32,14,14,3"])
    assert result.exit_code == 0
    assert "temporal_conv" in result.output and "tfc" in result.output
    result = runner.invoke(main, ["cost", "--ops", "--dims", "1,256,256,32,14,14,3",
                                  "--json"])
    payload = json.loads(result.output)
    tfc_row = next(i for i in payload["items"] if i["label"] == "tfc")
    assert tfc_row["params"] == 256 * 32 * 32


def test_cost_network_from_config(runner, tmp_path):
    cfg = tmp_path / "net.cfg"
    cfg.write_text("network.kind = v3d\nnetwork.tfc_policy = v3d\n"
                   "sampling.frames = 16\n")
    chart = tmp_path / "chart.png"
    result = runner.invoke(main, ["cost", "--config", str(cfg), "--input",
                                  "1,3,16,32,32", "--json", "--plot", str(chart)])
    assert result.exit_code == 0, result.output
    payload = json.loads(result.output.split("chart written")[0])
    assert payload["total_params"] > 0
    assert chart.exists()


def test_cost_bad_dims_exit_code(runner):
    result = runner.invoke(main, ["cost", "--ops", "--dims", "1,2,3"])
    assert result.exit_code == 2


def test_gen_data_and_train_eval_cycle(runner, tmp_path):
    data = tmp_path / "d"
    result = runner.invoke(main, ["gen-data", "--grid", "4", "--frames", "48",
                                  "--size", "20", "--train-count", "6",
                                  "--val-count", "4", "--difficulty", "hard",
                                  "--seed", "5", "--out", str(data)])
    assert result.exit_code == 0, result.output
    assert (data / "manifest.json").exists()

    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"""
dataset = {data}
out = {tmp_path / 'run'}
lr = 0.02
batch_size = 4
total_epochs = 1
lr_drop_epochs =
network.kind = tsn
network.widths = 8,8,16,16
network.repeats = 1,1,1,1
network.stem_width = 8
sampling.frames = 8
""")
    result = runner.invoke(main, ["train", "--config", str(cfg), "--quiet"])
    assert result.exit_code == 0, result.output
    final = json.loads(result.output.strip().splitlines()[-1])
    assert "top1" in final
    assert (tmp_path / "run" / "metrics.csv").exists()
    assert (tmp_path / "run" / "curves.png").exists()

    result = runner.invoke(main, ["eval", "--checkpoint",
                                  str(tmp_path / "run" / "checkpoint"),
                                  "--split", "val"])
    assert result.exit_code == 0, result.output
    row = json.loads(result.output.strip())
    assert row["top1"] == pytest.approx(final["top1"])


def test_train_missing_config_is_config_error(runner):
    result = runner.invoke(main, ["train", "--config", "/nonexistent.cfg"])
    assert result.exit_code == 2


def test_train_missing_dataset_is_data_error(runner, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("dataset = /nonexistent-data\n")
    result = runner.invoke(main, ["train", "--config", str(cfg)])
    assert result.exit_code == 3


def test_eval_bad_checkpoint_exit_code(runner, tmp_path):
    result = runner.invoke(main, ["eval", "--checkpoint", str(tmp_path)])
    assert result.exit_code == 3


def test_verify_fast(runner):
    result = runner.invoke(main, ["verify", "--fast"])
    assert result.exit_code == 0, result.output
    assert "PASS" in result.output
    assert "FAIL" not in result.output
