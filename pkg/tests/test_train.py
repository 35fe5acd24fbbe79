"""Training harness: optimizer oracle, determinism, schedules, checkpoints."""

import json
from pathlib import Path

import numpy as np
import pytest

from tfckit.cater import export_dataset
from tfckit.config import ConfigError, TrainConfig, parse_config_text
from tfckit.train import (MetricsRow, NumericalError, SgdOptimizer,
                          evaluate_checkpoint, grid_l1, load_checkpoint,
                          lr_for_epoch, save_checkpoint, sgd_step, train)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "small"
    export_dataset(root, n_train=8, n_val=8, grid=4, num_frames=48,
                   height=20, width=20, difficulty="hard", seed=100)
    return root


def small_config(dataset, out, **kw):
    base = dict(lr=0.02, momentum=0.9, weight_decay=1e-5, batch_size=4,
                total_epochs=2, lr_drop_epochs=(), seed=1, dataset=str(dataset),
                out=str(out), network_kind="v3d", tfc_policy="none",
                widths=(8, 8, 16, 16), repeats=(1, 1, 1, 1), stem_width=8,
                sampling_strategy="video", sampling_frames=8)
    base.update(kw)
    return TrainConfig(**base)


class TestSgd:
    def test_plain_gradient_descent(self):
        p = np.array([1.0, -2.0], dtype=np.float32)
        g = np.array([0.5, 0.5], dtype=np.float32)
        v = np.zeros_like(p)
        sgd_step([p], [g], [v], lr=0.1, momentum=0.0, weight_decay=0.0)
        np.testing.assert_allclose(p, [0.95, -2.05])

    def test_zero_grad_no_decay_keeps_params(self):
        p = np.array([3.0], dtype=np.float32)
        v = np.zeros_like(p)
        sgd_step([p], [np.zeros_like(p)], [v], lr=0.1, momentum=0.9,
                 weight_decay=0.0)
        np.testing.assert_array_equal(p, [3.0])

    def test_nonfinite_grad_aborts(self):
        p = np.array([1.0], dtype=np.float32)
        with pytest.raises(NumericalError):
            sgd_step([p], [np.array([np.nan], dtype=np.float32)],
                     [np.zeros_like(p)], 0.1, 0.9, 0.0)

    def test_quadratic_bowl_converges(self):
        # f(x) = ||x||^2 / 2, grad = x; the linear recurrence
        #   v <- m v + x,  x <- x - lr v
        # iterated from the same start is the independent oracle.  The
        # iteration is underdamped (|eigenvalue| = sqrt(0.9) with a rotation),
        # so the norm rings; its envelope decays by 0.9^5 per half period.
        rng = np.random.default_rng(0)
        x = rng.standard_normal(8).astype(np.float64) * 0.05
        x_ref = x.copy()
        v = np.zeros_like(x)
        v_ref = np.zeros_like(x)
        norms = []
        for _ in range(100):
            sgd_step([x], [x.copy()], [v], lr=0.1, momentum=0.9, weight_decay=0.0)
            v_ref = 0.9 * v_ref + x_ref
            x_ref = x_ref - 0.1 * v_ref
            np.testing.assert_allclose(x, x_ref, rtol=1e-12)
            norms.append(float(np.linalg.norm(x)))
        assert norms[-1] < 1e-3
        # envelope peaks decrease monotonically once the transient has passed
        peaks = [max(norms[i:i + 10]) for i in range(10, 100, 10)]
        assert all(b < a for a, b in zip(peaks, peaks[1:]))

    def test_coupled_decay_direction(self):
        p = np.array([1.0], dtype=np.float64)
        v = np.zeros_like(p)
        sgd_step([p], [np.zeros_like(p)], [v], lr=0.1, momentum=0.0,
                 weight_decay=0.5)
        np.testing.assert_allclose(p, [0.95])  # v = 0.5*1.0, p -= 0.1*0.5


class TestSchedule:
    def test_drop_is_exactly_tenth(self):
        drops = (15, 25)
        lrs = [lr_for_epoch(0.01, drops, e) for e in range(1, 31)]
        for d in drops:
            assert lrs[d - 1] == pytest.approx(0.1 * lrs[d - 2])
        assert lrs[0] == 0.01
        assert lrs[-1] == pytest.approx(0.0001)

    def test_config_rejects_unsorted_drops(self):
        with pytest.raises(ConfigError):
            TrainConfig(dataset="x", lr_drop_epochs=(25, 15))

    def test_config_rejects_late_drops(self):
        with pytest.raises(ConfigError):
            TrainConfig(dataset="x", lr_drop_epochs=(15, 30), total_epochs=30)


class TestMetrics:
    def test_row_invariant(self):
        with pytest.raises(ValueError):
            MetricsRow(1, "val", top1=0.9, top5=0.5, mean_loss=1.0, l1_loss=0.1)

    def test_grid_l1_convention(self):
        # cell k sits at (k mod G, k div G); cells 0 and 5 on a 4-grid are
        # (0,0) and (1,1): L1 distance 2
        assert grid_l1(np.array([0]), np.array([5]), 4) == 2.0
        assert grid_l1(np.array([3]), np.array([12]), 4) == 6.0


class TestConfigFile:
    def test_parse_round_trip(self):
        text = """
        # run settings
        lr = 0.02
        momentum = 0.9
        weight_decay = 1e-5
        batch_size = 8
        total_epochs = 4
        lr_drop_epochs = 2,3
        seed = 7
        dataset = /tmp/data
        network.kind = tsn
        network.tfc_policy = tsn
        sampling.strategy = video
        sampling.frames = 8
        """
        cfg = parse_config_text(text)
        assert cfg.lr == 0.02 and cfg.seed == 7
        assert cfg.network_kind == "tsn" and cfg.tfc_policy == "tsn"
        assert cfg.lr_drop_epochs == (2, 3)
        assert cfg.frames == 8

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            parse_config_text("dataset = x\nbogus = 1\n")

    def test_malformed_line(self):
        with pytest.raises(ConfigError):
            parse_config_text("dataset x\n")

    def test_bad_number(self):
        with pytest.raises(ConfigError):
            parse_config_text("dataset = x\nlr = fast\n")

    def test_temporal_length_must_match_frames(self):
        with pytest.raises(ConfigError):
            parse_config_text("dataset = x\nsampling.frames = 8\n"
                              "network.temporal_length = 16\n")


class TestTrainLoop:
    def test_deterministic_metrics_files(self, small_dataset, tmp_path):
        cfg_a = small_config(small_dataset, tmp_path / "a")
        cfg_b = small_config(small_dataset, tmp_path / "b")
        train(cfg_a, quiet=True)
        train(cfg_b, quiet=True)
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert a == b
        ja = (tmp_path / "a" / "metrics.json").read_bytes()
        jb = (tmp_path / "b" / "metrics.json").read_bytes()
        assert ja == jb

    def test_checkpoint_round_trip_reproduces_eval(self, small_dataset, tmp_path):
        cfg = small_config(small_dataset, tmp_path / "run")
        summary = train(cfg, quiet=True)
        final_val = summary["final_val"]
        row = evaluate_checkpoint(tmp_path / "run" / "checkpoint", small_dataset,
                                  "val", cfg, epoch=cfg.total_epochs)
        for key in ("top1", "top5", "mean_loss", "l1_loss"):
            assert row.public_dict()[key] == final_val[key], key

    def test_checkpoint_rejects_wrong_dataset_classes(self, small_dataset,
                                                      tmp_path):
        from tfckit.train import CheckpointError
        cfg = small_config(small_dataset, tmp_path / "run2", total_epochs=1)
        train(cfg, quiet=True)
        other = tmp_path / "other_data"
        export_dataset(other, n_train=2, n_val=2, grid=2, num_frames=48,
                       height=20, width=20, difficulty="hard", seed=3)
        with pytest.raises(CheckpointError):
            evaluate_checkpoint(tmp_path / "run2" / "checkpoint", other, "val", cfg)

    def test_run_artifacts_exist(self, small_dataset, tmp_path):
        out = tmp_path / "artifacts"
        cfg = small_config(small_dataset, out, total_epochs=1)
        train(cfg, quiet=True)
        for name in ("metrics.csv", "metrics.json", "timing.csv", "curves.png",
                     "lr_schedule.json"):
            assert (out / name).exists(), name
        assert (out / "checkpoint" / "manifest.json").exists()
        header = (out / "metrics.csv").read_text().splitlines()[0]
        assert header == "epoch,split,top1,top5,mean_loss,l1_loss"

    def test_recorded_lr_schedule(self, small_dataset, tmp_path):
        cfg = small_config(small_dataset, tmp_path / "drops", total_epochs=4,
                           lr_drop_epochs=(2, 3))
        train(cfg, quiet=True)
        lrs = json.loads((tmp_path / "drops" / "lr_schedule.json").read_text())
        assert lrs[1] == pytest.approx(0.1 * lrs[0])
        assert lrs[2] == pytest.approx(0.1 * lrs[1])
        assert lrs[3] == lrs[2]

    def test_chance_level_random_network(self, small_dataset, tmp_path):
        # an untrained network on a 16-class problem stays near chance
        cfg = small_config(small_dataset, tmp_path / "chance")
        from tfckit.blocks import build_network
        from tfckit.cater import VideoDataset
        from tfckit.train import evaluate_network
        net = build_network(cfg.network_spec(16), seed=9)
        row = evaluate_network(net, VideoDataset(small_dataset, "val"), cfg, 0, "val")
        assert 0 <= row.top1 <= 0.7  # 8 samples; chance 1/16, wide 3-sigma band
        assert row.top5 >= row.top1
