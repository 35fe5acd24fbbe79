"""Command line interface.

Subcommands: ``gen-data`` (build a benchmark), ``train``, ``eval``,
``verify`` (the oracle suite), ``cost`` (parameter/multiply reports), and
``plan`` (frame-index planning, with ``--dump-plan`` for raw JSON).

Exit codes: 0 success, 1 check failure, 2 configuration error, 3 data
error, 4 numerical abort.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .cater import DataError, export_dataset
from .config import ConfigError, load_config
from .train import CheckpointError, NumericalError


class ExitCodes:
    OK = 0
    CHECK_FAILED = 1
    CONFIG = 2
    DATA = 3
    NUMERICAL = 4


def _run(fn):
    try:
        return fn()
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(ExitCodes.CONFIG)
    except (DataError, CheckpointError) as exc:
        click.echo(f"data error: {exc}", err=True)
        sys.exit(ExitCodes.DATA)
    except NumericalError as exc:
        click.echo(f"numerical abort: {exc}", err=True)
        sys.exit(ExitCodes.NUMERICAL)


@click.group()
def main():
    """Temporal fully connected operators, host networks and benchmark."""


@main.command("gen-data")
@click.option("--grid", default=4, show_default=True)
@click.option("--frames", default=64, show_default=True)
@click.option("--size", default=32, show_default=True, help="Frame height and width.")
@click.option("--train-count", default=512, show_default=True)
@click.option("--val-count", default=128, show_default=True)
@click.option("--difficulty", type=click.Choice(["easy", "hard"]), default="hard",
              show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def gen_data(grid, frames, size, train_count, val_count, difficulty, seed, out):
    """Generate a snitch-localization dataset."""
    def job():
        def progress(done, total):
            if done % 64 == 0 or done == total:
                click.echo(f"  {done}/{total} videos", err=True)
        manifest = export_dataset(out, n_train=train_count, n_val=val_count,
                                  grid=grid, num_frames=frames, height=size,
                                  width=size, difficulty=difficulty, seed=seed,
                                  progress=progress)
        click.echo(f"wrote {len(manifest['items'])} videos to {out}")
    _run(job)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", default=None, type=click.Path(),
              help="Override the run directory from the config.")
@click.option("--seed", default=None, type=int, help="Override the config seed.")
@click.option("--quiet", is_flag=True)
def train(config_path, out, seed, quiet):
    """Train a network per a config file; writes metrics, curves, checkpoint."""
    from .train import train as run_train

    def job():
        overrides = {}
        if out is not None:
            overrides["out"] = out
        if seed is not None:
            overrides["seed"] = str(seed)
        cfg = load_config(config_path, overrides)
        summary = run_train(cfg, quiet=quiet)
        click.echo(json.dumps(summary["final_val"]))
    _run(job)


@main.command()
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--dataset", default=None, type=click.Path(),
              help="Defaults to the dataset recorded in the checkpoint.")
@click.option("--split", default="val", show_default=True)
@click.option("--sampling", type=click.Choice(["video", "clip"]), default=None,
              help="Defaults to the strategy recorded in the checkpoint.")
@click.option("--frames", default=None, type=int)
@click.option("--batch-size", default=16, show_default=True)
def eval(checkpoint, dataset, split, sampling, frames, batch_size):
    """Evaluate a checkpoint on a dataset split."""
    from .config import TrainConfig
    from .train import evaluate_checkpoint, load_checkpoint

    def job():
        net, extra = load_checkpoint(checkpoint)
        data_dir = dataset or extra.get("dataset")
        if not data_dir:
            raise ConfigError("no dataset recorded in checkpoint; pass --dataset")
        t = frames or net.spec.temporal_length
        cfg = TrainConfig(dataset=str(data_dir), batch_size=batch_size,
                          sampling_strategy=sampling or extra.get("sampling", "video"),
                          sampling_frames=t)
        row = evaluate_checkpoint(checkpoint, data_dir, split, cfg)
        click.echo(json.dumps(row.public_dict()))
    _run(job)


@main.command()
@click.option("--fast", is_flag=True, help="Smaller sweeps for a quick look.")
def verify(fast):
    """Run the oracle suite: equivalences, gradients, costs, sampling."""
    from .verify import run_all
    results = _run(lambda: run_all(fast=fast))
    for r in results:
        click.echo(r.line())
    failed = [r for r in results if not r.passed]
    click.echo(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        sys.exit(ExitCodes.CHECK_FAILED)


@main.command()
@click.option("--config", "config_path", default=None, type=click.Path(),
              help="Network config; reports a whole network.")
@click.option("--input", "input_dims", default="1,3,16,32,32", show_default=True,
              help="B,C,T,H,W for network reports.")
@click.option("--ops", is_flag=True, help="Report the operator comparison table "
              "instead of a network.")
@click.option("--dims", default="1,256,256,32,14,14,3",
              help="B,C_in,C_out,T,H,W,K for --ops.", show_default=True)
@click.option("--json", "as_json", is_flag=True)
@click.option("--plot", default=None, type=click.Path(),
              help="Also render a bar chart to this file.")
def cost(config_path, input_dims, ops, dims, as_json, plot):
    """Parameter and multiply reports for operators or whole networks."""
    from . import costs

    def job():
        if ops:
            try:
                b, c_in, c_out, t, h, w, k = (int(x) for x in dims.split(","))
            except ValueError:
                raise ConfigError(f"--dims expects 7 integers, got {dims!r}")
            report = costs.operator_comparison(b, c_in, c_out, t, h, w, k)
            title = f"operators at B={b} Cin={c_in} Cout={c_out} T={t} {h}x{w} K={k}"
        else:
            if config_path is None:
                raise ConfigError("pass --config for a network report or use --ops")
            cfg = load_config(config_path, require_dataset=False)
            try:
                b, c, t, h, w = (int(x) for x in input_dims.split(","))
            except ValueError:
                raise ConfigError(f"--input expects 5 integers, got {input_dims!r}")
            if t != cfg.frames:
                raise ConfigError(f"--input T={t} does not match config frames "
                                  f"{cfg.frames}")
            spec = cfg.network_spec(cfg.num_classes or 16)
            report = costs.cost_network(spec, b, h, w)
            title = f"{cfg.network_kind} tfc={cfg.tfc_policy} at {b}x{c}x{t}x{h}x{w}"
        click.echo(report.to_json() if as_json else report.format_table())
        if plot:
            from .figures import save_cost_chart
            save_cost_chart(report, plot, title=title)
            click.echo(f"chart written to {plot}", err=True)
    _run(job)


@main.command()
@click.option("--strategy", type=click.Choice(["video", "clip"]), default="video",
              show_default=True)
@click.option("--length", required=True, type=int, help="Video length in frames.")
@click.option("--frames", default=16, show_default=True,
              help="Plan length T (segments or frames per clip).")
@click.option("--mode", type=click.Choice(["train", "test"]), default="test",
              show_default=True)
@click.option("--clip-len", default=16, show_default=True)
@click.option("--stride", default=2, show_default=True)
@click.option("--eval-clips", default=4, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--dump-plan", is_flag=True, help="Print raw JSON index arrays only.")
def plan(strategy, length, frames, mode, clip_len, stride, eval_clips, seed,
         dump_plan):
    """Show the frame indices a sampling strategy would pick."""
    from .sampling import clip_level_plan, video_level_plan

    def job():
        rng = np.random.default_rng(seed) if mode == "train" else None
        if strategy == "video":
            plans = [video_level_plan(length, frames, mode, rng)]
        else:
            plans = clip_level_plan(length, clip_len, stride, frames, mode, rng,
                                    num_eval_clips=eval_clips)
        for p in plans:
            if dump_plan:
                click.echo(p.to_json())
            else:
                click.echo(f"{p.strategy}/{p.mode}: {list(p.indices)}")
    _run(job)


if __name__ == "__main__":
    main()
