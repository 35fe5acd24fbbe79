"""Momentum-SGD training and evaluation on exported video datasets.

The recipe: cross-entropy on the grid classes, momentum SGD with coupled
weight decay, and a step schedule that divides the learning rate by 10 at
the configured epochs.  Runs are deterministic for a fixed seed: batch
order, frame plans and parameter initialization all derive from it, so a
repeated run writes byte-identical metrics files.  Wall-clock timings go
to a separate file for that reason.

A run directory holds ``metrics.csv`` and ``metrics.json`` (one row per
epoch per split), ``timing.csv``, ``curves.png``, and a ``checkpoint``
directory with one tensor container per weight plus a manifest.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as tt
from .blocks import Network, build_network, spec_from_dict, spec_to_dict
from .cater import DataError, VideoDataset
from .config import TrainConfig
from .container import read_tensor, write_tensor
from .sampling import clip_level_plan, video_level_plan
from .tensor import Tensor


class NumericalError(RuntimeError):
    """Raised when the loss or a gradient stops being finite."""


class CheckpointError(RuntimeError):
    """Raised for missing or incompatible checkpoints."""


INPUT_SHIFT = 0.5  # frames arrive in [0,1]; center them before the stem


def tune_allocator() -> None:
    """Keep freed heap chunks available for reuse (glibc only, best effort).

    Training allocates and frees the same large activation buffers every
    step; without this the allocator hands pages back to the kernel and
    every step pays the zero-fill fault cost again.
    """
    import ctypes
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
    except (OSError, AttributeError):
        pass


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
             velocities: Sequence[np.ndarray], lr: float, momentum: float,
             weight_decay: float) -> None:
    """One in-place momentum step with coupled decay:

        v <- momentum * v + (grad + weight_decay * param)
        param <- param - lr * v
    """
    for p, g, v in zip(params, grads, velocities):
        if not np.all(np.isfinite(g)):
            raise NumericalError(
                f"non-finite gradient (shape {g.shape}, max |g| = {np.abs(g).max()})")
        np.multiply(v, momentum, out=v)
        v += g + weight_decay * p
        p -= lr * v


class SgdOptimizer:
    def __init__(self, net: Network, momentum: float, weight_decay: float):
        self.named = net.named_params()
        self.velocities = [np.zeros_like(t.data) for _, t in self.named]
        self.momentum = momentum
        self.weight_decay = weight_decay

    def step(self, lr: float) -> None:
        params, grads = [], []
        for name, t in self.named:
            if t.grad is None:
                raise NumericalError(f"parameter {name} received no gradient")
            params.append(t.data)
            grads.append(t.grad)
        sgd_step(params, grads, self.velocities, lr, self.momentum,
                 self.weight_decay)


def lr_for_epoch(base_lr: float, drops: Sequence[int], epoch: int) -> float:
    """Learning rate at a 1-based epoch; each listed epoch divides it by 10."""
    return base_lr * (0.1 ** sum(epoch >= d for d in drops))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsRow:
    epoch: int
    split: str
    top1: float
    top5: float
    mean_loss: float
    l1_loss: float
    wall_time_s: float = 0.0

    def __post_init__(self):
        if not (0 <= self.top1 <= self.top5 <= 1):
            raise ValueError(f"need top1 <= top5 <= 1, got {self.top1}, {self.top5}")

    def csv_line(self) -> str:
        return ",".join([str(self.epoch), self.split, repr(self.top1),
                         repr(self.top5), repr(self.mean_loss), repr(self.l1_loss)])

    def public_dict(self) -> dict:
        d = asdict(self)
        d.pop("wall_time_s")
        return d


CSV_HEADER = "epoch,split,top1,top5,mean_loss,l1_loss"


def grid_l1(pred: np.ndarray, labels: np.ndarray, grid: int) -> float:
    """Mean city-block distance between predicted and true cells, with
    cell k at coordinates (k mod G, k div G)."""
    px, py = pred % grid, pred // grid
    lx, ly = labels % grid, labels // grid
    return float(np.mean(np.abs(px - lx) + np.abs(py - ly)))


def _score(logits: np.ndarray, labels: np.ndarray, grid: int) -> Tuple[float, float, float]:
    pred = logits.argmax(axis=1)
    top1 = float(np.mean(pred == labels))
    k = min(5, logits.shape[1])
    topk = np.argsort(-logits, axis=1)[:, :k]
    top5 = float(np.mean([labels[i] in topk[i] for i in range(len(labels))]))
    return top1, top5, grid_l1(pred, labels, grid)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

def _plan_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index]))


def _gather_frames(video: np.ndarray, indices: Sequence[int]) -> np.ndarray:
    return video[:, list(indices)]


def assemble_batch(dataset: VideoDataset, indices: Sequence[int], cfg: TrainConfig,
                   mode: str, epoch: int) -> Tuple[np.ndarray, np.ndarray]:
    """Stack sampled frames for the given dataset rows into (B,3,T,H,W)."""
    clips, labels = [], []
    for i in indices:
        video = dataset.video(i)
        length = video.shape[1]
        rng = _plan_rng(cfg.seed, epoch, i) if mode == "train" else None
        if cfg.sampling_strategy == "video":
            plan = video_level_plan(length, cfg.frames, mode, rng)
        else:
            plan = clip_level_plan(length, cfg.clip_len, cfg.clip_stride,
                                   cfg.frames, mode, rng,
                                   num_eval_clips=cfg.eval_clips)[0]
        clips.append(_gather_frames(video, plan.indices))
        labels.append(dataset.label(i))
    batch = np.stack(clips).astype(np.float32) - INPUT_SHIFT
    return batch, np.asarray(labels, dtype=np.int64)


def _eval_logits(net: Network, dataset: VideoDataset, cfg: TrainConfig,
                 batch_size: int) -> np.ndarray:
    """Deterministic test-mode logits for every dataset row."""
    rows = []
    for start in range(0, len(dataset), batch_size):
        idx = range(start, min(start + batch_size, len(dataset)))
        if cfg.sampling_strategy == "video":
            batch, _ = assemble_batch(dataset, idx, cfg, "test", epoch=0)
            rows.append(net.forward(Tensor(batch), training=False).data)
        else:
            # average scores over evenly spaced evaluation clips
            acc = None
            for clip_no in range(cfg.eval_clips):
                clips = []
                for i in idx:
                    video = dataset.video(i)
                    plans = clip_level_plan(video.shape[1], cfg.clip_len,
                                            cfg.clip_stride, cfg.frames, "test",
                                            num_eval_clips=cfg.eval_clips)
                    clips.append(_gather_frames(video, plans[clip_no].indices))
                batch = np.stack(clips).astype(np.float32) - INPUT_SHIFT
                logits = net.forward(Tensor(batch), training=False).data
                acc = logits if acc is None else acc + logits
            rows.append(acc / cfg.eval_clips)
    return np.concatenate(rows, axis=0)


def evaluate_network(net: Network, dataset: VideoDataset, cfg: TrainConfig,
                     epoch: int, split: str) -> MetricsRow:
    start = time.time()
    logits = _eval_logits(net, dataset, cfg, cfg.batch_size)
    labels = dataset.labels()
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(len(labels)), labels].mean())
    top1, top5, l1 = _score(logits, labels, dataset.grid)
    return MetricsRow(epoch, split, top1, top5, loss, l1,
                      wall_time_s=time.time() - start)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(net: Network, out_dir, extra: Optional[dict] = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params, state = {}, {}
    for n, (name, t) in enumerate(net.named_params()):
        fname = f"param_{n:04d}.tfck"
        write_tensor(out / fname, t.data)
        params[name] = fname
    for n, (name, arr) in enumerate(net.named_state()):
        fname = f"state_{n:04d}.tfck"
        write_tensor(out / fname, arr)
        state[name] = fname
    manifest = {"network": spec_to_dict(net.spec), "params": params,
                "state": state, "extra": extra or {}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(ckpt_dir) -> Tuple[Network, dict]:
    path = Path(ckpt_dir)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"no manifest.json under {path}")
    manifest = json.loads(manifest_path.read_text())
    spec = spec_from_dict(manifest["network"])
    net = build_network(spec, seed=0)
    try:
        params = {name: read_tensor(path / f) for name, f in manifest["params"].items()}
        state = {name: read_tensor(path / f) for name, f in manifest["state"].items()}
        net.load_arrays(params, state)
    except (KeyError, OSError, tt.ShapeError) as exc:
        raise CheckpointError(f"incompatible checkpoint {path}: {exc}") from exc
    return net, manifest.get("extra", {})


# ---------------------------------------------------------------------------
# the training loop
# ---------------------------------------------------------------------------

def _write_metrics(out: Path, rows: List[MetricsRow]) -> None:
    csv_lines = [CSV_HEADER] + [r.csv_line() for r in rows]
    (out / "metrics.csv").write_text("\n".join(csv_lines) + "\n")
    (out / "metrics.json").write_text(
        json.dumps({"rows": [r.public_dict() for r in rows]}, indent=2))
    timing = ["epoch,split,seconds"] + [
        f"{r.epoch},{r.split},{r.wall_time_s:.3f}" for r in rows]
    (out / "timing.csv").write_text("\n".join(timing) + "\n")


def train(cfg: TrainConfig, quiet: bool = False) -> dict:
    """Full training run; returns a summary with the final validation row."""
    tune_allocator()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train_ds = VideoDataset(cfg.dataset, "train")
    val_ds = VideoDataset(cfg.dataset, "val")
    num_classes = cfg.num_classes or train_ds.classes
    if num_classes != train_ds.classes:
        raise DataError(f"config says {num_classes} classes, dataset has "
                        f"{train_ds.classes}")
    spec = cfg.network_spec(num_classes)
    net = build_network(spec, seed=cfg.seed)
    opt = SgdOptimizer(net, cfg.momentum, cfg.weight_decay)

    rows: List[MetricsRow] = []
    lr_log: List[float] = []
    for epoch in range(1, cfg.total_epochs + 1):
        lr = lr_for_epoch(cfg.lr, cfg.lr_drop_epochs, epoch)
        lr_log.append(lr)
        order = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, epoch])).permutation(len(train_ds))
        t0 = time.time()
        losses, logits_all, labels_all = [], [], []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch, labels = assemble_batch(train_ds, idx, cfg, "train", epoch)
            logits = net.forward(Tensor(batch), training=True)
            loss = tt.softmax_cross_entropy(logits, labels)
            if not np.isfinite(float(loss.data)):
                raise NumericalError(f"loss diverged at epoch {epoch}")
            net.zero_grads()
            loss.backward()
            opt.step(lr)
            losses.append(float(loss.data) * len(labels))
            logits_all.append(logits.data)
            labels_all.append(labels)
        top1, top5, l1 = _score(np.concatenate(logits_all),
                                np.concatenate(labels_all), train_ds.grid)
        rows.append(MetricsRow(epoch, "train", top1, top5,
                               sum(losses) / len(order), l1,
                               wall_time_s=time.time() - t0))
        rows.append(evaluate_network(net, val_ds, cfg, epoch, "val"))
        if not quiet:
            tr, va = rows[-2], rows[-1]
            print(f"epoch {epoch:3d}  lr {lr:.4g}  train top1 {tr.top1:.3f} "
                  f"loss {tr.mean_loss:.3f}  val top1 {va.top1:.3f}", flush=True)

    _write_metrics(out, rows)
    (out / "lr_schedule.json").write_text(json.dumps(lr_log))
    save_checkpoint(net, out / "checkpoint",
                    extra={"epochs": cfg.total_epochs, "seed": cfg.seed,
                           "dataset": str(cfg.dataset),
                           "sampling": cfg.sampling_strategy})
    try:
        from .figures import save_training_curves
        save_training_curves(rows, out / "curves.png")
    except Exception as exc:  # figures never block a finished run
        (out / "curves_error.txt").write_text(str(exc))
    final_val = rows[-1]
    return {"out": str(out), "final_val": final_val.public_dict(),
            "rows": [r.public_dict() for r in rows]}


def evaluate_checkpoint(ckpt_dir, dataset_dir, split: str, cfg: TrainConfig,
                        epoch: int = 0) -> MetricsRow:
    """Score a saved network on a dataset split, deterministically."""
    net, _ = load_checkpoint(ckpt_dir)
    dataset = VideoDataset(dataset_dir, split)
    if net.spec.num_classes != dataset.classes:
        raise CheckpointError(
            f"checkpoint has {net.spec.num_classes} classes, dataset has "
            f"{dataset.classes}")
    return evaluate_network(net, dataset, cfg, epoch, split)
