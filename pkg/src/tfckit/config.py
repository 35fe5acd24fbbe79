"""Flat key-value run configuration.

Grammar: one ``key = value`` pair per line; ``#`` starts a comment; blank
lines are ignored.  Dotted keys group related settings.  Unknown keys and
malformed values raise :class:`ConfigError`.

Recognized keys (defaults in parentheses):

    lr (0.01)  momentum (0.9)  weight_decay (1e-5)  batch_size (16)
    total_epochs (30)  lr_drop_epochs (15,25)  seed (0)
    dataset (required)  out (runs/latest)
    network.kind (v3d)            tsn | v3d | v3d_depthwise
    network.tfc_policy (none)     none | v3d | tsn
    network.tfc_phase (0)
    network.temporal_length       defaults to sampling.frames
    network.widths (16,32,64,128)
    network.repeats (1,2,2,1)
    network.stem_width (16)
    network.num_classes           defaults to the dataset's class count
    sampling.strategy (video)     video | clip
    sampling.frames (16)          segments (video) or frames per clip plan
    sampling.clip_len (16)
    sampling.stride (2)
    sampling.eval_clips (4)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

from .blocks import NetworkSpec, mini_spec, place_tfc_blocks


class ConfigError(ValueError):
    """Raised for unparseable or inconsistent configuration."""


_DEFAULTS = {
    "lr": "0.01",
    "momentum": "0.9",
    "weight_decay": "1e-5",
    "batch_size": "16",
    "total_epochs": "30",
    "lr_drop_epochs": "15,25",
    "seed": "0",
    "dataset": None,
    "out": "runs/latest",
    "network.kind": "v3d",
    "network.tfc_policy": "none",
    "network.tfc_phase": "0",
    "network.temporal_length": "",
    "network.widths": "16,32,64,128",
    "network.repeats": "1,2,2,1",
    "network.stem_width": "16",
    "network.num_classes": "",
    "sampling.strategy": "video",
    "sampling.frames": "16",
    "sampling.clip_len": "16",
    "sampling.stride": "2",
    "sampling.eval_clips": "4",
}


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 16
    total_epochs: int = 30
    lr_drop_epochs: Tuple[int, ...] = (15, 25)
    seed: int = 0
    dataset: str = ""
    out: str = "runs/latest"
    network_kind: str = "v3d"
    tfc_policy: str = "none"
    tfc_phase: int = 0
    temporal_length: Optional[int] = None
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    repeats: Tuple[int, ...] = (1, 2, 2, 1)
    stem_width: int = 16
    num_classes: Optional[int] = None
    sampling_strategy: str = "video"
    sampling_frames: int = 16
    clip_len: int = 16
    clip_stride: int = 2
    eval_clips: int = 4

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.total_epochs < 1:
            raise ConfigError("batch_size and total_epochs must be >= 1")
        drops = tuple(self.lr_drop_epochs)
        if list(drops) != sorted(set(drops)):
            raise ConfigError(f"lr_drop_epochs must be strictly ascending, got {drops}")
        if drops and drops[-1] >= self.total_epochs:
            raise ConfigError("lr drops must come before the final epoch")
        if drops and drops[0] < 1:
            raise ConfigError("lr drop epochs are 1-based")
        if self.sampling_strategy not in ("video", "clip"):
            raise ConfigError(f"unknown sampling strategy {self.sampling_strategy!r}")
        if self.network_kind not in ("tsn", "v3d", "v3d_depthwise"):
            raise ConfigError(f"unknown network kind {self.network_kind!r}")
        if self.tfc_policy not in ("none", "v3d", "tsn"):
            raise ConfigError(f"unknown tfc policy {self.tfc_policy!r}")
        if self.temporal_length is not None and self.temporal_length != self.sampling_frames:
            raise ConfigError(
                f"network.temporal_length ({self.temporal_length}) must match "
                f"sampling.frames ({self.sampling_frames})")

    @property
    def frames(self) -> int:
        return self.sampling_frames

    def network_spec(self, num_classes: int) -> NetworkSpec:
        spec = mini_spec(self.network_kind, temporal_length=self.frames,
                         num_classes=num_classes, widths=self.widths,
                         repeats=self.repeats, stem_width=self.stem_width)
        return place_tfc_blocks(spec, self.tfc_policy, phase=self.tfc_phase)


def _parse_int_list(raw: str, key: str) -> Tuple[int, ...]:
    try:
        return tuple(int(x.strip()) for x in raw.split(",") if x.strip() != "")
    except ValueError as exc:
        raise ConfigError(f"{key}: expected comma-separated integers, got {raw!r}") from exc


def _convert(key: str, raw: str):
    int_keys = {"batch_size", "total_epochs", "seed", "network.tfc_phase",
                "network.stem_width", "sampling.frames", "sampling.clip_len",
                "sampling.stride", "sampling.eval_clips"}
    float_keys = {"lr", "momentum", "weight_decay"}
    list_keys = {"lr_drop_epochs", "network.widths", "network.repeats"}
    try:
        if key in int_keys:
            return int(raw)
        if key in float_keys:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from exc
    if key in list_keys:
        return _parse_int_list(raw, key)
    return raw


def parse_config_text(text: str, overrides: Optional[dict] = None,
                      require_dataset: bool = True) -> TrainConfig:
    values = dict(_DEFAULTS)
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in _DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = raw
    if overrides:
        for key, raw in overrides.items():
            if key not in _DEFAULTS:
                raise ConfigError(f"unknown override {key!r}")
            values[key] = raw
    if require_dataset and not values["dataset"]:
        raise ConfigError("dataset path is required")
    return TrainConfig(
        lr=_convert("lr", values["lr"]),
        momentum=_convert("momentum", values["momentum"]),
        weight_decay=_convert("weight_decay", values["weight_decay"]),
        batch_size=_convert("batch_size", values["batch_size"]),
        total_epochs=_convert("total_epochs", values["total_epochs"]),
        lr_drop_epochs=_convert("lr_drop_epochs", values["lr_drop_epochs"]),
        seed=_convert("seed", values["seed"]),
        dataset=values["dataset"] or "",
        out=values["out"],
        network_kind=values["network.kind"],
        tfc_policy=values["network.tfc_policy"],
        tfc_phase=_convert("network.tfc_phase", values["network.tfc_phase"]),
        temporal_length=(int(values["network.temporal_length"])
                         if str(values["network.temporal_length"]).strip() else None),
        widths=_convert("network.widths", values["network.widths"]),
        repeats=_convert("network.repeats", values["network.repeats"]),
        stem_width=_convert("network.stem_width", values["network.stem_width"]),
        num_classes=(int(values["network.num_classes"])
                     if str(values["network.num_classes"]).strip() else None),
        sampling_strategy=values["sampling.strategy"],
        sampling_frames=_convert("sampling.frames", values["sampling.frames"]),
        clip_len=_convert("sampling.clip_len", values["sampling.clip_len"]),
        clip_stride=_convert("sampling.stride", values["sampling.stride"]),
        eval_clips=_convert("sampling.eval_clips", values["sampling.eval_clips"]),
    )


def load_config(path, overrides: Optional[dict] = None,
                require_dataset: bool = True) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(), overrides, require_dataset)
