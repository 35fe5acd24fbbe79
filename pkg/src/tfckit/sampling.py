"""Frame-index planning for training and inference.

Video-level planning divides the whole video into T segments and takes one
frame per segment: a random one while training, the segment center at test
time.  Clip-level planning takes a contiguous strided window from one
position instead.  Both are pure functions of their arguments; all
randomness comes through an explicit generator so parallel data loading
stays reproducible.

Spatial augmentation is planned here too, as crop offsets; the data
generator emits fixed-size frames, so cropping is the only spatial choice
to make.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

MODES = ("train", "test")


class InsufficientFramesError(ValueError):
    """Raised when a video is too short for the requested plan."""


@dataclass(frozen=True)
class SampleIndexPlan:
    indices: Tuple[int, ...]
    mode: str
    strategy: str

    def to_json(self) -> str:
        return json.dumps(list(self.indices))


def _check_mode(mode: str, rng) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "train" and rng is None:
        raise ValueError("train mode requires an rng")


def video_level_plan(video_length: int, t: int, mode: str,
                     rng: Optional[np.random.Generator] = None) -> SampleIndexPlan:
    """One frame per segment over the whole duration.

    Segment i spans [floor(i*L/T), floor((i+1)*L/T)); its center is
    start + (len-1)//2.
    """
    _check_mode(mode, rng)
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    if video_length < t:
        raise InsufficientFramesError(
            f"video of {video_length} frames cannot fill {t} segments")
    indices = []
    for i in range(t):
        start = i * video_length // t
        end = (i + 1) * video_length // t
        if mode == "train":
            indices.append(int(rng.integers(start, end)))
        else:
            indices.append(start + (end - start - 1) // 2)
    return SampleIndexPlan(tuple(indices), mode, "video")


def clip_level_plan(video_length: int, clip_len: int, stride: int, t: int,
                    mode: str, rng: Optional[np.random.Generator] = None,
                    num_eval_clips: int = 4) -> List[SampleIndexPlan]:
    """Strided windows from a contiguous clip.

    Training returns a single plan from a random clip start; testing
    returns ``num_eval_clips`` plans with starts evenly spaced over the
    duration.  Indices past the end clamp to the last frame, so short
    videos never loop.
    """
    _check_mode(mode, rng)
    if video_length < 1:
        raise InsufficientFramesError("empty video")
    if clip_len < 1 or stride < 1 or t < 1:
        raise ValueError("clip_len, stride and t must all be >= 1")
    slack = max(0, video_length - clip_len)

    def window(start: int) -> SampleIndexPlan:
        indices = tuple(min(start + i * stride, video_length - 1) for i in range(t))
        return SampleIndexPlan(indices, mode, "clip")

    if mode == "train":
        return [window(int(rng.integers(0, slack + 1)))]
    if num_eval_clips < 1:
        raise ValueError("num_eval_clips must be >= 1")
    if num_eval_clips == 1:
        return [window(slack // 2)]
    starts = [round(i * slack / (num_eval_clips - 1)) for i in range(num_eval_clips)]
    return [window(s) for s in starts]


def plan_crop(height: int, width: int, crop: int, mode: str,
              rng: Optional[np.random.Generator] = None) -> Tuple[int, int]:
    """Top-left offset of a square crop: random in train, centered in test."""
    _check_mode(mode, rng)
    if crop > height or crop > width:
        raise ValueError(f"crop {crop} exceeds frame {height}x{width}")
    if mode == "train":
        return (int(rng.integers(0, height - crop + 1)),
                int(rng.integers(0, width - crop + 1)))
    return ((height - crop) // 2, (width - crop) // 2)
