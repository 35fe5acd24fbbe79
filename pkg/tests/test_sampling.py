"""Frame-index planners: hand-enumerated plans, determinism, coverage."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tfckit.sampling import (InsufficientFramesError, SampleIndexPlan,
                             clip_level_plan, plan_crop, video_level_plan)


def enumerate_segment_centers(length, t):
    """Oracle: walk the segment boundaries and pick each center by hand."""
    out = []
    for i in range(t):
        start = (i * length) // t
        end = ((i + 1) * length) // t
        seg = list(range(start, end))
        out.append(seg[(len(seg) - 1) // 2])
    return out


class TestVideoLevel:
    def test_one_frame_segments(self):
        plan = video_level_plan(32, 32, "test")
        assert plan.indices == tuple(range(32))

    def test_300_frames_4_segments(self):
        plan = video_level_plan(300, 4, "test")
        assert plan.indices == (37, 112, 187, 262)
        assert plan.indices == tuple(enumerate_segment_centers(300, 4))

    def test_300_frames_32_segments_vs_oracle(self):
        plan = video_level_plan(300, 32, "test")
        assert plan.indices == tuple(enumerate_segment_centers(300, 32))

    def test_divisible_case_formula(self):
        length, t = 64, 16
        seg = length // t
        plan = video_level_plan(length, t, "test")
        assert plan.indices == tuple(i * seg + (seg - 1) // 2 for i in range(t))

    def test_train_indices_in_segments_and_reproducible(self):
        a = video_level_plan(300, 32, "train", np.random.default_rng(7))
        b = video_level_plan(300, 32, "train", np.random.default_rng(7))
        assert a.indices == b.indices
        for i, idx in enumerate(a.indices):
            assert (i * 300) // 32 <= idx < ((i + 1) * 300) // 32

    def test_insufficient_frames(self):
        with pytest.raises(InsufficientFramesError):
            video_level_plan(3, 4, "test")

    def test_train_requires_rng(self):
        with pytest.raises(ValueError):
            video_level_plan(10, 2, "train")

    @given(st.integers(1, 400), st.integers(1, 64), st.integers(0, 2**31 - 1))
    @settings(max_examples=80, deadline=None)
    def test_coverage_and_order(self, length, t, seed):
        if length < t:
            return
        for mode, rng in (("test", None), ("train", np.random.default_rng(seed))):
            plan = video_level_plan(length, t, mode, rng)
            idx = plan.indices
            assert len(idx) == t
            assert all(0 <= i < length for i in idx)
            assert all(a <= b for a, b in zip(idx, idx[1:]))
            assert min(idx) < length / t
            assert max(idx) >= length * (t - 1) / t - 1


class TestClipLevel:
    def test_train_is_arithmetic_sequence(self):
        rng = np.random.default_rng(3)
        (plan,) = clip_level_plan(200, 16, 2, 8, "train", rng)
        diffs = {b - a for a, b in zip(plan.indices, plan.indices[1:])}
        assert diffs == {2}
        assert plan.strategy == "clip"

    def test_short_video_clamps(self):
        (plan,) = clip_level_plan(10, 16, 2, 8, "train", np.random.default_rng(0))
        assert plan.indices == (0, 2, 4, 6, 8, 9, 9, 9)

    def test_eval_clip_starts_evenly_spaced(self):
        plans = clip_level_plan(100, 16, 2, 8, "test", num_eval_clips=4)
        assert [p.indices[0] for p in plans] == [0, 28, 56, 84]

    def test_single_eval_clip_centered(self):
        (plan,) = clip_level_plan(100, 16, 2, 8, "test", num_eval_clips=1)
        assert plan.indices[0] == 42

    def test_train_reproducible(self):
        a = clip_level_plan(99, 16, 2, 8, "train", np.random.default_rng(5))
        b = clip_level_plan(99, 16, 2, 8, "train", np.random.default_rng(5))
        assert a[0].indices == b[0].indices


class TestCropPlanning:
    def test_center_crop(self):
        assert plan_crop(36, 36, 32, "test") == (2, 2)
        assert plan_crop(32, 32, 32, "test") == (0, 0)

    def test_random_crop_in_bounds(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            top, left = plan_crop(36, 40, 32, "train", rng)
            assert 0 <= top <= 4 and 0 <= left <= 8

    def test_crop_too_large(self):
        with pytest.raises(ValueError):
            plan_crop(16, 16, 32, "test")


def test_plan_json_round_trip():
    import json
    plan = video_level_plan(300, 4, "test")
    assert json.loads(plan.to_json()) == [37, 112, 187, 262]
