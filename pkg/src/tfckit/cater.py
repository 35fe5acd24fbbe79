"""Procedural snitch-localization benchmark.

A G by G grid world: a golden marker object (the snitch) slides between
cells, gets covered by a box, may be carried around while hidden, and the
classification target is the cell it occupies in the final frame.  Every
video shares the same floor and the same small sprite vocabulary, so no
single frame gives the label away on the hard split: the answer requires
following the whole video.

Difficulties:

* ``easy``  the snitch is visible in the last frame and the label is
  simply where it sits.
* ``hard``  a box covers the snitch and then moves at least once while
  covering it (carrying the hidden snitch along); the snitch stays hidden
  for at least the final quarter of the video and its final cell differs
  from the cell where it was last visible.

Scripts are simulated in cell coordinates; rendering draws flat sprites
back to front (floor, grid lines, distractors, snitch, boxes), so a box on
the snitch's cell genuinely occludes it.  Everything is a pure function of
the generator seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .container import read_tensor, write_tensor


class GenerationError(RuntimeError):
    """Raised when constraint retries are exhausted."""


class DataError(RuntimeError):
    """Raised for malformed or missing dataset files."""


SNITCH_COLOR = (1.0, 0.84, 0.0)
BOX_COLORS = [(0.85, 0.15, 0.15), (0.2, 0.35, 0.9), (0.15, 0.65, 0.25),
              (0.6, 0.2, 0.7), (0.1, 0.6, 0.65)]
DISTRACTOR_COLORS = [(0.55, 0.55, 0.6), (0.8, 0.45, 0.15), (0.35, 0.25, 0.2)]
FLOOR_VALUE = 0.12
GRID_VALUE = 0.22

KINDS = ("snitch", "cone", "box", "ball")
ACTIONS = ("slide", "cover", "carry", "uncover")


@dataclass(frozen=True)
class SceneObject:
    oid: int
    kind: str
    color_index: int
    size: float  # fraction of a cell

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown object kind {self.kind!r}")


@dataclass(frozen=True)
class SceneEvent:
    start: int
    end: int          # arrival frame; the actor is at the target from here on
    actor: int
    action: str
    target_cell: int

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValueError(f"unknown action {self.action!r}")
        if self.end <= self.start:
            raise ValueError("event must span at least one frame")


@dataclass
class SceneScript:
    grid: int
    num_frames: int
    objects: List[SceneObject]
    start_cells: List[int]
    events: List[SceneEvent]

    def __post_init__(self):
        per_actor: Dict[int, int] = {}
        for ev in sorted(self.events, key=lambda e: (e.start, e.actor)):
            if ev.start < per_actor.get(ev.actor, 0):
                raise ValueError(f"overlapping events for actor {ev.actor}")
            per_actor[ev.actor] = ev.end
        for cell in self.start_cells:
            if not 0 <= cell < self.grid ** 2:
                raise ValueError(f"start cell {cell} outside grid")

    # -- simulation --------------------------------------------------------

    def simulate(self):
        """Per-frame object centers (cell units), snitch visibility, and the
        oid of whatever box covers the snitch (-1 when visible)."""
        g, n, L = self.grid, len(self.objects), self.num_frames
        centers = np.zeros((n, L, 2), dtype=np.float64)
        for i, cell in enumerate(self.start_cells):
            centers[i, :, 0] = cell % g + 0.5
            centers[i, :, 1] = cell // g + 0.5
        covered_by = np.full(L, -1, dtype=np.int64)
        events = sorted(self.events, key=lambda e: (e.start, e.actor))
        snitch = next(o.oid for o in self.objects if o.kind == "snitch")
        for ev in events:
            a = ev.actor
            tx, ty = ev.target_cell % g + 0.5, ev.target_cell // g + 0.5
            x0, y0 = centers[a, ev.start]
            span = ev.end - ev.start
            for f in range(ev.start, L):
                alpha = min(1.0, (f - ev.start) / span)
                centers[a, f] = (x0 + alpha * (tx - x0), y0 + alpha * (ty - y0))
        # coverage transitions and carried motion, in time order
        timeline: List[Tuple[int, str, SceneEvent]] = []
        for ev in events:
            if ev.action == "cover":
                timeline.append((ev.end, "cover", ev))
            elif ev.action == "uncover":
                timeline.append((ev.start, "uncover", ev))
        timeline.sort(key=lambda entry: (entry[0], entry[1]))
        for frame, what, ev in timeline:
            if what == "cover":
                covered_by[frame:] = ev.actor
            else:
                covered_by[frame:] = -1
        # while covered the snitch rides its box; when uncovered it stays
        # wherever the box dropped it
        dropped = None
        for f in range(L):
            if covered_by[f] >= 0:
                centers[snitch, f] = centers[covered_by[f], f]
                dropped = centers[snitch, f].copy()
            elif dropped is not None:
                centers[snitch, f] = dropped
        return centers, covered_by

    def snitch_cell(self, frame: int) -> int:
        centers, _ = self.simulate()
        snitch = next(o.oid for o in self.objects if o.kind == "snitch")
        x, y = centers[snitch, frame]
        return int(y) * self.grid + int(x)

    @property
    def label(self) -> int:
        return self.snitch_cell(self.num_frames - 1)

    def to_dict(self) -> dict:
        return {
            "grid": self.grid,
            "num_frames": self.num_frames,
            "objects": [[o.oid, o.kind, o.color_index, o.size] for o in self.objects],
            "start_cells": list(self.start_cells),
            "events": [[e.start, e.end, e.actor, e.action, e.target_cell]
                       for e in self.events],
        }

    def content_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class RenderedVideo:
    frames: np.ndarray  # (3, L, H, W) float32 in [0, 1]
    label: int
    script_hash: str


# ---------------------------------------------------------------------------
# script generation
# ---------------------------------------------------------------------------

def _random_other_cell(rng, g: int, avoid) -> int:
    avoid = set(avoid)
    while True:
        cell = int(rng.integers(0, g * g))
        if cell not in avoid:
            return cell


def generate_script(rng: np.random.Generator, difficulty: str, grid: int = 4,
                    num_frames: int = 64) -> SceneScript:
    """One random script honoring the difficulty contract."""
    if difficulty not in ("easy", "hard"):
        raise ValueError(f"difficulty must be easy or hard, got {difficulty!r}")
    g, L = grid, num_frames
    if L < 32:
        raise ValueError("scripts need at least 32 frames")

    objects = [SceneObject(0, "snitch", 0, 0.55)]
    capacity = g * g  # distinct start cells
    n_boxes = max(1, min(int(rng.integers(2, 4)), capacity - 2))
    for i in range(n_boxes):
        objects.append(SceneObject(len(objects), "box", i % len(BOX_COLORS), 0.8))
    for i, kind in enumerate(("ball", "cone")):
        if len(objects) >= capacity:
            break
        objects.append(SceneObject(len(objects), kind, i % len(DISTRACTOR_COLORS),
                                   0.45 if kind == "ball" else 0.6))

    cells = list(rng.choice(g * g, size=len(objects), replace=False))
    start_cells = [int(c) for c in cells]
    events: List[SceneEvent] = []
    snitch_cell = start_cells[0]

    # the snitch wanders first
    cursor = int(rng.integers(2, 6))
    n_slides = int(rng.integers(2, 4)) if difficulty == "easy" else int(rng.integers(1, 3))
    slide_deadline = L - 8 if difficulty == "easy" else int(0.45 * L)
    for _ in range(n_slides):
        span = int(rng.integers(7, 13))
        if cursor + span > slide_deadline:
            break
        target = _random_other_cell(rng, g, [snitch_cell])
        events.append(SceneEvent(cursor, cursor + span, 0, "slide", target))
        snitch_cell = target
        cursor = cursor + span + int(rng.integers(1, 5))

    cover_box = None
    if difficulty == "hard":
        cover_box = 1  # first box carries the plot
        hide_deadline = (3 * L) // 4  # hidden for at least the final quarter
        approach = int(rng.integers(6, 11))
        start = max(cursor, int(rng.integers(int(0.3 * L), int(0.5 * L))), 1)
        if start + approach > hide_deadline:
            raise GenerationError("cover would arrive too late to stay hidden")
        events.append(SceneEvent(start, start + approach, cover_box, "cover",
                                 snitch_cell))
        covered_at = snitch_cell
        cursor = start + approach + int(rng.integers(1, 4))
        n_carries = int(rng.integers(1, 4))
        cell = covered_at
        for i in range(n_carries):
            span = int(rng.integers(6, 11))
            if cursor + span > L - 2:
                break
            last = i == n_carries - 1 or cursor + span + 7 > L - 2
            avoid = [cell, covered_at] if last else [cell]
            target = _random_other_cell(rng, g, avoid)
            events.append(SceneEvent(cursor, cursor + span, cover_box, "carry", target))
            cell = target
            cursor += span + int(rng.integers(1, 4))
        if cell == covered_at:  # no carry fit; force one short hop
            end = min(cursor + 6, L - 1)
            if end <= cursor:
                raise GenerationError("no room left for a carry")
            target = _random_other_cell(rng, g, [covered_at])
            events.append(SceneEvent(cursor, end, cover_box, "carry", target))
            cell = target
        final_cell = cell
    else:
        final_cell = snitch_cell

    # distractors (and non-plot boxes) wander on their own timelines
    for obj in objects[1:]:
        if obj.oid == cover_box:
            continue
        t = int(rng.integers(3, 10))
        pos = start_cells[obj.oid]
        end_guard = L - 6 if difficulty == "easy" else L - 2
        for _ in range(int(rng.integers(1, 4))):
            span = int(rng.integers(7, 13))
            if t + span > end_guard:
                break
            avoid = {pos}
            if difficulty == "easy" and obj.kind == "box":
                avoid.add(final_cell)  # keep the last frame unoccluded
            if difficulty == "hard":
                avoid.add(final_cell)  # do not stack on the plot box
            target = _random_other_cell(rng, g, avoid)
            events.append(SceneEvent(t, t + span, obj.oid, "slide", target))
            pos = target
            t += span + int(rng.integers(2, 6))

    script = SceneScript(grid=g, num_frames=L, objects=objects,
                         start_cells=start_cells, events=events)
    _check_difficulty(script, difficulty)
    return script


def _check_difficulty(script: SceneScript, difficulty: str) -> None:
    centers, covered = script.simulate()
    L = script.num_frames
    if difficulty == "easy":
        if covered[L - 1] >= 0:
            raise GenerationError("easy script ended covered")
        snitch = next(o.oid for o in script.objects if o.kind == "snitch")
        for obj in script.objects:
            if obj.kind != "box":
                continue
            gap = np.abs(centers[obj.oid, L - 1] - centers[snitch, L - 1])
            if float(gap.max()) < 0.8:
                raise GenerationError("a box rests on the snitch in the last frame")
        return
    hidden = covered >= 0
    if not hidden[L - 1]:
        raise GenerationError("hard script ended visible")
    if not bool(hidden[(3 * L) // 4:].all()):
        raise GenerationError("hard script not hidden for the final quarter")
    visible_frames = np.where(~hidden)[0]
    last_visible = int(visible_frames[-1])
    if script.snitch_cell(last_visible) == script.label:
        raise GenerationError("hard script is still inferable from the last "
                              "visible position")


def generate_balanced_script(rng: np.random.Generator, difficulty: str,
                             target_cell: int, grid: int = 4, num_frames: int = 64,
                             max_tries: int = 1000) -> SceneScript:
    """Rejection-sample scripts until the final cell matches ``target_cell``."""
    for _ in range(max_tries):
        try:
            script = generate_script(rng, difficulty, grid, num_frames)
        except GenerationError:
            continue
        if script.label == target_cell:
            return script
    raise GenerationError(
        f"no script with final cell {target_cell} in {max_tries} tries")


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _draw(canvas: np.ndarray, mask: np.ndarray, color) -> None:
    for ch in range(3):
        canvas[ch][mask] = color[ch]


def _object_color(obj: SceneObject):
    if obj.kind == "snitch":
        return SNITCH_COLOR
    if obj.kind == "box":
        return BOX_COLORS[obj.color_index]
    return DISTRACTOR_COLORS[obj.color_index]


def render(script: SceneScript, height: int = 32, width: int = 32) -> RenderedVideo:
    """Rasterize a script to (3, L, H, W) float32 frames in [0, 1]."""
    g, L = script.grid, script.num_frames
    if height < 4 * g or width < 4 * g:
        raise ValueError(f"canvas {height}x{width} too small for a {g}x{g} grid")
    cell_h, cell_w = height / g, width / g
    yy, xx = np.mgrid[0:height, 0:width]
    yc, xc = yy + 0.5, xx + 0.5

    floor = np.full((3, height, width), FLOOR_VALUE, dtype=np.float32)
    for i in range(g + 1):
        r = min(int(round(i * height / g)), height - 1)
        c = min(int(round(i * width / g)), width - 1)
        floor[:, r, :] = GRID_VALUE
        floor[:, :, c] = GRID_VALUE

    centers, covered = script.simulate()
    snitch = next(o.oid for o in script.objects if o.kind == "snitch")
    order = ([o for o in script.objects if o.kind in ("ball", "cone")]
             + [o for o in script.objects if o.kind == "snitch"]
             + [o for o in script.objects if o.kind == "box"])

    frames = np.empty((3, L, height, width), dtype=np.float32)
    for f in range(L):
        canvas = floor.copy()
        for obj in order:
            if obj.oid == snitch and covered[f] >= 0:
                continue  # occluded objects are not drawn
            cx = centers[obj.oid, f, 0] * cell_w
            cy = centers[obj.oid, f, 1] * cell_h
            s = obj.size * min(cell_h, cell_w)
            if obj.kind == "box":
                mask = (np.abs(xc - cx) <= s / 2) & (np.abs(yc - cy) <= s / 2)
            elif obj.kind == "cone":
                half = s / 2
                rel = (yc - (cy - half)) / s
                mask = (rel >= 0) & (rel <= 1) & (np.abs(xc - cx) <= rel * half)
            else:  # ball or snitch
                mask = (xc - cx) ** 2 + (yc - cy) ** 2 <= (s / 2) ** 2
            _draw(canvas, mask, _object_color(obj))
        frames[:, f] = canvas
    return RenderedVideo(frames=frames, label=script.label,
                         script_hash=script.content_hash())


def last_frame_oracle(frames: np.ndarray, grid: int) -> Optional[int]:
    """Static baseline: the cell under visible snitch pixels in the final
    frame, or None when the snitch is not visible there."""
    last = frames[:, -1]
    r, gch, b = last[0], last[1], last[2]
    mask = (np.abs(r - SNITCH_COLOR[0]) < 0.1) & \
           (np.abs(gch - SNITCH_COLOR[1]) < 0.15) & (b < 0.2)
    if not mask.any():
        return None
    ys, xs = np.nonzero(mask)
    h, w = last.shape[1:]
    col = int(xs.mean() / (w / grid))
    row = int(ys.mean() / (h / grid))
    return min(row, grid - 1) * grid + min(col, grid - 1)


# ---------------------------------------------------------------------------
# dataset export / load
# ---------------------------------------------------------------------------

def _video_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def export_dataset(out_dir, n_train: int = 512, n_val: int = 128, grid: int = 4,
                   num_frames: int = 64, height: int = 32, width: int = 32,
                   difficulty: str = "hard", seed: int = 0,
                   progress=None) -> dict:
    """Write one container per video plus ``manifest.json``.

    Labels cycle over a seed-shuffled class list per split, with rejection
    sampling inside each video's own stream, so regenerating any entry from
    its manifest seed is bit-identical and every class appears.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    classes = grid * grid
    master = np.random.default_rng(seed)
    items = []
    index = 0
    for split, count in (("train", n_train), ("val", n_val)):
        targets = master.permutation(classes)
        for i in range(count):
            target = int(targets[i % classes])
            vseed = _video_seed(seed, index)
            script = generate_balanced_script(np.random.default_rng(vseed),
                                              difficulty, target, grid, num_frames)
            video = render(script, height, width)
            fname = f"{split}_{i:05d}.tfck"
            try:
                write_tensor(out / fname, video.frames)
            except OSError as exc:
                raise DataError(f"cannot write {out / fname}: {exc}") from exc
            items.append({"id": f"{split}_{i:05d}", "file": fname,
                          "label": video.label, "split": split,
                          "difficulty": difficulty, "seed": vseed,
                          "frames": num_frames, "height": height, "width": width,
                          "script_hash": video.script_hash})
            index += 1
            if progress is not None:
                progress(index, n_train + n_val)
    manifest = {"grid": grid, "classes": classes, "frames": num_frames,
                "height": height, "width": width, "difficulty": difficulty,
                "seed": seed, "items": items}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def regenerate_video(vseed: int, label: int, difficulty: str, grid: int,
                     num_frames: int, height: int, width: int) -> RenderedVideo:
    """Rebuild one exported video from its manifest entry."""
    script = generate_balanced_script(np.random.default_rng(vseed), difficulty,
                                      label, grid, num_frames)
    return render(script, height, width)


class VideoDataset:
    """Reader over an exported directory; videos load on demand."""

    def __init__(self, root, split: str, cache: bool = True):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise DataError(f"no manifest.json under {self.root}")
        self.manifest = json.loads(manifest_path.read_text())
        self.items = [it for it in self.manifest["items"] if it["split"] == split]
        if not self.items:
            raise DataError(f"split {split!r} is empty in {manifest_path}")
        self.grid = self.manifest["grid"]
        self.classes = self.manifest["classes"]
        self.num_frames = self.manifest["frames"]
        self._cache: Optional[list] = [None] * len(self.items) if cache else None

    def __len__(self) -> int:
        return len(self.items)

    def label(self, i: int) -> int:
        return self.items[i]["label"]

    def labels(self) -> np.ndarray:
        return np.array([it["label"] for it in self.items], dtype=np.int64)

    def video(self, i: int) -> np.ndarray:
        if self._cache is not None and self._cache[i] is not None:
            return self._cache[i]
        path = self.root / self.items[i]["file"]
        try:
            frames = read_tensor(path)
        except OSError as exc:
            raise DataError(f"cannot read {path}: {exc}") from exc
        if self._cache is not None:
            self._cache[i] = frames
        return frames
