"""Temporal smoothing and multi-model voting of per-frame predictions.

Prediction files hold one comma-separated line per frame::

    video_id,frame_index,label            # expression class
    video_id,frame_index,b0,b1,...,b11    # 12 AU bits

Lines starting with ``#`` are comments.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from mmfusion.checkpoint import atomic_write_bytes
from mmfusion.errors import ConfigError, ContractError, FormatError
from mmfusion.features import MINORITY_CLASSES, NUM_AU, NUM_EXPR


@dataclass
class PredictionSequence:
    """Frame-aligned labels for one video: ``[T]`` class ids or ``[T, 12]`` AU bits."""

    video_id: str
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim not in (1, 2) or len(self.labels) == 0:
            raise ContractError(f"{self.video_id}: prediction sequence must be non-empty [T] or [T, units]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def is_au(self) -> bool:
        return self.labels.ndim == 2


@dataclass
class SmoothingPolicy:
    run_threshold: dict[int, int]
    window_radius: dict[int, int]
    iterate: bool = False
    max_iterations: int = 50

    def __post_init__(self):
        self.run_threshold = {int(k): int(v) for k, v in self.run_threshold.items()}
        self.window_radius = {int(k): int(v) for k, v in self.window_radius.items()}
        if any(v < 1 for v in self.run_threshold.values()) or any(v < 1 for v in self.window_radius.values()):
            raise ConfigError("smoothing thresholds and radii must be >= 1")

    @classmethod
    def for_classes(
        cls,
        classes: Iterable[int] = range(NUM_EXPR),
        minority: Iterable[int] = MINORITY_CLASSES,
        threshold_major: int = 8,
        threshold_minor: int = 4,
        radius_major: int = 15,
        radius_minor: int = 8,
        iterate: bool = False,
    ) -> "SmoothingPolicy":
        minority = set(minority)
        classes = list(classes)
        return cls(
            {c: threshold_minor if c in minority else threshold_major for c in classes},
            {c: radius_minor if c in minority else radius_major for c in classes},
            iterate,
        )

    @classmethod
    def binary(cls, threshold: int = 8, radius: int = 15, iterate: bool = False) -> "SmoothingPolicy":
        return cls({0: threshold, 1: threshold}, {0: radius, 1: radius}, iterate)


def _runs(labels: np.ndarray) -> list[tuple[int, int]]:
    """``(start, stop)`` of maximal constant runs."""
    cuts = np.flatnonzero(labels[1:] != labels[:-1]) + 1
    bounds = np.concatenate([[0], cuts, [len(labels)]])
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def _smooth_once(labels: np.ndarray, policy: SmoothingPolicy) -> np.ndarray:
    out = labels.copy()
    runs = _runs(labels)
    n = len(labels)
    # the first run does not start at a hopping point
    for start, stop in runs[1:]:
        label = int(labels[start])
        if stop - start >= policy.run_threshold[label]:
            continue
        before = int(labels[start - 1])
        radius = policy.window_radius[label]
        for t in range(start, stop):
            lo, hi = max(0, t - radius), min(n, t + radius + 1)
            neighbours = np.concatenate([labels[lo:start], labels[stop:hi]]) if lo < start or hi > stop else labels[:0]
            if len(neighbours) == 0:
                out[t] = before
                continue
            counts = Counter(int(x) for x in neighbours)
            top = max(counts.values())
            tied = [c for c, k in counts.items() if k == top]
            out[t] = before if before in tied else min(tied)
    return out


def _check_policy(labels: np.ndarray, policy: SmoothingPolicy) -> None:
    missing = {int(c) for c in np.unique(labels)} - set(policy.run_threshold)
    missing |= {int(c) for c in np.unique(labels)} - set(policy.window_radius)
    if missing:
        raise ConfigError(f"smoothing policy has no entry for classes {sorted(missing)}")


def smooth_labels(labels, policy: SmoothingPolicy) -> np.ndarray:
    """Replace short runs that follow a label change by the mode of nearby frames.

    A run shorter than its class threshold gets each frame replaced by the
    most common label within ``window_radius`` of that frame, not counting the
    run itself; ties go to the label just before the run, then to the
    smallest label.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or len(labels) == 0:
        raise ContractError("smooth_labels expects a non-empty 1-D sequence")
    _check_policy(labels, policy)
    out = _smooth_once(labels, policy)
    if policy.iterate:
        for _ in range(policy.max_iterations - 1):
            nxt = _smooth_once(out, policy)
            if np.array_equal(nxt, out):
                break
            out = nxt
    return out


def smooth(seq: PredictionSequence, policy: SmoothingPolicy) -> PredictionSequence:
    """Smooth class labels, or each AU channel independently."""
    if seq.is_au:
        cols = [smooth_labels(seq.labels[:, j], policy) for j in range(seq.labels.shape[1])]
        return PredictionSequence(seq.video_id, np.stack(cols, axis=1))
    return PredictionSequence(seq.video_id, smooth_labels(seq.labels, policy))


def vote(predictions: list[PredictionSequence]) -> PredictionSequence:
    """Per-frame majority over models; exact ties go to the earliest model listed."""
    if len(predictions) < 2:
        raise ContractError("need >= 2 prediction sequences to vote")
    first = predictions[0]
    for p in predictions[1:]:
        if p.labels.shape != first.labels.shape:
            raise ContractError(
                f"{p.video_id}: prediction shape {p.labels.shape} does not match {first.labels.shape}"
            )
    stack = np.stack([p.labels for p in predictions])  # [models, T] or [models, T, units]
    if first.is_au:
        ones = stack.sum(axis=0)
        zeros = len(predictions) - ones
        out = np.where(ones > zeros, 1, np.where(zeros > ones, 0, stack[0]))
        return PredictionSequence(first.video_id, out)
    out = np.empty(stack.shape[1], dtype=np.int64)
    for t in range(stack.shape[1]):
        col = [int(x) for x in stack[:, t]]
        counts = Counter(col)
        top = max(counts.values())
        # first model (in list order) whose label reaches the top count
        out[t] = next(c for c in col if counts[c] == top)
    return PredictionSequence(first.video_id, out)


# ---------------------------------------------------------------------------
# prediction files
# ---------------------------------------------------------------------------


def format_predictions(seqs: list[PredictionSequence]) -> str:
    lines = []
    for s in seqs:
        for t, lab in enumerate(s.labels):
            if s.is_au:
                lines.append(f"{s.video_id},{t}," + ",".join(str(int(b)) for b in lab))
            else:
                lines.append(f"{s.video_id},{t},{int(lab)}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_predictions(text: str) -> list[PredictionSequence]:
    rows: dict[str, list[tuple[int, list[int]]]] = {}
    width = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) not in (3, 2 + NUM_AU):
            raise FormatError(f"prediction line {lineno}: expected 3 or {2 + NUM_AU} fields, got {len(parts)}")
        if width is None:
            width = len(parts)
        elif len(parts) != width:
            raise FormatError(f"prediction line {lineno}: mixes EXPR and AU rows")
        try:
            frame = int(parts[1])
            values = [int(x) for x in parts[2:]]
        except ValueError as exc:
            raise FormatError(f"prediction line {lineno}: non-integer field") from exc
        if width > 3 and any(v not in (0, 1) for v in values):
            raise FormatError(f"prediction line {lineno}: AU bits must be 0 or 1")
        rows.setdefault(parts[0], []).append((frame, values))
    out = []
    for vid, items in rows.items():
        items.sort(key=lambda r: r[0])
        frames = [f for f, _ in items]
        if frames != list(range(len(frames))):
            raise FormatError(f"video {vid}: frame indices are not a contiguous 0..T-1 range")
        arr = np.array([v for _, v in items], dtype=np.int64)
        out.append(PredictionSequence(vid, arr[:, 0] if width == 3 else arr))
    return out


def write_predictions(seqs: list[PredictionSequence], path) -> None:
    atomic_write_bytes(path, format_predictions(seqs).encode("utf-8"))


def read_predictions(path) -> list[PredictionSequence]:
    return parse_predictions(Path(path).read_text(encoding="utf-8"))
