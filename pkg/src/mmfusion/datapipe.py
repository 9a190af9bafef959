"""Class-imbalance handling: per-video resampling, remix, and video-level folds."""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

from mmfusion.checkpoint import atomic_write_bytes
from mmfusion.errors import ConfigError, ContractError, FormatError
from mmfusion.features import MINORITY_CLASSES, Video


class FrameRef(NamedTuple):
    video: int
    frame: int


def resample(
    videos: list[Video],
    n_minor: int = 200,
    n_major: int = 50,
    rng_seed: int = 0,
    minority: frozenset[int] = MINORITY_CLASSES,
) -> list[FrameRef]:
    """Cap the frames kept per (video, expression class).

    Classes in ``minority`` are capped at ``n_minor``, all others at
    ``n_major``. Over-full classes are subsampled uniformly without
    replacement; frames without an expression label are kept.
    """
    if n_minor <= 0 or n_major <= 0:
        raise ConfigError(f"resampling caps must be positive, got {n_minor}/{n_major}")
    rng = np.random.default_rng(rng_seed)
    refs: list[FrameRef] = []
    for vi, video in enumerate(videos):
        if video.expr_labels is None:
            refs.extend(FrameRef(vi, f) for f in range(len(video)))
            continue
        labels = np.asarray(video.expr_labels)
        keep = [np.flatnonzero(labels < 0)]
        for c in np.unique(labels[labels >= 0]):
            idx = np.flatnonzero(labels == c)
            cap = n_minor if int(c) in minority else n_major
            if len(idx) > cap:
                idx = np.sort(rng.choice(idx, size=cap, replace=False))
            keep.append(idx)
        refs.extend(FrameRef(vi, int(f)) for f in np.sort(np.concatenate(keep)))
    return refs


def class_counts(videos: list[Video], refs: list[FrameRef]) -> Counter:
    counts: Counter = Counter()
    for v, f in refs:
        labels = videos[v].expr_labels
        if labels is not None and labels[f] >= 0:
            counts[int(labels[f])] += 1
    return counts


def remix_label_weight(n_i: float, n_j: float, lam: float, kappa: float = 3.0, tau: float = 0.5) -> float:
    """Label mixing weight for the pair; the rarer class wins lopsided mixes.

    A zero count is read as "infinitely rare" (with a warning) rather than
    divided by.
    """
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must lie in [0, 1], got {lam}")
    if n_i < 0 or n_j < 0:
        raise ContractError("class counts must be nonnegative")
    if n_i == 0 or n_j == 0:
        warnings.warn(f"zero class count in remix ratio ({n_i}/{n_j})", RuntimeWarning, stacklevel=2)
        if n_i == n_j:
            ratio = 1.0
        else:
            ratio = math.inf if n_j == 0 else 0.0
    else:
        ratio = n_i / n_j
    if ratio >= kappa and lam < tau:
        return 0.0
    if ratio <= 1.0 / kappa and 1.0 - lam < tau:
        return 1.0
    return lam


def remix(
    x_i: Mapping[str, np.ndarray] | np.ndarray,
    x_j: Mapping[str, np.ndarray] | np.ndarray,
    y_i: np.ndarray,
    y_j: np.ndarray,
    counts: Mapping[int, int],
    lam: float,
    kappa: float = 3.0,
    tau: float = 0.5,
):
    """Mix two samples; return ``(x_new, y_new)``.

    ``x_i``/``x_j`` are arrays or dicts of arrays (static feature and each
    modality window); every entry is mixed with ``lam``. Labels are one-hot
    rows and the class of each is its argmax.
    """
    y_i = np.asarray(y_i, dtype=np.float64)
    y_j = np.asarray(y_j, dtype=np.float64)
    if y_i.shape != y_j.shape:
        raise ContractError("label shapes differ")
    lam_y = remix_label_weight(counts.get(int(np.argmax(y_i)), 0), counts.get(int(np.argmax(y_j)), 0), lam, kappa, tau)
    if isinstance(x_i, Mapping):
        if set(x_i) != set(x_j):
            raise ContractError("feature records have different fields")
        x_new = {k: _mix(x_i[k], x_j[k], lam) for k in x_i}
    else:
        x_new = _mix(x_i, x_j, lam)
    return x_new, lam_y * y_i + (1.0 - lam_y) * y_j


def _mix(a, b, lam: float) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ContractError(f"cannot mix shapes {a.shape} and {b.shape}")
    return (lam * a + (1.0 - lam) * b).astype(a.dtype)


@dataclass
class RemixParams:
    alpha: float = 1.0
    kappa: float = 3.0
    tau: float = 0.5
    p_mix: float = 0.5


def remix_batch(
    inputs: dict[str, np.ndarray],
    targets: np.ndarray,
    classes: np.ndarray,
    counts: Mapping[int, int],
    rng: np.random.Generator,
    params: RemixParams,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Apply remix to each sample with probability ``p_mix``.

    ``inputs`` maps field name to ``[B, ...]`` arrays, ``targets`` is
    ``[B, C]`` and ``classes`` is the count class of each sample (or -1 for
    plain mixup on that pair). Partners come from a random permutation of the
    batch and ``lambda ~ Beta(alpha, alpha)``.
    """
    B = len(targets)
    partner = rng.permutation(B)
    lams = rng.beta(params.alpha, params.alpha, size=B)
    chosen = rng.random(B) < params.p_mix
    out_x = {k: v.copy() for k, v in inputs.items()}
    out_y = np.asarray(targets, dtype=np.float64).copy()
    for b in np.flatnonzero(chosen):
        j = partner[b]
        lam = float(lams[b])
        if classes[b] >= 0 and classes[j] >= 0:
            lam_y = remix_label_weight(counts.get(int(classes[b]), 0), counts.get(int(classes[j]), 0), lam, params.kappa, params.tau)
        else:
            lam_y = lam
        for k, v in inputs.items():
            out_x[k][b] = (lam * v[b] + (1.0 - lam) * v[j]).astype(v.dtype)
        out_y[b] = lam_y * targets[b] + (1.0 - lam_y) * targets[j]
    return out_x, out_y


@dataclass
class FoldAssignment:
    fold_of: dict[str, int]
    k: int

    def videos_in(self, fold: int) -> list[str]:
        return [v for v, f in self.fold_of.items() if f == fold]

    def split(self, fold: int) -> tuple[list[str], list[str]]:
        """``(train_ids, val_ids)`` holding out ``fold``."""
        val = [v for v, f in self.fold_of.items() if f == fold]
        train = [v for v, f in self.fold_of.items() if f != fold]
        return train, val

    def to_text(self) -> str:
        lines = ["# video_id\tfold"]
        lines += [f"{v}\t{f}" for v, f in sorted(self.fold_of.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FoldAssignment":
        fold_of = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"fold table line {lineno}: expected 'video_id<TAB>fold'")
            try:
                fold_of[parts[0]] = int(parts[1])
            except ValueError as exc:
                raise FormatError(f"fold table line {lineno}: fold is not an integer") from exc
        k = max(fold_of.values()) + 1 if fold_of else 0
        return cls(fold_of, k)

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_text().encode("utf-8"))

    @classmethod
    def load(cls, path) -> "FoldAssignment":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def make_folds(videos: list, k: int = 5, rng_seed: int = 0) -> FoldAssignment:
    """Shuffle videos (or video ids) and split them into ``k`` near-equal folds."""
    if k < 2:
        raise ConfigError("need at least 2 folds")
    ids = [getattr(v, "video_id", v) for v in videos]
    if len(set(ids)) != len(ids):
        raise ContractError("duplicate video ids")
    if len(ids) < k:
        raise ConfigError(f"cannot split {len(ids)} videos into {k} folds")
    order = np.random.default_rng(rng_seed).permutation(len(ids))
    fold_of = {}
    for fold, chunk in enumerate(np.array_split(order, k)):
        for i in chunk:
            fold_of[ids[i]] = fold
    return FoldAssignment(fold_of, k)
