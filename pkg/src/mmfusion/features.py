"""Multimodal sample records, sliding windows and the synthetic clip generator.

A :class:`Video` stores per-frame features as dense ``[T, d]`` arrays, one per
modality, plus frame-level labels. :func:`build_window` and
:func:`clip_record` cut the ``2M + 1`` frame neighbourhood used as dynamic
context for one target frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from mmfusion.errors import ConfigError, ContractError

AU_NAMES = ("AU1", "AU2", "AU4", "AU6", "AU7", "AU10", "AU12", "AU15", "AU23", "AU24", "AU25", "AU26")
EXPR_NAMES = ("Neutral", "Anger", "Disgust", "Fear", "Happiness", "Sadness", "Surprise", "Other")
NUM_AU = len(AU_NAMES)
NUM_EXPR = len(EXPR_NAMES)

MINORITY_CLASSES = frozenset({1, 2, 3, 5, 6})  # Anger, Disgust, Fear, Sadness, Surprise
MAJORITY_CLASSES = frozenset({0, 4, 7})  # Neutral, Happiness, Other

# Synthetic-data construct loosely following FACS prototypes. Not a claim
# about real expressions; it only has to make the AU task learnable and use
# every unit at least once.
CLASS_TO_AUS: dict[int, tuple[str, ...]] = {
    0: (),
    1: ("AU4", "AU7", "AU23", "AU24"),
    2: ("AU10", "AU15", "AU25"),
    3: ("AU1", "AU2", "AU4", "AU7", "AU26"),
    4: ("AU6", "AU12", "AU25"),
    5: ("AU1", "AU4", "AU15"),
    6: ("AU1", "AU2", "AU25", "AU26"),
    7: ("AU12", "AU24"),
}

MODALITIES = ("expr_emb", "audio", "word")


def au_vector(expr_class: int) -> np.ndarray:
    """12-element 0/1 activation vector for an expression class."""
    vec = np.zeros(NUM_AU, dtype=np.uint8)
    for name in CLASS_TO_AUS[int(expr_class) % NUM_EXPR]:
        vec[AU_NAMES.index(name)] = 1
    return vec


AU_TABLE = np.stack([au_vector(c) for c in range(NUM_EXPR)])


class FeatureDims(NamedTuple):
    d_s: int = 64
    d_e: int = 16
    d_a: int = 20
    d_w: int = 32


@dataclass(frozen=True)
class FrameFeatures:
    expr_emb: np.ndarray
    audio_feat: np.ndarray
    word_emb: np.ndarray


@dataclass
class Video:
    """Per-frame features and labels of one video.

    ``expr_labels`` uses -1 for frames without an expression label;
    ``au_labels`` is ``[T, 12]`` with rows of -1 for frames without AU labels.
    Either array may be None when the whole video lacks that annotation.
    """

    video_id: str
    static: np.ndarray
    expr_emb: np.ndarray
    audio: np.ndarray
    word: np.ndarray
    expr_labels: np.ndarray | None = None
    au_labels: np.ndarray | None = None

    def __post_init__(self):
        T = len(self.static)
        for name in ("expr_emb", "audio", "word"):
            arr = getattr(self, name)
            if arr.ndim != 2 or len(arr) != T:
                raise ContractError(f"{self.video_id}: {name} has shape {arr.shape}, expected [{T}, d]")
        if self.expr_labels is not None and self.expr_labels.shape != (T,):
            raise ContractError(f"{self.video_id}: expr_labels shape {self.expr_labels.shape}")
        if self.au_labels is not None and self.au_labels.shape != (T, NUM_AU):
            raise ContractError(f"{self.video_id}: au_labels shape {self.au_labels.shape}")

    def __len__(self) -> int:
        return len(self.static)

    @property
    def dims(self) -> FeatureDims:
        return FeatureDims(self.static.shape[1], self.expr_emb.shape[1], self.audio.shape[1], self.word.shape[1])

    def frame(self, i: int) -> FrameFeatures:
        return FrameFeatures(self.expr_emb[i], self.audio[i], self.word[i])

    def frames(self) -> list[FrameFeatures]:
        return [self.frame(i) for i in range(len(self))]

    def modality(self, name: str) -> np.ndarray:
        return {"expr_emb": self.expr_emb, "audio": self.audio, "word": self.word}[name]


@dataclass
class ClipRecord:
    video_id: str
    frame_index: int
    static_feat: np.ndarray
    window: list[FrameFeatures]
    au_label: np.ndarray | None = None
    expr_label: int | None = None

    def __post_init__(self):
        if self.au_label is None and self.expr_label is None:
            raise ContractError("a clip needs at least one of au_label / expr_label")
        if len(self.window) % 2 != 1:
            raise ContractError("window length must be odd (2M+1)")

    def modality_window(self, name: str) -> np.ndarray:
        attr = {"expr_emb": "expr_emb", "audio": "audio_feat", "word": "word_emb"}[name]
        return np.stack([getattr(f, attr) for f in self.window])


def window_indices(length: int, frame_index: int, M: int) -> np.ndarray:
    """Frame indices ``frame_index-M .. frame_index+M`` clamped to the video."""
    if length <= 0:
        raise ContractError("video is empty")
    if not 0 <= frame_index < length:
        raise ContractError(f"frame_index {frame_index} outside video of length {length}")
    if M < 0:
        raise ContractError("M must be nonnegative")
    return np.clip(np.arange(frame_index - M, frame_index + M + 1), 0, length - 1)


def build_window(video: Sequence[FrameFeatures], frame_index: int, M: int) -> list[FrameFeatures]:
    """The ``2M + 1`` frames centred on ``frame_index``, edge-padded by repetition."""
    return [video[j] for j in window_indices(len(video), frame_index, M)]


def clip_record(video: Video, frame_index: int, M: int) -> ClipRecord:
    idx = window_indices(len(video), frame_index, M)
    expr = None
    if video.expr_labels is not None and video.expr_labels[frame_index] >= 0:
        expr = int(video.expr_labels[frame_index])
    au = None
    if video.au_labels is not None and video.au_labels[frame_index, 0] >= 0:
        au = video.au_labels[frame_index].astype(np.uint8)
    return ClipRecord(
        video_id=video.video_id,
        frame_index=frame_index,
        static_feat=video.static[frame_index],
        window=[video.frame(int(j)) for j in idx],
        au_label=au,
        expr_label=expr,
    )


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic multimodal generator.

    With ``split_signal`` each dynamic modality only sees one base-``b`` digit
    of the class id (``b = ceil(class_count ** (1/3))``), so every modality is
    needed to recover the class.
    """

    seed: int = 0
    class_count: int = NUM_EXPR
    videos_per_class: int = 5
    frames_per_video: int = 120
    signal_strength: dict = field(
        default_factory=lambda: {"static": 1.0, "expr_emb": 1.0, "audio": 1.0, "word": 1.0}
    )
    noise_std: float = 0.05
    run_length_min: int = 30
    run_length_max: int = 80
    home_class_prob: float = 0.5
    word_active_prob: float = 0.7
    split_signal: bool = False
    dims: FeatureDims = field(default_factory=FeatureDims)

    def __post_init__(self):
        self.dims = FeatureDims(*self.dims)
        for key in ("static", *MODALITIES):
            s = self.signal_strength.get(key, 0.0)
            if not 0.0 <= s <= 1.0:
                raise ConfigError(f"signal strength for {key} must lie in [0, 1], got {s}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")
        if self.class_count < 1 or self.videos_per_class < 1 or self.frames_per_video < 1:
            raise ConfigError("class_count, videos_per_class and frames_per_video must be positive")
        if not 1 <= self.run_length_min <= self.run_length_max:
            raise ConfigError("need 1 <= run_length_min <= run_length_max")
        if self.class_count > min(self.dims):
            raise ConfigError(
                f"class_count {self.class_count} exceeds prototype capacity {min(self.dims)} "
                "(smallest feature dimension)"
            )


def split_base(class_count: int) -> int:
    b = 2
    while b**3 < class_count:
        b += 1
    return b


def modality_codes(spec: SyntheticSpec, name: str) -> np.ndarray:
    """Prototype index seen by modality ``name`` for every class."""
    classes = np.arange(spec.class_count)
    if not spec.split_signal or name == "static":
        return classes
    b = split_base(spec.class_count)
    return (classes // b ** MODALITIES.index(name)) % b


def class_prototypes(spec: SyntheticSpec) -> dict[str, np.ndarray]:
    """Orthonormal class prototypes per modality, shape ``[class_count, d]``.

    Rows are indexed by class; in split mode classes sharing a code share a row.
    """
    rng = np.random.default_rng([spec.seed, 1])
    dims = dict(zip(("static", *MODALITIES), spec.dims))
    out = {}
    for name in ("static", *MODALITIES):
        q, _ = np.linalg.qr(rng.standard_normal((dims[name], dims[name])))
        basis = q.T  # rows orthonormal
        out[name] = basis[modality_codes(spec, name)].astype(np.float32)
    return out


def _label_runs(rng: np.random.Generator, spec: SyntheticSpec, home: int) -> np.ndarray:
    labels = np.empty(spec.frames_per_video, dtype=np.int64)
    t = 0
    current = home
    while t < spec.frames_per_video:
        n = int(rng.integers(spec.run_length_min, spec.run_length_max + 1))
        labels[t : t + n] = current
        t += n
        if rng.random() < spec.home_class_prob and current != home:
            current = home
        else:
            others = [c for c in range(spec.class_count) if c != current]
            current = int(rng.choice(others)) if others else current
    return labels


def generate_synthetic_dataset(spec: SyntheticSpec) -> list[Video]:
    """Deterministic labelled videos built from class prototypes plus noise."""
    protos = class_prototypes(spec)
    rng = np.random.default_rng([spec.seed, 2])
    dims = dict(zip(("static", *MODALITIES), spec.dims))
    videos = []
    for k in range(spec.class_count * spec.videos_per_class):
        home = k // spec.videos_per_class
        labels = _label_runs(rng, spec, home)
        feats = {}
        for name in ("static", *MODALITIES):
            strength = spec.signal_strength.get(name, 0.0)
            noise = rng.standard_normal((spec.frames_per_video, dims[name])) * spec.noise_std
            feats[name] = (strength * protos[name][labels].astype(np.float64) + noise).astype(np.float32)
        active = rng.random(spec.frames_per_video) < spec.word_active_prob
        feats["word"][~active] = 0.0
        videos.append(
            Video(
                video_id=f"vid{k:04d}",
                static=feats["static"],
                expr_emb=feats["expr_emb"],
                audio=feats["audio"],
                word=feats["word"],
                expr_labels=labels.astype(np.int16),
                au_labels=AU_TABLE[labels % NUM_EXPR].astype(np.int8),
            )
        )
    return videos
