"""Training, evaluation, k-fold cross-validation and ablation runs."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mmfusion import tensor as T
from mmfusion.checkpoint import atomic_write_bytes, save_checkpoint
from mmfusion.config import ABLATIONS, RunConfig
from mmfusion.datapipe import FrameRef, FoldAssignment, class_counts, make_folds, remix_batch, resample
from mmfusion.errors import ConfigError, ContractError, DivergenceError
from mmfusion.features import MODALITIES, NUM_AU, NUM_EXPR, Video
from mmfusion.losses import au_ce_loss, au_circle_loss, expr_ce_loss, one_hot
from mmfusion.metrics import F1Result, au_macro_f1, macro_f1, threshold_au
from mmfusion.model import Batch, ModelConfig, Params, init_params, model_forward, params_from_arrays
from mmfusion.optim import OptimizerState, clip_grad_norm, sgd_step
from mmfusion.postprocess import PredictionSequence, smooth

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1


class FrameTable:
    """All videos concatenated so windows can be gathered with one fancy index."""

    def __init__(self, videos: list[Video], M: int, dtype="float32"):
        if not videos:
            raise ContractError("no videos")
        self.videos = videos
        self.M = M
        lengths = np.array([len(v) for v in videos])
        self.lengths = lengths
        self.offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        self.static = np.concatenate([v.static for v in videos]).astype(dtype)
        self.feats = {m: np.concatenate([v.modality(m) for v in videos]).astype(dtype) for m in MODALITIES}
        self.expr = np.concatenate(
            [v.expr_labels if v.expr_labels is not None else np.full(len(v), -1) for v in videos]
        ).astype(np.int64)
        self.au = np.concatenate(
            [v.au_labels if v.au_labels is not None else np.full((len(v), NUM_AU), -1) for v in videos]
        ).astype(np.int64)

    def rows(self, refs: np.ndarray) -> np.ndarray:
        return self.offsets[refs[:, 0]] + refs[:, 1]

    def batch(self, refs: np.ndarray) -> Batch:
        """Inputs and labels for ``refs`` (an ``[N, 2]`` array of video, frame)."""
        refs = np.asarray(refs)
        offs = np.arange(-self.M, self.M + 1)
        local = np.clip(refs[:, 1:2] + offs, 0, self.lengths[refs[:, 0]][:, None] - 1)
        rows = self.offsets[refs[:, 0]][:, None] + local
        centre = self.rows(refs)
        return Batch(
            static=self.static[centre],
            windows={m: self.feats[m][rows] for m in MODALITIES},
            expr=self.expr[centre],
            au=self.au[centre],
        )

    def labelled_refs(self, task: str) -> np.ndarray:
        refs = [(vi, f) for vi, v in enumerate(self.videos) for f in range(len(v))]
        refs = np.array(refs, dtype=np.int64).reshape(-1, 2)
        labels = self.expr if task == "expr" else self.au[:, 0]
        return refs[labels[self.rows(refs)] >= 0]


@dataclass
class EvalResult:
    f1_raw: F1Result
    f1_smoothed: F1Result
    raw: list[PredictionSequence]
    smoothed: list[PredictionSequence]
    frame_count: int

    def summary(self) -> dict:
        return {
            "macro_f1_raw": self.f1_raw.average,
            "macro_f1_smoothed": self.f1_smoothed.average,
            "per_class_raw": self.f1_raw.per_class,
            "per_class_smoothed": self.f1_smoothed.per_class,
            "support": self.f1_raw.support,
            "frames": self.frame_count,
        }


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    epoch_losses: list[float]
    val_f1: list[float]
    best_epoch: int
    steps: int
    wall_time: float = 0.0
    evaluation: EvalResult | None = None

    def report(self) -> dict:
        out = {
            "epoch_losses": self.epoch_losses,
            "val_macro_f1_per_epoch": self.val_f1,
            "best_epoch": self.best_epoch,
            "steps": self.steps,
        }
        if self.evaluation is not None:
            out["validation"] = self.evaluation.summary()
        return out


# ---------------------------------------------------------------------------
# prediction and evaluation
# ---------------------------------------------------------------------------


def predict_scores(params: Params, cfg: RunConfig, videos: list[Video]) -> dict[str, np.ndarray]:
    """Per-frame probabilities for every frame: ``[T, 8]`` softmax or ``[T, 12]`` sigmoid."""
    mcfg = cfg.model_config()
    table = FrameTable(videos, cfg.model.M, cfg.dtype)
    out = {}
    for vi, v in enumerate(videos):
        refs = np.stack([np.full(len(v), vi), np.arange(len(v))], axis=1)
        chunks = []
        for s in range(0, len(refs), cfg.eval_batch_size):
            raw = model_forward(table.batch(refs[s : s + cfg.eval_batch_size]), params, mcfg)[cfg.task]
            prob = T.softmax(raw) if cfg.task == "expr" else T.sigmoid(raw)
            chunks.append(prob.value.astype(np.float64))
        out[v.video_id] = np.concatenate(chunks)
    return out


def scores_to_labels(scores: np.ndarray, cfg: RunConfig) -> np.ndarray:
    if cfg.task == "expr":
        return scores.argmax(axis=1)
    return threshold_au(scores, cfg.loss.au_threshold)


def score_predictions(
    preds: list[PredictionSequence], videos: list[Video], task: str
) -> F1Result:
    by_id = {v.video_id: v for v in videos}
    got, want = [], []
    for p in preds:
        v = by_id[p.video_id]
        if task == "expr":
            if v.expr_labels is None:
                continue
            mask = v.expr_labels >= 0
            got.append(p.labels[mask])
            want.append(v.expr_labels[mask])
        else:
            if v.au_labels is None:
                continue
            mask = v.au_labels[:, 0] >= 0
            got.append(p.labels[mask])
            want.append(v.au_labels[mask])
    if not got or sum(len(g) for g in got) == 0:
        raise ContractError("no labelled frames to score")
    if task == "expr":
        return macro_f1(np.concatenate(got), np.concatenate(want), NUM_EXPR)
    return au_macro_f1(np.concatenate(got), np.concatenate(want))


def evaluate(params: Params | dict[str, np.ndarray], videos: list[Video], cfg: RunConfig) -> EvalResult:
    """Raw and smoothed predictions on ``videos`` with their macro F1."""
    if not videos:
        raise ContractError("evaluate on an empty split")
    for v in videos:
        if v.dims != cfg.dims:
            raise ContractError(f"video {v.video_id} dims {tuple(v.dims)} do not match config {tuple(cfg.dims)}")
    if params and not isinstance(next(iter(params.values())), T.Tensor):
        params = params_from_arrays(params, cfg.model_config())
    scores = predict_scores(params, cfg, videos)
    raw = [PredictionSequence(vid, scores_to_labels(s, cfg)) for vid, s in scores.items()]
    if cfg.smoothing.enabled and (cfg.task == "expr" or cfg.smoothing.apply_to_au):
        policy = cfg.smoothing_policy(au=cfg.task == "au")
        smoothed = [smooth(p, policy) for p in raw]
    else:
        smoothed = raw
    frames = sum(len(v) for v in videos)
    return EvalResult(score_predictions(raw, videos, cfg.task), score_predictions(smoothed, videos, cfg.task), raw, smoothed, frames)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _loss(outputs: dict, targets: np.ndarray, cfg: RunConfig) -> T.Tensor:
    if cfg.task == "expr":
        return expr_ce_loss(T.softmax(outputs["expr"]), targets)
    scores = outputs["au"]
    hard = (targets >= 0.5).astype(np.int64)
    # mixed AU targets are soft: cross-entropy uses them as is, the circle term needs bits
    return T.add(au_ce_loss(T.sigmoid(scores), targets), cfg.loss.circle_weight * au_circle_loss(scores, hard))


def _split_videos(videos: list[Video], ids: list[str] | None) -> list[Video]:
    if ids is None:
        return list(videos)
    by_id = {v.video_id: v for v in videos}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ContractError(f"unknown video ids {missing[:3]}")
    return [by_id[i] for i in ids]


def train(
    cfg: RunConfig,
    videos: list[Video],
    train_ids: list[str] | None = None,
    val_ids: list[str] | None = None,
    init_seed=None,
    tag: str = "train",
) -> TrainResult:
    """Train one model; keep the parameters with the best validation macro F1.

    Without a validation split the final parameters are kept. ``tag``
    prefixes progress log lines so parallel fold workers stay apart.
    """
    start = time.perf_counter()
    train_videos = _split_videos(videos, train_ids)
    val_videos = _split_videos(videos, val_ids) if val_ids else []
    if not train_videos:
        raise ContractError("empty training split")
    for v in train_videos + val_videos:
        if v.dims != cfg.dims:
            raise ContractError(f"video {v.video_id} dims {tuple(v.dims)} do not match config {tuple(cfg.dims)}")
    mcfg = cfg.model_config()
    params = init_params(mcfg, cfg.seed if init_seed is None else init_seed)
    plist = list(params.values())

    table = FrameTable(train_videos, cfg.model.M, cfg.dtype)
    if cfg.resample.enabled:
        refs_list = resample(
            train_videos, cfg.resample.n_minor, cfg.resample.n_major, cfg.seed, frozenset(cfg.resample.minority)
        )
        counts = class_counts(train_videos, refs_list)
        refs = np.array(refs_list, dtype=np.int64).reshape(-1, 2)
        labels = table.expr if cfg.task == "expr" else table.au[:, 0]
        refs = refs[labels[table.rows(refs)] >= 0]
    else:
        refs = table.labelled_refs(cfg.task)
        counts = class_counts(train_videos, [FrameRef(int(a), int(b)) for a, b in refs])
    if len(refs) == 0:
        raise ContractError(f"no labelled {cfg.task} frames in the training split")

    steps_per_epoch = math.ceil(len(refs) / cfg.batch_size)
    state = OptimizerState(
        learning_rate_max=cfg.optim.lr_max,
        learning_rate_min=cfg.optim.lr_min,
        restart_period=max(1, round(cfg.optim.restart_epochs * steps_per_epoch)),
        period_multiplier=cfg.optim.period_multiplier,
        momentum=cfg.optim.momentum,
    )
    rng = np.random.default_rng([cfg.seed, 7])
    use_remix = cfg.remix.enabled and (cfg.task == "expr" or cfg.remix.apply_to_au)
    remix_params = cfg.remix_params()

    epoch_losses: list[float] = []
    val_f1: list[float] = []
    best = {k: p.value.copy() for k, p in params.items()}
    best_f1, best_epoch = -1.0, -1
    best_eval = None
    for epoch in range(cfg.epochs):
        order = refs[rng.permutation(len(refs))]
        total, seen = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            chunk = order[s : s + cfg.batch_size]
            batch = table.batch(chunk)
            if cfg.task == "expr":
                targets = one_hot(batch.expr, NUM_EXPR)
                classes = batch.expr
            else:
                targets = batch.au.astype(np.float64)
                classes = batch.expr
            if use_remix:
                inputs = {"static": batch.static, **batch.windows}
                mixed, targets = remix_batch(inputs, targets, classes, counts, rng, remix_params)
                batch = Batch(mixed["static"], {m: mixed[m] for m in MODALITIES})
            outputs = model_forward(batch, params, mcfg)
            loss = _loss(outputs, targets, cfg)
            value = float(loss.value)
            if not math.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} step {state.step_counter}",
                    {"step": state.step_counter, "epoch": epoch, "loss": value},
                )
            for p in plist:
                p.zero_grad()
            try:
                grads = T.backward(loss)
            except ArithmeticError as exc:
                raise DivergenceError(
                    f"non-finite gradient at step {state.step_counter}: {exc}",
                    {"step": state.step_counter, "epoch": epoch, "loss": value},
                ) from exc
            norm = clip_grad_norm(grads, cfg.optim.grad_clip)
            if not math.isfinite(norm):
                raise DivergenceError(
                    f"non-finite gradient norm at step {state.step_counter}",
                    {"step": state.step_counter, "epoch": epoch, "grad_norm": norm},
                )
            sgd_step(plist, grads, state)
            total += value * len(chunk)
            seen += len(chunk)
        epoch_losses.append(total / seen)
        if val_videos:
            ev = evaluate(params, val_videos, cfg)
            f1 = ev.f1_raw.average
            val_f1.append(f1)
            if f1 > best_f1:
                best_f1, best_epoch, best_eval = f1, epoch, ev
                best = {k: p.value.copy() for k, p in params.items()}
        log.info("[%s] epoch %d loss %.5f%s", tag, epoch, epoch_losses[-1], f" val_f1 {val_f1[-1]:.4f}" if val_f1 else "")
    if not val_videos:
        best = {k: p.value.copy() for k, p in params.items()}
        best_epoch = cfg.epochs - 1
    return TrainResult(
        params=best,
        epoch_losses=epoch_losses,
        val_f1=val_f1,
        best_epoch=best_epoch,
        steps=state.step_counter,
        wall_time=time.perf_counter() - start,
        evaluation=best_eval,
    )


# ---------------------------------------------------------------------------
# cross-validation and ablation
# ---------------------------------------------------------------------------


@dataclass
class CVResult:
    """Per-fold results plus the pooled out-of-fold score.

    Every video is predicted by the one model that never saw it; the pooled
    macro F1 scores those predictions together, so a class missing from one
    fold's held-out videos does not count as a zero for that fold.
    """

    folds: FoldAssignment
    results: list[TrainResult]
    config_digest: str
    task: str
    pooled_raw: F1Result
    pooled_smoothed: F1Result
    wall_time: float = 0.0

    @property
    def fold_f1(self) -> list[float]:
        return [r.evaluation.f1_raw.average for r in self.results]

    @property
    def mean_f1(self) -> float:
        return float(np.mean(self.fold_f1))

    @property
    def pooled_f1(self) -> float:
        return self.pooled_raw.average

    def report(self) -> dict:
        """The JSON report. Timing is kept out so identical runs give identical bytes."""
        return {
            "schema_version": REPORT_SCHEMA,
            "config_digest": self.config_digest,
            "task": self.task,
            "folds": [{"fold": k, **r.report()} for k, r in enumerate(self.results)],
            "mean_fold_macro_f1_raw": self.mean_f1,
            "pooled_macro_f1_raw": self.pooled_raw.average,
            "pooled_macro_f1_smoothed": self.pooled_smoothed.average,
            "pooled_per_class_raw": self.pooled_raw.per_class,
            "pooled_per_class_smoothed": self.pooled_smoothed.per_class,
            "pooled_support": self.pooled_raw.support,
        }


def _train_fold(args):
    cfg, videos, train_ids, val_ids, fold = args
    return train(cfg, videos, train_ids, val_ids, init_seed=[cfg.seed, fold], tag=f"fold {fold}")


def cross_validate(cfg: RunConfig, videos: list[Video], folds: FoldAssignment | None = None) -> CVResult:
    """Train one model per fold, each validated on its held-out videos."""
    start = time.perf_counter()
    folds = folds or make_folds(videos, cfg.folds, cfg.seed)
    jobs = []
    for k in range(folds.k):
        train_ids, val_ids = folds.split(k)
        jobs.append((cfg, videos, train_ids, val_ids, k))
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_train_fold, jobs))
    else:
        results = [_train_fold(j) for j in jobs]
    raw = [p for r in results for p in r.evaluation.raw]
    smoothed = [p for r in results for p in r.evaluation.smoothed]
    return CVResult(
        folds,
        results,
        cfg.digest(),
        cfg.task,
        score_predictions(raw, videos, cfg.task),
        score_predictions(smoothed, videos, cfg.task),
        time.perf_counter() - start,
    )


def write_run(cv: CVResult, out_dir) -> dict[str, Path]:
    """Write fold table, per-fold checkpoints, report and timing under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"folds": out / "folds.tsv", "report": out / "report.json", "timing": out / "timing.json"}
    cv.folds.save(paths["folds"])
    for k, r in enumerate(cv.results):
        paths[f"ckpt{k}"] = out / f"fold{k}.ckpt"
        save_checkpoint(r.params, paths[f"ckpt{k}"])
    write_json(cv.report(), paths["report"])
    write_json({"wall_time_s": cv.wall_time, "fold_wall_time_s": [r.wall_time for r in cv.results]}, paths["timing"])
    return paths


def write_json(obj, path) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def ablation_config(base: RunConfig, condition: str) -> RunConfig:
    if condition == "full":
        return base.replace()
    if condition == "only_static":
        return base.replace(**{"model.static_only": True})
    if condition == "no_trans":
        return base.replace(**{"model.fusion": "concat"})
    mod = {"no_exp_emb": "expr_emb", "no_audio": "audio", "no_word": "word"}.get(condition)
    if mod is None:
        raise ConfigError(f"unknown ablation condition {condition!r}; choose from {ABLATIONS}")
    mods = dict(base.model.modalities)
    mods[mod] = False
    return base.replace(**{"model.modalities": mods})


def config_diff(a: RunConfig, b: RunConfig) -> dict:
    def flat(d, prefix=""):
        out = {}
        for k, v in d.items():
            key = f"{prefix}{k}"
            if isinstance(v, dict) and k != "modalities":
                out.update(flat(v, key + "."))
            else:
                out[key] = v
        return out

    fa, fb = flat(a.to_dict()), flat(b.to_dict())
    return {k: {"base": fa.get(k), "ablated": fb.get(k)} for k in sorted(set(fa) | set(fb)) if fa.get(k) != fb.get(k)}


def ablate(
    base: RunConfig,
    condition: str,
    videos: list[Video],
    train_ids: list[str],
    val_ids: list[str],
    base_result: TrainResult | None = None,
) -> dict:
    """Train the base and the ablated model on the same split; report both F1 scores."""
    ablated = ablation_config(base, condition)
    if base_result is None:
        base_result = train(base, videos, train_ids, val_ids)
    result = train(ablated, videos, train_ids, val_ids)
    return {
        "condition": condition,
        "base_macro_f1": base_result.evaluation.f1_raw.average,
        "ablated_macro_f1": result.evaluation.f1_raw.average,
        "base_per_class": base_result.evaluation.f1_raw.per_class,
        "ablated_per_class": result.evaluation.f1_raw.per_class,
        "config_diff": config_diff(base, ablated),
        "head_input_dim": ablated.model_config().head_input_dim,
    }
