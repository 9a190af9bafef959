"""Macro F1 for multi-class expression labels and multi-label AU activations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mmfusion.errors import ContractError


@dataclass
class F1Result:
    per_class: list[float]
    average: float
    support: list[int]

    def to_dict(self) -> dict:
        return {"per_class": self.per_class, "macro_f1": self.average, "support": self.support}


def _f1(tp: np.ndarray, fp: np.ndarray, fn: np.ndarray) -> np.ndarray:
    # F1 = 2PR/(P+R) = 2TP/(2TP+FP+FN); zero when nothing was predicted or present
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)


def macro_f1(preds, labels, class_count: int) -> F1Result:
    """One-vs-rest F1 per class and their unweighted mean."""
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.size == 0:
        raise ContractError("macro_f1 on empty input")
    if preds.shape != labels.shape:
        raise ContractError(f"preds length {preds.size} != labels length {labels.size}")
    cm = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    tp = np.diag(cm).astype(float)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    per = _f1(tp, fp, fn)
    return F1Result([float(x) for x in per], float(per.mean()), [int(x) for x in cm.sum(axis=1)])


def threshold_au(probs, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(probs) >= threshold).astype(np.int64)


def au_macro_f1(pred_bits, labels) -> F1Result:
    """Binary F1 for every AU column and their unweighted mean."""
    pred_bits = np.asarray(pred_bits, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if pred_bits.size == 0:
        raise ContractError("au_macro_f1 on empty input")
    if pred_bits.shape != labels.shape or pred_bits.ndim != 2:
        raise ContractError(f"AU predictions {pred_bits.shape} and labels {labels.shape} must be equal [N, units]")
    tp = ((pred_bits == 1) & (labels == 1)).sum(axis=0).astype(float)
    fp = ((pred_bits == 1) & (labels == 0)).sum(axis=0).astype(float)
    fn = ((pred_bits == 0) & (labels == 1)).sum(axis=0).astype(float)
    per = _f1(tp, fp, fn)
    return F1Result([float(x) for x in per], float(per.mean()), [int(x) for x in labels.sum(axis=0)])
