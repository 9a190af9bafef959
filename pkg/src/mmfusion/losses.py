"""Training losses for AU detection and expression recognition.

All losses take a batch and return the mean of the per-sample value as a
scalar :class:`~mmfusion.tensor.Tensor`.
"""

from __future__ import annotations

import numpy as np

from mmfusion import tensor as T
from mmfusion.errors import ContractError
from mmfusion.tensor import Tensor, as_tensor

EPS = 1e-7


def _check(pred: Tensor, target: np.ndarray, width: int, what: str) -> None:
    if pred.ndim != 2 or pred.shape[1] != width:
        raise ContractError(f"{what}: predictions must be [batch, {width}], got {pred.shape}")
    if target.shape != pred.shape:
        raise ContractError(f"{what}: target shape {target.shape} != prediction shape {pred.shape}")


def au_ce_loss(y_hat, y, eps: float = EPS) -> Tensor:
    """Binary cross-entropy averaged over the 12 units, then over the batch."""
    y_hat = as_tensor(y_hat)
    y = np.asarray(y, dtype=y_hat.dtype)
    _check(y_hat, y, 12, "au_ce_loss")
    p = T.clip(y_hat, eps, 1.0 - eps)
    ll = y * T.log(p) + (1.0 - y) * T.log(1.0 - p)
    return -(ll.mean(axis=1).mean())


def au_circle_loss(scores, y) -> Tensor:
    """``log(1 + sum_{inactive} e^s) + log(1 + sum_{active} e^-s)``, batch mean.

    Each term is a log-sum-exp over the masked scores and an appended zero,
    so large scores do not overflow.
    """
    s = as_tensor(scores)
    y = np.asarray(y)
    _check(s, y, 12, "au_circle_loss")
    active = y.astype(bool)
    zeros = Tensor(np.zeros((s.shape[0], 1), dtype=s.dtype))
    neg = T.masked_fill(s, active, -np.inf)
    pos = T.masked_fill(-s, ~active, -np.inf)
    loss = T.logsumexp(T.concat([neg, zeros], axis=1)) + T.logsumexp(T.concat([pos, zeros], axis=1))
    return loss.mean()


def expr_ce_loss(z_hat, z, eps: float = EPS) -> Tensor:
    """``-(1/8) sum_j z_j log z_hat_j`` averaged over the batch.

    ``z`` may be soft (rows summing to one) as produced by remix.
    """
    z_hat = as_tensor(z_hat)
    z = np.asarray(z, dtype=z_hat.dtype)
    _check(z_hat, z, 8, "expr_ce_loss")
    p = T.clip(z_hat, eps, 1.0 - eps)
    return -((z * T.log(p)).mean(axis=1).mean())


def au_total_loss(scores, y, circle_weight: float = 1.0) -> Tensor:
    """Cross-entropy on sigmoid(scores) plus weighted circle loss on raw scores."""
    scores = as_tensor(scores)
    return au_ce_loss(T.sigmoid(scores), y) + circle_weight * au_circle_loss(scores, y)


def one_hot(labels, n: int = 8) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), labels] = 1.0
    return out
