"""Finite-difference checks of every differentiable op and of the full model.

Relative error per entry is ``|a - n| / max(|a|, |n|, floor)`` for the
analytic gradient ``a`` and the central difference ``n``. The floor keeps
entries whose true gradient is tiny from being judged on rounding noise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from mmfusion import tensor as T
from mmfusion.features import FeatureDims
from mmfusion.losses import au_ce_loss, au_circle_loss, expr_ce_loss, one_hot
from mmfusion.model import Batch, ModelConfig, init_params, model_forward
from mmfusion.tensor import Tensor

EPS = 1e-5
FLOOR = 1e-5


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> float:
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def check_gradients(fn: Callable[[], Tensor], leaves: list[Tensor], eps: float = EPS, floor: float = FLOOR) -> float:
    """Max relative error between backprop and central differences over all leaves.

    ``fn`` rebuilds the scalar loss from the current leaf values.
    """
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.zero_grad()
    T.backward(fn())
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad.copy()
        flat = leaf.value.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = float(fn().value)
            flat[i] = old - eps
            down = float(fn().value)
            flat[i] = old
            numeric[i] = (up - down) / (2 * eps)
        worst = max(worst, rel_error(analytic.reshape(-1), numeric, floor))
    return worst


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _leaf(x) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """Each case returns a scalar built from one op, weighted so every output entry matters."""
    cases = {}

    def weighted(out_fn, *leaves):
        probe = {}

        def fn():
            out = out_fn()
            if "w" not in probe:
                probe["w"] = rng.standard_normal(out.shape)
            return (out * probe["w"]).sum()

        return fn, list(leaves)

    a, b = _leaf(rng.standard_normal((3, 4))), _leaf(rng.standard_normal((3, 4)))
    cases["add"] = weighted(lambda: T.add(a, b), a, b)
    c, d = _leaf(rng.standard_normal((3, 4))), _leaf(rng.standard_normal((4,)))
    cases["add_broadcast"] = weighted(lambda: T.add(c, d), c, d)
    e, f = _leaf(rng.standard_normal((3, 4))), _leaf(rng.standard_normal((3, 1)))
    cases["sub"] = weighted(lambda: T.sub(e, f), e, f)
    g, h = _leaf(rng.standard_normal((2, 3))), _leaf(rng.standard_normal((2, 3)))
    cases["mul"] = weighted(lambda: T.mul(g, h), g, h)
    x = _leaf(rng.standard_normal((3, 5)) * 3)
    cases["sigmoid"] = weighted(lambda: T.sigmoid(x), x)
    x2 = _leaf(rng.standard_normal((3, 5)))
    cases["tanh"] = weighted(lambda: T.tanh(x2), x2)
    x3 = _leaf(_away_from_zero(rng, (3, 5)))
    cases["relu"] = weighted(lambda: T.relu(x3), x3)
    x4 = _leaf(rng.standard_normal((3, 4)))
    cases["exp"] = weighted(lambda: T.exp(x4), x4)
    x5 = _leaf(rng.uniform(0.2, 3.0, (3, 4)))
    cases["log"] = weighted(lambda: T.log(x5), x5)
    x6 = _leaf(np.array([0.05, 0.3, 0.5, 0.7, 0.95]))
    cases["clip"] = weighted(lambda: T.clip(x6, 0.1, 0.9), x6)
    x7 = _leaf(rng.standard_normal((3, 4)))
    mask = rng.random((3, 4)) < 0.3
    cases["masked_fill"] = weighted(lambda: T.masked_fill(x7, mask, 0.0), x7)
    m1, m2 = _leaf(rng.standard_normal((3, 4))), _leaf(rng.standard_normal((4, 2)))
    cases["matmul"] = weighted(lambda: T.matmul(m1, m2), m1, m2)
    m3, m4 = _leaf(rng.standard_normal((2, 3, 4))), _leaf(rng.standard_normal((4, 5)))
    cases["matmul_batched"] = weighted(lambda: T.matmul(m3, m4), m3, m4)
    m5, m6 = _leaf(rng.standard_normal((2, 2, 3, 4))), _leaf(rng.standard_normal((2, 2, 4, 3)))
    cases["matmul_4d"] = weighted(lambda: T.matmul(m5, m6), m5, m6)
    r = _leaf(rng.standard_normal((2, 6)))
    cases["reshape"] = weighted(lambda: T.reshape(r, (3, 4)), r)
    t = _leaf(rng.standard_normal((2, 3, 4)))
    cases["transpose"] = weighted(lambda: T.transpose(t, (0, 2, 1)), t)
    gi = _leaf(rng.standard_normal((4, 5)))
    cases["getitem"] = weighted(lambda: T.getitem(gi, (slice(1, 3), slice(None, None, 2))), gi)
    gi2 = _leaf(rng.standard_normal((4, 5)))
    idx = np.array([0, 2, 2, 3])
    cases["getitem_gather"] = weighted(lambda: T.getitem(gi2, idx), gi2)
    k1, k2 = _leaf(rng.standard_normal((2, 3))), _leaf(rng.standard_normal((2, 2)))
    cases["concat"] = weighted(lambda: T.concat([k1, k2], axis=1), k1, k2)
    s = _leaf(rng.standard_normal((3, 4)))
    cases["sum"] = weighted(lambda: T.tensor_sum(s, axis=0), s)
    mn = _leaf(rng.standard_normal((3, 4)))
    cases["mean"] = weighted(lambda: T.mean(mn, axis=1, keepdims=True), mn)
    sm = _leaf(rng.standard_normal((3, 5)))
    cases["softmax"] = weighted(lambda: T.softmax(sm), sm)
    ls = _leaf(rng.standard_normal((3, 5)))
    cases["logsumexp"] = weighted(lambda: T.logsumexp(ls), ls)
    ls2 = _leaf(rng.standard_normal((3, 5)))
    neg = rng.random((3, 5)) < 0.4
    neg[:, 0] = False
    cases["logsumexp_masked"] = weighted(lambda: T.logsumexp(T.masked_fill(ls2, neg, -np.inf)), ls2)
    ln_x, ln_g, ln_b = _leaf(rng.standard_normal((3, 6))), _leaf(rng.standard_normal(6)), _leaf(rng.standard_normal(6))
    cases["layer_norm"] = weighted(lambda: T.layer_norm(ln_x, ln_g, ln_b), ln_x, ln_g, ln_b)
    H = 3
    xg = _leaf(rng.standard_normal((2, 4, 3 * H)))
    whh = _leaf(rng.standard_normal((H, 3 * H)) * 0.5)
    bhh = _leaf(rng.standard_normal(3 * H) * 0.1)
    h0 = _leaf(rng.standard_normal((2, H)) * 0.5)
    cases["gru_scan"] = weighted(lambda: T.gru_scan(xg, whh, bhh, h0), xg, whh, bhh, h0)

    yh = _leaf(rng.uniform(0.05, 0.95, (3, 12)))
    y = rng.integers(0, 2, (3, 12))
    cases["au_ce_loss"] = (lambda: au_ce_loss(yh, y), [yh])
    sc = _leaf(rng.standard_normal((3, 12)))
    cases["au_circle_loss"] = (lambda: au_circle_loss(sc, y), [sc])
    zl = _leaf(rng.standard_normal((3, 8)))
    z = one_hot(rng.integers(0, 8, 3))
    cases["expr_ce_loss"] = (lambda: expr_ce_loss(T.softmax(zl), z), [zl])
    return cases


def tiny_model_config(fusion: str = "transformer") -> ModelConfig:
    return ModelConfig(
        dims=FeatureDims(6, 4, 5, 3),
        model_dim=8,
        hidden_size=5,
        gru_layers=2,
        head_count=2,
        head_hidden=6,
        tasks=("au", "expr"),
        fusion=fusion,
        dtype="float64",
    )


def model_case(seed: int = 0, fusion: str = "transformer"):
    cfg = tiny_model_config(fusion)
    params = init_params(cfg, seed)
    rng = np.random.default_rng([seed, 99])
    B, L = 3, 5
    d = cfg.dims
    batch = Batch(
        rng.standard_normal((B, d.d_s)),
        {
            "expr_emb": rng.standard_normal((B, L, d.d_e)),
            "audio": rng.standard_normal((B, L, d.d_a)),
            "word": rng.standard_normal((B, L, d.d_w)),
        },
    )
    y = rng.integers(0, 2, (B, 12))
    z = one_hot(rng.integers(0, 8, B))

    def fn():
        out = model_forward(batch, params, cfg)
        return (
            au_ce_loss(T.sigmoid(out["au"]), y)
            + au_circle_loss(out["au"], y)
            + expr_ce_loss(T.softmax(out["expr"]), z)
        )

    return fn, list(params.values())


@dataclass
class SuiteResult:
    errors: dict[str, float]
    seconds: float

    @property
    def worst(self) -> float:
        return max(self.errors.values())

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst < tol


def run_suite(seed: int = 0, include_model: bool = True) -> SuiteResult:
    """Check every op case and, optionally, the tiny end-to-end model."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    errors = {name: check_gradients(fn, leaves) for name, (fn, leaves) in _op_cases(rng).items()}
    if include_model:
        for fusion in ("transformer", "concat"):
            fn, leaves = model_case(seed, fusion)
            errors[f"model_{fusion}"] = check_gradients(fn, leaves)
    return SuiteResult(errors, time.perf_counter() - start)
