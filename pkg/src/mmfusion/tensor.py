"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors record the
producing op and its parents; :func:`backward` walks that graph in reverse
topological order and accumulates gradients into the leaves.

Only the operations the fusion model needs are provided. Broadcasting is
supported for elementwise ops and ``matmul`` in the numpy sense; gradients
are summed back onto the broadcast operand.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from mmfusion.errors import ContractError, NumericError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A value in a computation graph.

    ``grad`` always has the same shape as ``value``. For leaves it holds the
    accumulated gradient across :func:`backward` calls; for intermediate
    nodes it holds the gradient of the most recent backward pass.
    """

    __slots__ = ("value", "_grad", "parents", "op", "_backward", "requires_grad", "name")
    __array_ufunc__ = None

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        name: str | None = None,
        dtype=None,
    ):
        arr = np.asarray(value, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.value = arr
        self._grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.op = "leaf"
        self._backward: BackwardFn | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.value.dtype)
        if g.shape != self.value.shape:
            raise ContractError(f"grad shape {g.shape} != value shape {self.value.shape}")
        self._grad = g

    def zero_grad(self) -> None:
        self._grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(value: np.ndarray, parents: Iterable[Tensor], op: str, backward_fn: BackwardFn) -> Tensor:
    parents = tuple(parents)
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out._backward = backward_fn
    out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (a, b), "add", lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _node(a.value - b.value, (a, b), "sub", lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    av, bv = a.value, b.value

    def bw(g):
        return (
            _unbroadcast(g * bv, av.shape) if a.requires_grad else None,
            _unbroadcast(g * av, bv.shape) if b.requires_grad else None,
        )

    return _node(av * bv, (a, b), "mul", bw)


def sigmoid(x: Tensor) -> Tensor:
    v = x.value
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return _node(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.value)
    return _node(out, (x,), "tanh", lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return _node(np.where(mask, x.value, 0.0).astype(x.dtype), (x,), "relu", lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.value)
    return _node(out, (x,), "exp", lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    v = x.value
    return _node(np.log(v), (x,), "log", lambda g: (g / v,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping is active."""
    v = x.value
    inside = (v >= lo) & (v <= hi)
    return _node(np.clip(v, lo, hi), (x,), "clip", lambda g: (g * inside,))


def masked_fill(x: Tensor, mask: np.ndarray, fill: float) -> Tensor:
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, np.asarray(fill, dtype=x.dtype), x.value)
    return _node(out, (x,), "masked_fill", lambda g: (np.where(mask, 0.0, g).astype(g.dtype),))


# ---------------------------------------------------------------------------
# linear algebra and shape
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy batching rules. Both operands must be at least 2-D."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if b.requires_grad:
            if bv.ndim == 2 and av.ndim > 2:
                # weight shared across the batch: fold leading axes into one GEMM
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _node(av @ bv, (a, b), "matmul", bw)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _node(x.value.reshape(shape), (x,), "reshape", lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.value, axes), (x,), "transpose", lambda g: (np.transpose(g, inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    src_shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node(x.value[idx], (x,), "slice", bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of empty sequence")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _node(
        np.concatenate([t.value for t in tensors], axis=axis),
        tensors,
        "concat",
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.sum(x.value, axis=axis, keepdims=keepdims), (x,), "sum", bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    count = x.value.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _node(np.mean(x.value, axis=axis, keepdims=keepdims), (x,), "mean", bw)


# ---------------------------------------------------------------------------
# fused reductions and normalisations
# ---------------------------------------------------------------------------


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    v = x.value
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (x,), "softmax", bw)


def logsumexp(x: Tensor) -> Tensor:
    """Stable ``log(sum(exp(x)))`` over the last axis. Entries may be ``-inf``."""
    v = x.value
    m = v.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise NumericError("logsumexp", "row without a finite entry")
    e = np.exp(v - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s))[..., 0]
    weights = e / s
    return _node(out, (x,), "logsumexp", lambda g: (g[..., None] * weights,))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis then apply an affine map."""
    v = x.value
    n = v.shape[-1]
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gamma.value
    out = xhat * gv + beta.value

    def bw(g):
        dxhat = g * gv
        dx = inv / n * (
            n * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(out, (x, gamma, beta), "layer_norm", bw)


def _sig(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def gru_scan(xg: Tensor, w_hh: Tensor, b_hh: Tensor, h0: Tensor | None = None) -> Tensor:
    """Run the GRU recurrence over precomputed input projections.

    ``xg`` has shape ``[B, L, 3H]`` and holds ``x_t @ W_ih + b_ih`` with gate
    blocks ordered (reset, update, candidate). ``w_hh`` is ``[H, 3H]``.
    Returns every hidden state, shape ``[B, L, H]``::

        r = sigmoid(xr + h Ur + br)
        z = sigmoid(xz + h Uz + bz)
        n = tanh(xn + r * (h Un + bn))
        h' = (1 - z) * n + z * h
    """
    B, L, three_h = xg.shape
    H = three_h // 3
    if w_hh.shape != (H, three_h) or b_hh.shape != (three_h,):
        raise ContractError(f"gru weight shapes {w_hh.shape}, {b_hh.shape} do not match hidden size {H}")
    if L == 0:
        raise ContractError("gru over an empty sequence")
    if h0 is None:
        h0 = Tensor(np.zeros((B, H), dtype=xg.dtype))
    X, U, bh = xg.value, w_hh.value, b_hh.value
    hs = np.empty((B, L, H), dtype=X.dtype)
    rs, zs, ns, hns = (np.empty((B, L, H), dtype=X.dtype) for _ in range(4))
    h = h0.value
    for t in range(L):
        hg = h @ U + bh
        xt = X[:, t]
        r = _sig(xt[:, :H] + hg[:, :H])
        z = _sig(xt[:, H : 2 * H] + hg[:, H : 2 * H])
        hn = hg[:, 2 * H :]
        n = np.tanh(xt[:, 2 * H :] + r * hn)
        h = (1.0 - z) * n + z * h
        hs[:, t], rs[:, t], zs[:, t], ns[:, t], hns[:, t] = h, r, z, n, hn
    h_init = h0.value

    def bw(g):
        dX = np.empty_like(X)
        h_prev_all = np.concatenate([h_init[:, None], hs[:, :-1]], axis=1)
        a_rz = 1.0 - ns * ns
        carry = np.zeros((B, H), dtype=X.dtype)
        U_T = U.T
        for t in range(L - 1, -1, -1):
            r, z = rs[:, t], zs[:, t]
            dh = g[:, t] + carry
            dan = dh * (1.0 - z) * a_rz[:, t]
            dar = dan * hns[:, t] * r * (1.0 - r)
            daz = dh * (h_prev_all[:, t] - ns[:, t]) * z * (1.0 - z)
            dX[:, t, :H] = dar
            dX[:, t, H : 2 * H] = daz
            dX[:, t, 2 * H :] = dan
            carry = dh * z + dar @ U_T[:H] + daz @ U_T[H : 2 * H] + (dan * r) @ U_T[2 * H :]
        # gradient w.r.t. the hidden projection equals dX with the candidate block scaled by r
        dHG = dX.copy()
        dHG[:, :, 2 * H :] *= rs
        dU = h_prev_all.reshape(-1, H).T @ dHG.reshape(-1, three_h)
        return dX, dU, dHG.sum(axis=(0, 1)), carry

    return _node(hs, (xg, w_hh, b_hh, h0), "gru_scan", bw)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, check_finite: bool = True) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Leaf gradients accumulate (call ``zero_grad`` between steps); the
    gradients of intermediate nodes are overwritten. Returns a map from each
    reachable leaf that requires grad to its accumulated gradient.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = node.grad + g
            leaves[node] = node.grad
            continue
        node.grad = g
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if check_finite and not np.all(np.isfinite(pg)):
                raise NumericError(node.op, "non-finite gradient")
            prev = pending.get(id(parent))
            pending[id(parent)] = pg if prev is None else prev + pg
    return leaves
