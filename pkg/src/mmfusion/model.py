"""Static encoder, per-modality GRU encoders, fusion blocks and task heads.

Data flow for a batch of clips::

    static_feat --MLP--> h_s ------------------------------+
    window[m] --GRU stack--> states --proj--> fusion(m, h_s) -> pooled_m
    concat(pooled_expr, pooled_audio, pooled_word, h_s) --MLP--> AU scores / EXPR logits

In the fusion block the second (cross) attention takes its key and value
from ``h_s`` alone, so each query attends over exactly one token.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mmfusion import tensor as T
from mmfusion.errors import ConfigError, ContractError
from mmfusion.features import MODALITIES, NUM_AU, NUM_EXPR, ClipRecord, FeatureDims
from mmfusion.tensor import Tensor

Params = dict[str, Tensor]


@dataclass
class ModelConfig:
    dims: FeatureDims = field(default_factory=FeatureDims)
    model_dim: int = 32
    hidden_size: int = 32
    gru_layers: int = 4
    head_count: int = 4
    fusion_depth: int = 1
    ffn_mult: int = 4
    head_hidden: int = 32
    tasks: tuple[str, ...] = ("expr",)
    modalities: dict = field(default_factory=lambda: {m: True for m in MODALITIES})
    fusion: str = "transformer"
    positional_encoding: bool = False
    ln_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        self.dims = FeatureDims(*self.dims)
        self.tasks = tuple(self.tasks)
        if self.model_dim % self.head_count:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by head_count {self.head_count}")
        if self.fusion not in ("transformer", "concat"):
            raise ConfigError(f"unknown fusion mode {self.fusion!r}")
        if not self.tasks or any(t not in ("au", "expr") for t in self.tasks):
            raise ConfigError(f"tasks must be a non-empty subset of ('au', 'expr'), got {self.tasks}")
        unknown = set(self.modalities) - set(MODALITIES)
        if unknown:
            raise ConfigError(f"unknown modalities {sorted(unknown)}")
        for m in MODALITIES:
            self.modalities.setdefault(m, True)
        if self.gru_layers < 1 or self.fusion_depth < 1:
            raise ConfigError("gru_layers and fusion_depth must be >= 1")

    @property
    def enabled(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if self.modalities[m])

    @property
    def head_input_dim(self) -> int:
        return 3 * self.model_dim + self.dims.d_s

    def modality_dim(self, name: str) -> int:
        return {"expr_emb": self.dims.d_e, "audio": self.dims.d_a, "word": self.dims.d_w}[name]


@dataclass
class Batch:
    """Stacked model inputs: ``static`` is ``[B, d_s]``, each window ``[B, L, d]``."""

    static: np.ndarray
    windows: dict[str, np.ndarray]
    expr: np.ndarray | None = None
    au: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.static)


def batch_from_clips(clips: list[ClipRecord]) -> Batch:
    if not clips:
        raise ContractError("empty clip list")
    windows = {m: np.stack([c.modality_window(m) for c in clips]) for m in MODALITIES}
    expr = au = None
    if all(c.expr_label is not None for c in clips):
        expr = np.array([c.expr_label for c in clips])
    if all(c.au_label is not None for c in clips):
        au = np.stack([c.au_label for c in clips])
    return Batch(np.stack([c.static_feat for c in clips]), windows, expr, au)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class _Init:
    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype
        self.params: Params = {}

    def linear(self, name: str, fan_in: int, fan_out: int) -> None:
        bound = 1.0 / math.sqrt(fan_in)
        w = self.rng.uniform(-bound, bound, size=(fan_in, fan_out))
        self.params[f"{name}.w"] = Tensor(w.astype(self.dtype), requires_grad=True, name=f"{name}.w")
        self.params[f"{name}.b"] = Tensor(np.zeros(fan_out, self.dtype), requires_grad=True, name=f"{name}.b")

    def norm(self, name: str, dim: int) -> None:
        self.params[f"{name}.g"] = Tensor(np.ones(dim, self.dtype), requires_grad=True, name=f"{name}.g")
        self.params[f"{name}.b"] = Tensor(np.zeros(dim, self.dtype), requires_grad=True, name=f"{name}.b")

    def gru(self, name: str, in_dim: int, hidden: int, layers: int) -> None:
        for layer in range(layers):
            d = in_dim if layer == 0 else hidden
            bound = 1.0 / math.sqrt(hidden)
            for key, shape in (("w_ih", (d, 3 * hidden)), ("w_hh", (hidden, 3 * hidden))):
                w = self.rng.uniform(-bound, bound, size=shape).astype(self.dtype)
                full = f"{name}.l{layer}.{key}"
                self.params[full] = Tensor(w, requires_grad=True, name=full)
            for key in ("b_ih", "b_hh"):
                full = f"{name}.l{layer}.{key}"
                self.params[full] = Tensor(np.zeros(3 * hidden, self.dtype), requires_grad=True, name=full)

    def fusion_block(self, name: str, dim: int, kv_dim: int, ffn: int) -> None:
        for proj in ("q", "k", "v", "o"):
            self.linear(f"{name}.self.{proj}", dim, dim)
        self.linear(f"{name}.cross.q", dim, dim)
        self.linear(f"{name}.cross.k", kv_dim, dim)
        self.linear(f"{name}.cross.v", kv_dim, dim)
        self.linear(f"{name}.cross.o", dim, dim)
        self.linear(f"{name}.ffn1", dim, ffn)
        self.linear(f"{name}.ffn2", ffn, dim)
        for i in (1, 2, 3):
            self.norm(f"{name}.ln{i}", dim)


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit norm gains.

    Parameters are created in a fixed order from ``seed`` and returned keyed
    by name in sorted order.
    """
    init = _Init(np.random.default_rng(seed), np.dtype(cfg.dtype))
    d_s = cfg.dims.d_s
    init.linear("static.l1", d_s, d_s)
    init.linear("static.l2", d_s, d_s)
    for m in cfg.enabled:
        init.gru(f"gru.{m}", cfg.modality_dim(m), cfg.hidden_size, cfg.gru_layers)
        init.linear(f"proj.{m}", cfg.hidden_size, cfg.model_dim)
        if cfg.fusion == "transformer":
            for depth in range(cfg.fusion_depth):
                init.fusion_block(f"fuse.{m}.{depth}", cfg.model_dim, d_s, cfg.ffn_mult * cfg.model_dim)
    for task, out in (("au", NUM_AU), ("expr", NUM_EXPR)):
        if task in cfg.tasks:
            init.linear(f"head.{task}.l1", cfg.head_input_dim, cfg.head_hidden)
            init.linear(f"head.{task}.l2", cfg.head_hidden, out)
    return {k: init.params[k] for k in sorted(init.params)}


def params_to_arrays(params: Params) -> dict[str, np.ndarray]:
    return {k: p.value for k, p in params.items()}


def params_from_arrays(arrays: dict[str, np.ndarray], cfg: ModelConfig) -> Params:
    """Rebuild trainable tensors, checking names and shapes against ``cfg``."""
    ref = init_params(cfg, 0)
    if set(ref) != set(arrays):
        missing = sorted(set(ref) - set(arrays))
        extra = sorted(set(arrays) - set(ref))
        raise ContractError(f"checkpoint does not match config: missing {missing[:3]}, unexpected {extra[:3]}")
    out = {}
    for k in ref:
        if arrays[k].shape != ref[k].shape:
            raise ContractError(f"parameter {k}: checkpoint shape {arrays[k].shape}, config expects {ref[k].shape}")
        out[k] = Tensor(np.asarray(arrays[k], dtype=cfg.dtype), requires_grad=True, name=k)
    return out


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def linear(x: Tensor, params: Params, name: str) -> Tensor:
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


def layer_norm(x: Tensor, params: Params, name: str, eps: float = 1e-5) -> Tensor:
    return T.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"], eps)


def gru_stack(x: Tensor, params: Params, name: str, layers: int) -> Tensor:
    """All top-layer hidden states of a stacked GRU, ``[B, L, H]``, zero initial state."""
    if x.ndim != 3 or x.shape[1] == 0:
        raise ContractError(f"GRU input must be a non-empty [B, L, d] sequence, got {x.shape}")
    h = x
    for layer in range(layers):
        p = f"{name}.l{layer}"
        w_ih = params[f"{p}.w_ih"]
        if h.shape[-1] != w_ih.shape[0]:
            raise ContractError(f"{p}: input dim {h.shape[-1]} != {w_ih.shape[0]}")
        xg = h @ w_ih + params[f"{p}.b_ih"]
        h = T.gru_scan(xg, params[f"{p}.w_hh"], params[f"{p}.b_hh"])
    return h


def gru_forward(seq, params: Params, name: str, layers: int) -> Tensor:
    """Final top-layer hidden state for a sequence.

    ``seq`` is a list of vectors / ``[L, d]`` array (returns ``[H]``) or a
    ``[B, L, d]`` batch (returns ``[B, H]``).
    """
    if isinstance(seq, Tensor):
        x = seq
    else:
        if len(seq) == 0:
            raise ContractError("GRU over an empty sequence")
        x = Tensor(np.asarray(np.stack(seq) if isinstance(seq, list) else seq))
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
    out = gru_stack(x, params, name, layers)[:, -1]
    return out[0] if single else out


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, L, D = x.shape
    return x.reshape(B, L, heads, D // heads).transpose(0, 2, 1, 3)


def attention(q_in: Tensor, kv_in: Tensor, params: Params, name: str, heads: int) -> tuple[Tensor, Tensor]:
    """Multi-head scaled dot-product attention.

    Returns the output-projected result ``[B, Lq, D]`` and the attention
    weights ``[B, heads, Lq, Lk]``.
    """
    q = _split_heads(linear(q_in, params, f"{name}.q"), heads)
    k = _split_heads(linear(kv_in, params, f"{name}.k"), heads)
    v = _split_heads(linear(kv_in, params, f"{name}.v"), heads)
    d_k = q.shape[-1]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d_k))
    weights = T.softmax(scores)
    ctx = weights @ v
    B, H, Lq, dk = ctx.shape
    ctx = ctx.transpose(0, 2, 1, 3).reshape(B, Lq, H * dk)
    return linear(ctx, params, f"{name}.o"), weights


def cross_attention_static(
    query_seq: Tensor, h_s: Tensor, params: Params, name: str, heads: int, eps: float = 1e-5
) -> tuple[Tensor, Tensor, Tensor]:
    """Cross attention whose key and value both come from the single token ``h_s``.

    ``query_seq`` is ``[B, L, D]`` and ``h_s`` is ``[B, d_s]``. Returns
    ``(normed, attended, weights)``: the residual + layer-norm output, the
    attention output before the residual, and the ``[B, heads, L, 1]``
    weights (identically 1).
    """
    if query_seq.ndim != 3 or h_s.ndim != 2 or query_seq.shape[0] != h_s.shape[0]:
        raise ContractError(f"cross attention expects [B, L, D] and [B, d_s], got {query_seq.shape}, {h_s.shape}")
    if h_s.shape[-1] != params[f"{name}.cross.k.w"].shape[0]:
        raise ContractError(f"h_s dim {h_s.shape[-1]} does not match key projection")
    kv = h_s.reshape(h_s.shape[0], 1, h_s.shape[1])
    attended, weights = attention(query_seq, kv, params, f"{name}.cross", heads)
    normed = layer_norm(query_seq + attended, params, f"{name}.ln2", eps)
    return normed, attended, weights


def sinusoidal_encoding(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)


def fusion_block_sequence(x: Tensor, h_s: Tensor, params: Params, name: str, heads: int, eps: float = 1e-5) -> Tensor:
    """Self attention, static cross attention and feed-forward, each residual + norm."""
    sa, _ = attention(x, x, params, f"{name}.self", heads)
    x = layer_norm(x + sa, params, f"{name}.ln1", eps)
    x, _, _ = cross_attention_static(x, h_s, params, name, heads, eps)
    ff = linear(T.relu(linear(x, params, f"{name}.ffn1")), params, f"{name}.ffn2")
    return layer_norm(x + ff, params, f"{name}.ln3", eps)


def fusion_block(x: Tensor, h_s: Tensor, params: Params, name: str, heads: int, eps: float = 1e-5) -> Tensor:
    """One fusion block followed by a mean over sequence positions, ``[B, D]``."""
    return fusion_block_sequence(x, h_s, params, name, heads, eps).mean(axis=1)


def static_encoder(static: Tensor, params: Params) -> Tensor:
    return T.tanh(linear(T.tanh(linear(static, params, "static.l1")), params, "static.l2"))


def _as_input(arr, dtype) -> Tensor:
    return arr if isinstance(arr, Tensor) else Tensor(np.asarray(arr, dtype=dtype))


def encode(batch: Batch, params: Params, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Head input ``[B, 3*model_dim + d_s]`` and ``h_s``."""
    dtype = np.dtype(cfg.dtype)
    static = _as_input(batch.static, dtype)
    if static.ndim != 2 or static.shape[1] != cfg.dims.d_s:
        raise ContractError(f"static features {static.shape} do not match d_s={cfg.dims.d_s}")
    B = static.shape[0]
    h_s = static_encoder(static, params)
    parts = []
    for m in MODALITIES:
        if not cfg.modalities[m]:
            parts.append(Tensor(np.zeros((B, cfg.model_dim), dtype)))
            continue
        if m not in batch.windows or batch.windows[m] is None:
            raise ContractError(f"batch is missing the {m} window (disable it in the config instead)")
        x = _as_input(batch.windows[m], dtype)
        if x.ndim != 3 or x.shape[0] != B or x.shape[2] != cfg.modality_dim(m):
            raise ContractError(f"{m} window shape {x.shape} does not match config dim {cfg.modality_dim(m)}")
        states = linear(gru_stack(x, params, f"gru.{m}", cfg.gru_layers), params, f"proj.{m}")
        if cfg.fusion == "concat":
            parts.append(states[:, -1])
            continue
        if cfg.positional_encoding:
            states = states + sinusoidal_encoding(states.shape[1], cfg.model_dim, dtype)
        for depth in range(cfg.fusion_depth - 1):
            states = fusion_block_sequence(states, h_s, params, f"fuse.{m}.{depth}", cfg.head_count, cfg.ln_eps)
        parts.append(fusion_block(states, h_s, params, f"fuse.{m}.{cfg.fusion_depth - 1}", cfg.head_count, cfg.ln_eps))
    parts.append(h_s)
    return T.concat(parts, axis=-1), h_s


def model_forward(batch: Batch | ClipRecord, params: Params, cfg: ModelConfig) -> dict[str, Tensor]:
    """Raw outputs per task: ``"au"`` -> unscaled scores ``[B, 12]``, ``"expr"`` -> logits ``[B, 8]``."""
    if isinstance(batch, ClipRecord):
        batch = batch_from_clips([batch])
    feat, _ = encode(batch, params, cfg)
    out = {}
    for task in cfg.tasks:
        hidden = T.relu(linear(feat, params, f"head.{task}.l1"))
        out[task] = linear(hidden, params, f"head.{task}.l2")
    return out
