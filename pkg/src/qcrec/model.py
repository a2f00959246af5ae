"""Causal self-attention recommender with pluggable query-context fusion.

Shapes: ``B`` windows, ``N`` positions, ``D`` model width, ``V`` item
vocabulary including the padding row 0 and the BOS row ``V - 1``.

Context fusion variants:

* ``none``  -- contexts are ignored.
* ``A``     -- the shifted context embedding is added to the projected output
  before the dot product with item embeddings.
* ``B``     -- the shifted context embedding is added to the input embedding
  of every position (randomly masked during training).
* ``C``     -- the shifted context embedding is added to the query input of
  the last block only, plus the output term of ``A``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from qcrec.errors import DataError, NumericalError

CHECKPOINT_VERSION = 1
GELU_C = math.sqrt(2.0 / math.pi)


class Variant(str, enum.Enum):
    NONE = "none"
    OUTSIDE_A = "A"
    INPUT_B = "B"
    LAST_LAYER_C = "C"


class Visibility(str, enum.Enum):
    FULL_HISTORY = "full"
    CURRENT_ONLY = "current"


@dataclass(frozen=True)
class ContextMode:
    variant: Variant = Variant.NONE
    visibility: Visibility = Visibility.FULL_HISTORY

    @classmethod
    def parse(cls, variant: str | Variant, visibility: str | Visibility = Visibility.FULL_HISTORY) -> "ContextMode":
        return cls(Variant(variant), Visibility(visibility))

    @property
    def outside_term(self) -> bool:
        return self.variant in (Variant.OUTSIDE_A, Variant.LAST_LAYER_C)


@dataclass
class ModelConfig:
    N: int
    D: int
    H: int = 2
    n_heads: int = 2
    d_ff: int | None = None
    vocab_items: int = 3
    vocab_contexts: int = 2
    mode: ContextMode = field(default_factory=ContextMode)
    dropout_rate: float = 0.0
    positional: bool = True
    context_mask_prob: float = 0.0
    ln_eps: float = 1e-5
    dtype: str = "float64"

    def __post_init__(self):
        if isinstance(self.mode, dict):
            self.mode = ContextMode.parse(self.mode["variant"], self.mode["visibility"])
        if self.d_ff is None:
            self.d_ff = 4 * self.D
        if self.D % self.n_heads:
            raise DataError(f"D={self.D} not divisible by n_heads={self.n_heads}")
        if self.H < 1:
            raise DataError("H must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise DataError("dropout_rate must be in [0, 1)")
        if not 0.0 <= self.context_mask_prob < 1.0:
            raise DataError("context_mask_prob must be in [0, 1)")
        if self.vocab_items < 3:
            raise DataError("vocab_items must cover padding, BOS and at least one item")

    @property
    def n_items(self) -> int:
        return self.vocab_items - 2

    @property
    def bos_index(self) -> int:
        return self.vocab_items - 1

    @property
    def head_dim(self) -> int:
        return self.D // self.n_heads

    def with_mode(self, variant=None, visibility=None) -> "ModelConfig":
        mode = ContextMode(
            Variant(variant) if variant is not None else self.mode.variant,
            Visibility(visibility) if visibility is not None else self.mode.visibility,
        )
        d = asdict(self)
        d["mode"] = mode
        return ModelConfig(**d)

    def to_json(self) -> dict:
        d = asdict(self)
        d["mode"] = {"variant": self.mode.variant.value, "visibility": self.mode.visibility.value}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ------------------------------------------------------------ parameters

LAYER_KEYS = ("wq", "wk", "wv", "wo", "bo", "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")


def layer_key(h: int, name: str) -> str:
    return f"layer{h}.{name}"


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Xavier-style initialisation; padding rows are zero."""
    D, F = config.D, config.d_ff
    dt = np.dtype(config.dtype)

    def xavier(fan_in, fan_out, shape=None):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out)).astype(dt)

    params = {
        "item_emb": rng.normal(0.0, D**-0.5, size=(config.vocab_items, D)).astype(dt),
        "ctx_emb": rng.normal(0.0, D**-0.5, size=(config.vocab_contexts, D)).astype(dt),
        "pos_emb": rng.normal(0.0, 0.02, size=(config.N, D)).astype(dt),
        "out_proj": xavier(D, D),
    }
    params["item_emb"][0] = 0.0
    params["ctx_emb"][0] = 0.0
    for h in range(config.H):
        params[layer_key(h, "wq")] = xavier(D, D)
        params[layer_key(h, "wk")] = xavier(D, D)
        params[layer_key(h, "wv")] = xavier(D, D)
        params[layer_key(h, "wo")] = xavier(D, D)
        params[layer_key(h, "bo")] = np.zeros(D, dtype=dt)
        params[layer_key(h, "ln1_g")] = np.ones(D, dtype=dt)
        params[layer_key(h, "ln1_b")] = np.zeros(D, dtype=dt)
        params[layer_key(h, "w1")] = xavier(D, F)
        params[layer_key(h, "b1")] = np.zeros(F, dtype=dt)
        params[layer_key(h, "w2")] = xavier(F, D)
        params[layer_key(h, "b2")] = np.zeros(D, dtype=dt)
        params[layer_key(h, "ln2_g")] = np.ones(D, dtype=dt)
        params[layer_key(h, "ln2_b")] = np.zeros(D, dtype=dt)
    return params


def save_checkpoint(path: str | Path, config: ModelConfig, params: dict, *, meta: dict | None = None,
                    state: dict[str, np.ndarray] | None = None, storage_dtype: str = "float32") -> None:
    """Write a versioned header, the config echo and named tensors to one ``.npz``.

    ``state`` holds auxiliary arrays (optimizer moments) stored verbatim.
    """
    header = {"version": CHECKPOINT_VERSION, "config": config.to_json(), "meta": meta or {},
              "shapes": {k: list(v.shape) for k, v in params.items()}}
    arrays = {f"param/{k}": v.astype(storage_dtype) for k, v in params.items()}
    arrays.update({f"state/{k}": v for k, v in (state or {}).items()})
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path: str | Path):
    """Return ``(config, params, meta, state)``."""
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"unsupported checkpoint version {header.get('version')}")
        config = ModelConfig.from_json(header["config"])
        dt = np.dtype(config.dtype)
        params = {k[6:]: z[k].astype(dt) for k in z.files if k.startswith("param/")}
        state = {k[6:]: z[k] for k in z.files if k.startswith("state/")}
    for k, shape in header["shapes"].items():
        if list(params[k].shape) != shape:
            raise DataError(f"checkpoint tensor {k} has shape {params[k].shape}, header says {shape}")
    return config, params, header.get("meta", {}), state


# ---------------------------------------------------------- primitives


def layer_norm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def gelu(u):
    """tanh-approximated GELU, returned with the tanh value for backprop."""
    t = np.tanh(GELU_C * (u + 0.044715 * u**3))
    return 0.5 * u * (1.0 + t), t


def masked_softmax(scores, admissible):
    """Row softmax over admissible entries; rows with none are all zero."""
    s = np.where(admissible, scores, -np.inf)
    m = s.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(s - m)
    denom = e.sum(axis=-1, keepdims=True)
    return e / np.where(denom > 0, denom, 1.0)


def split_heads(x, n_heads):
    B, N, D = x.shape
    return x.reshape(B, N, n_heads, D // n_heads).transpose(0, 2, 1, 3)


def merge_heads(x):
    B, h, N, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, N, h * dh)


def _check_finite(x, what, layer=None):
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        where = f" in layer {layer}" if layer is not None else ""
        raise NumericalError(f"non-finite {what}{where} at index {tuple(int(i) for i in bad)}")


# -------------------------------------------------------------- forward


def shift_contexts(contexts) -> np.ndarray:
    """Align ``c_{i+1}`` with position ``i``: drop the first context."""
    contexts = np.asarray(contexts)
    return contexts[..., 1:].copy()


def shift_matrix(N: int) -> np.ndarray:
    """The binary ``N x (N+1)`` matrix with ``L[i, i+1] = 1``."""
    return np.eye(N, N + 1, k=1)


def mask_contexts(contexts_shifted, p: float, rng: np.random.Generator) -> np.ndarray:
    """Replace each nonzero context by padding with probability ``p``."""
    if not 0.0 <= p < 1.0:
        raise DataError("mask probability must be in [0, 1)")
    cs = np.asarray(contexts_shifted)
    if p == 0.0:
        return cs.copy()
    drop = rng.random(cs.shape) < p
    return np.where(drop, 0, cs)


def position_index(items: np.ndarray) -> np.ndarray:
    """Offset of each position from the first non-padding token (-1 on padding)."""
    real = items != 0
    return np.where(real, np.cumsum(real, axis=-1) - 1, -1)


def embed_input(items, contexts_shifted, params, config: ModelConfig) -> np.ndarray:
    items = np.asarray(items)
    if items.size and (items.min() < 0 or items.max() >= config.vocab_items):
        raise DataError("item index out of range")
    X = params["item_emb"][items]
    if config.positional:
        pos = position_index(items)
        if pos.max(initial=-1) >= params["pos_emb"].shape[0]:
            raise DataError("window longer than positional table")
        X = X + np.where((pos >= 0)[..., None], params["pos_emb"][np.maximum(pos, 0)], 0.0)
    if config.mode.variant is Variant.INPUT_B:
        cs = np.asarray(contexts_shifted)
        if cs.size and (cs.min() < 0 or cs.max() >= config.vocab_contexts):
            raise DataError("context index out of range")
        X = X + params["ctx_emb"][cs]
    return X


@dataclass
class LayerCache:
    X: np.ndarray
    q_in: np.ndarray
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    P: np.ndarray
    P_drop: np.ndarray
    attn_drop: np.ndarray | None
    Z: np.ndarray
    ln1: tuple
    H1: np.ndarray
    U: np.ndarray
    gelu_t: np.ndarray
    G: np.ndarray
    ffn_drop: np.ndarray | None
    ln2: tuple


@dataclass
class ForwardTrace:
    items: np.ndarray
    contexts_shifted: np.ndarray
    X_layers: list[np.ndarray]
    attn_probs: list[np.ndarray]
    caches: list[LayerCache]
    training: bool

    @property
    def final(self) -> np.ndarray:
        return self.X_layers[-1]


def _dropout_mask(rng, shape, rate, dtype):
    if rate == 0.0 or rng is None:
        return None
    return (rng.random(shape) >= rate).astype(dtype) / (1.0 - rate)


def attention_layer_forward(X, h, params, config: ModelConfig, contexts_shifted, items,
                            training=False, rng=None):
    """One residual block; returns ``(X_next, cache)``."""
    key = lambda name: params[layer_key(h, name)]  # noqa: E731
    nh = config.n_heads
    real = items != 0
    q_in = X
    if config.mode.variant is Variant.LAST_LAYER_C and h == config.H - 1:
        q_in = X + params["ctx_emb"][contexts_shifted]
    Q = split_heads(q_in @ key("wq"), nh)
    K = split_heads(X @ key("wk"), nh)
    V = split_heads(X @ key("wv"), nh)
    S = (Q @ K.transpose(0, 1, 3, 2)) / math.sqrt(config.head_dim)
    N = X.shape[1]
    causal = np.tril(np.ones((N, N), dtype=bool))
    admissible = causal[None, None] & real[:, None, None, :] & real[:, None, :, None]
    P = masked_softmax(S, admissible)
    rate = config.dropout_rate if training else 0.0
    attn_drop = _dropout_mask(rng, P.shape, rate, P.dtype)
    P_drop = P if attn_drop is None else P * attn_drop
    Z = merge_heads(P_drop @ V)
    A = (Z @ key("wo") + key("bo")) * real[..., None]
    H1, ln1 = layer_norm(X + A, key("ln1_g"), key("ln1_b"), config.ln_eps)
    U = H1 @ key("w1") + key("b1")
    G, t = gelu(U)
    Fo = G @ key("w2") + key("b2")
    ffn_drop = _dropout_mask(rng, Fo.shape, rate, Fo.dtype)
    if ffn_drop is not None:
        Fo = Fo * ffn_drop
    out, ln2 = layer_norm(H1 + Fo, key("ln2_g"), key("ln2_b"), config.ln_eps)
    _check_finite(out, "hidden state", h)
    cache = LayerCache(X, q_in, Q, K, V, P, P_drop, attn_drop, Z, ln1, H1, U, t, G, ffn_drop, ln2)
    return out, cache


def visible_contexts(contexts_shifted, config: ModelConfig, training: bool) -> np.ndarray:
    """Apply the visibility regime: at inference under ``current`` only the
    final position keeps its context."""
    cs = np.asarray(contexts_shifted)
    if training or config.mode.visibility is Visibility.FULL_HISTORY:
        return cs
    out = np.zeros_like(cs)
    out[..., -1] = cs[..., -1]
    return out


def model_forward(items, contexts_shifted, params, config: ModelConfig, training=False,
                  rng: np.random.Generator | None = None) -> ForwardTrace:
    """Run the full stack on a batch ``(B, N)`` (a single window is promoted)."""
    items = np.atleast_2d(np.asarray(items))
    cs = visible_contexts(np.atleast_2d(np.asarray(contexts_shifted)), config, training)
    X = embed_input(items, cs, params, config)
    _check_finite(X, "input embedding")
    layers, probs, caches = [X], [], []
    for h in range(config.H):
        X, cache = attention_layer_forward(X, h, params, config, cs, items, training, rng)
        layers.append(X)
        probs.append(cache.P)
        caches.append(cache)
    return ForwardTrace(items, cs, layers, probs, caches, training)


def output_base(trace: ForwardTrace, params, config: ModelConfig, rows, cols) -> np.ndarray:
    """User representation ``X_i W_O`` (+ context term for A/C) at given positions."""
    base = trace.final[rows, cols] @ params["out_proj"]
    if config.mode.outside_term:
        base = base + params["ctx_emb"][trace.contexts_shifted[rows, cols]]
    return base


def score_positions(trace: ForwardTrace, params, config: ModelConfig, positions=None) -> np.ndarray:
    """Scores over real items ``1..n_items`` at the requested positions.

    ``positions`` is a boolean ``(B, N)`` mask or a pair of index arrays;
    by default the final position of every window. Column ``j`` of the
    result is item ``j + 1``.
    """
    B, N = trace.items.shape
    if positions is None:
        rows, cols = np.arange(B), np.full(B, N - 1)
    elif isinstance(positions, np.ndarray) and positions.dtype == bool:
        rows, cols = np.nonzero(positions)
    else:
        rows, cols = positions
    base = output_base(trace, params, config, rows, cols)
    return base @ params["item_emb"][1 : config.n_items + 1].T


def rank_items(scores, k: int, exclude=()) -> np.ndarray:
    """Indices of the ``k`` largest scores, ties broken by smaller index."""
    scores = np.asarray(scores)
    candidates = np.setdiff1d(np.arange(scores.size), np.asarray(list(exclude), dtype=np.int64))
    if k < 1 or k > candidates.size:
        raise DataError(f"k={k} out of range for {candidates.size} candidates")
    order = np.lexsort((candidates, -scores[candidates]))
    return candidates[order[:k]]
