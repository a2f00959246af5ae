"""Loss, reverse-mode gradients, Adam and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from qcrec.errors import DataError, NumericalError
from qcrec.model import (
    GELU_C,
    ForwardTrace,
    LayerCache,
    ModelConfig,
    Variant,
    layer_key,
    mask_contexts,
    merge_heads,
    model_forward,
    output_base,
    position_index,
    split_heads,
)
from qcrec.seqdata import WindowArrays

logger = logging.getLogger(__name__)

PADDED_TENSORS = ("item_emb", "ctx_emb")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 10
    seed: int = 0
    neg_sample_ratio: float = 0.0
    grad_clip: float | None = None
    frozen: tuple[str, ...] = ()

    def __post_init__(self):
        if not 0.0 <= self.neg_sample_ratio <= 1.0:
            raise DataError("neg_sample_ratio must be in [0, 1]")
        self.frozen = tuple(self.frozen)

    def to_json(self) -> dict:
        d = asdict(self)
        d["frozen"] = list(self.frozen)
        return d


# ------------------------------------------------------------------ loss


def cce_loss(scores, target: int, candidates=None) -> float:
    """``log(sum_{j in S, j != t} exp(y_j - y_t) + 1)`` with a max shift.

    ``scores`` is indexed by item; ``candidates`` defaults to every index.
    """
    scores = np.asarray(scores, dtype=float)
    if not np.all(np.isfinite(scores)):
        raise NumericalError("non-finite scores")
    y = scores if candidates is None else scores[np.asarray(candidates)]
    m = y.max()
    return float(m + np.log(np.exp(y - m).sum()) - scores[target])


class LogUniformSampler:
    """Zipfian negatives over frequency-sorted items.

    ``ranking[r]`` is the item at frequency rank ``r`` (0 = most frequent),
    drawn with probability ``log((r + 2) / (r + 1)) / log(n + 1)``.
    """

    def __init__(self, ranking):
        self.ranking = np.asarray(ranking, dtype=np.int64)
        n = self.ranking.size
        r = np.arange(n, dtype=float)
        self.rank_probs = np.log((r + 2.0) / (r + 1.0)) / math.log(n + 1.0)
        self._log_probs = np.log(self.rank_probs)
        self.item_log_probs = np.full(self.ranking.max() + 1, -np.inf)
        self.item_log_probs[self.ranking] = self._log_probs

    @property
    def n(self) -> int:
        return self.ranking.size

    def draw_ranks(self, size, rng: np.random.Generator) -> np.ndarray:
        """Independent draws (with replacement) of ranks."""
        return np.minimum(np.searchsorted(np.cumsum(self.rank_probs), rng.random(size), side="right"), self.n - 1)

    def sample(self, targets, n_neg: int, rng: np.random.Generator, chunk: int = 512) -> np.ndarray:
        """``(len(targets), n_neg + 1)`` candidates, target first, negatives
        distinct and drawn without replacement (Gumbel top-k)."""
        targets = np.asarray(targets, dtype=np.int64)
        if n_neg < 1 or n_neg > self.n - 1:
            raise DataError(f"cannot draw {n_neg} negatives from {self.n} items")
        out = np.empty((targets.size, n_neg + 1), dtype=np.int64)
        out[:, 0] = targets
        for lo in range(0, targets.size, chunk):
            t = targets[lo : lo + chunk]
            keys = self._log_probs + rng.gumbel(size=(t.size, self.n))
            keys[self.ranking[None, :] == t[:, None]] = -np.inf
            top = np.argpartition(-keys, n_neg - 1, axis=1)[:, :n_neg]
            out[lo : lo + chunk, 1:] = self.ranking[np.sort(top, axis=1)]
        return out


def n_negatives(n_items: int, ratio: float) -> int:
    return min(math.ceil(ratio * n_items), n_items - 1)


def sample_negatives(n_items: int, ratio: float, target: int, rng: np.random.Generator,
                     sampler: LogUniformSampler | None = None) -> np.ndarray:
    """Candidate item indices for one target (``1..n_items`` space).

    ``ratio == 1`` returns every item in index order; otherwise
    ``ceil(ratio * n_items)`` log-uniform negatives plus the target.
    """
    if not 0.0 < ratio <= 1.0:
        raise DataError("ratio must be in (0, 1]")
    if ratio == 1.0:
        return np.arange(1, n_items + 1)
    k = n_negatives(n_items, ratio)
    if k < 1:
        raise DataError(f"ratio {ratio} yields no negatives for {n_items} items")
    sampler = sampler or LogUniformSampler(np.arange(1, n_items + 1))
    return sampler.sample([target], k, rng)[0]


@dataclass
class OutputLoss:
    loss: float
    n_targets: int
    d_final: np.ndarray


def _log_softmax_grad(y):
    m = y.max(axis=-1, keepdims=True)
    e = np.exp(y - m)
    s = e.sum(axis=-1, keepdims=True)
    return m[..., 0] + np.log(s[..., 0]), e / s


def output_loss(trace: ForwardTrace, params, config: ModelConfig, targets, loss_mask, grads,
                sampler: LogUniformSampler | None = None, neg_ratio: float = 0.0,
                rng: np.random.Generator | None = None) -> OutputLoss:
    """Summed next-item loss over loss-masked positions.

    Accumulates gradients of the output projection, item embeddings and the
    outside context term into ``grads`` and returns the gradient with
    respect to the final hidden states.
    """
    rows, cols = np.nonzero(loss_mask)
    d_final = np.zeros_like(trace.final)
    if rows.size == 0:
        return OutputLoss(0.0, 0, d_final)
    t = np.asarray(targets)[rows, cols]
    base = output_base(trace, params, config, rows, cols)
    A = params["item_emb"]
    if neg_ratio in (0.0, 1.0):
        Ac = A[1 : config.n_items + 1]
        y = base @ Ac.T
        lse, p = _log_softmax_grad(y)
        idx = np.arange(rows.size)
        loss = lse - y[idx, t - 1]
        dy = p
        dy[idx, t - 1] -= 1.0
        d_base = dy @ Ac
        grads["item_emb"][1 : config.n_items + 1] += dy.T @ base
    else:
        if sampler is None or rng is None:
            raise DataError("sampled loss needs a sampler and an rng")
        cands = sampler.sample(t, n_negatives(config.n_items, neg_ratio), rng)
        Ac = A[cands]
        y = np.einsum("pd,pkd->pk", base, Ac)
        lse, p = _log_softmax_grad(y)
        loss = lse - y[:, 0]
        dy = p
        dy[:, 0] -= 1.0
        d_base = np.einsum("pk,pkd->pd", dy, Ac)
        np.add.at(grads["item_emb"], cands, dy[..., None] * base[:, None, :])
    if not np.all(np.isfinite(loss)):
        raise NumericalError("non-finite loss")
    grads["out_proj"] += trace.final[rows, cols].T @ d_base
    if config.mode.outside_term:
        np.add.at(grads["ctx_emb"], trace.contexts_shifted[rows, cols], d_base)
    d_final[rows, cols] = d_base @ params["out_proj"].T
    return OutputLoss(float(loss.sum()), int(rows.size), d_final)


# -------------------------------------------------------------- backward


def _ln_backward(dy, cache, g, grads, gkey, bkey):
    xhat, rstd = cache
    grads[gkey] += (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    grads[bkey] += dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * g
    return rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


def _gelu_grad(u, t):
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * u * u)


def _flat_outer(a, b):
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def layer_backward(d_out, cache: LayerCache, h: int, params, config: ModelConfig, items, contexts_shifted, grads):
    k = lambda name: layer_key(h, name)  # noqa: E731
    real = (items != 0)[..., None]

    dR2 = _ln_backward(d_out, cache.ln2, params[k("ln2_g")], grads, k("ln2_g"), k("ln2_b"))
    dF = dR2 if cache.ffn_drop is None else dR2 * cache.ffn_drop
    grads[k("w2")] += _flat_outer(cache.G, dF)
    grads[k("b2")] += dF.reshape(-1, dF.shape[-1]).sum(axis=0)
    dU = (dF @ params[k("w2")].T) * _gelu_grad(cache.U, cache.gelu_t)
    grads[k("w1")] += _flat_outer(cache.H1, dU)
    grads[k("b1")] += dU.reshape(-1, dU.shape[-1]).sum(axis=0)
    dH1 = dR2 + dU @ params[k("w1")].T

    dR1 = _ln_backward(dH1, cache.ln1, params[k("ln1_g")], grads, k("ln1_g"), k("ln1_b"))
    dA = dR1 * real
    grads[k("wo")] += _flat_outer(cache.Z, dA)
    grads[k("bo")] += dA.reshape(-1, dA.shape[-1]).sum(axis=0)
    dZ = split_heads(dA @ params[k("wo")].T, config.n_heads)
    dPd = dZ @ cache.V.transpose(0, 1, 3, 2)
    dV = cache.P_drop.transpose(0, 1, 3, 2) @ dZ
    dP = dPd if cache.attn_drop is None else dPd * cache.attn_drop
    P = cache.P
    dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) / math.sqrt(config.head_dim)
    dQ = merge_heads(dS @ cache.K)
    dK = merge_heads(dS.transpose(0, 1, 3, 2) @ cache.Q)
    dV = merge_heads(dV)
    grads[k("wq")] += _flat_outer(cache.q_in, dQ)
    grads[k("wk")] += _flat_outer(cache.X, dK)
    grads[k("wv")] += _flat_outer(cache.X, dV)
    dq_in = dQ @ params[k("wq")].T
    dX = dR1 + dq_in + dK @ params[k("wk")].T + dV @ params[k("wv")].T
    if config.mode.variant is Variant.LAST_LAYER_C and h == config.H - 1:
        np.add.at(grads["ctx_emb"], contexts_shifted, dq_in)
    return dX


def zero_grads(params) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.items()}


def backward(trace: ForwardTrace, params, config: ModelConfig, d_final, grads=None) -> dict[str, np.ndarray]:
    """Propagate ``d loss / d X^(H+1)`` through every block and the embeddings."""
    if grads is None:
        grads = zero_grads(params)
    if d_final.shape != trace.final.shape:
        raise DataError(f"gradient shape {d_final.shape} != hidden shape {trace.final.shape}")
    items, cs = trace.items, trace.contexts_shifted
    dX = d_final
    for h in reversed(range(config.H)):
        dX = layer_backward(dX, trace.caches[h], h, params, config, items, cs, grads)
    np.add.at(grads["item_emb"], items, dX)
    if config.positional:
        pos = position_index(items)
        real = pos >= 0
        np.add.at(grads["pos_emb"], pos[real], dX[real])
    if config.mode.variant is Variant.INPUT_B:
        np.add.at(grads["ctx_emb"], cs, dX)
    for name in PADDED_TENSORS:
        grads[name][0] = 0.0
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    return grads


def loss_and_grads(params, config: ModelConfig, batch: WindowArrays, *, training=False, rng=None,
                   sampler=None, neg_ratio=0.0, contexts=None):
    """Forward, summed loss and full gradients for one batch.

    ``contexts`` overrides ``batch.contexts`` (used for masked training input).
    """
    cs = batch.contexts if contexts is None else contexts
    trace = model_forward(batch.items, cs, params, config, training=training, rng=rng)
    grads = zero_grads(params)
    out = output_loss(trace, params, config, batch.targets, batch.loss_mask, grads, sampler, neg_ratio, rng)
    backward(trace, params, config, out.d_final, grads)
    return out.loss, out.n_targets, grads


def total_loss(params, config: ModelConfig, batch: WindowArrays) -> float:
    trace = model_forward(batch.items, batch.contexts, params, config, training=False)
    return output_loss(trace, params, config, batch.targets, batch.loss_mask, zero_grads(params)).loss


# ------------------------------------------------------ gradient checking


@dataclass
class TensorCheck:
    name: str
    n_coords: int
    max_rel_err: float
    passed: bool


def finite_difference_check(params, batch: WindowArrays, config: ModelConfig, epsilon=1e-5, tolerance=1e-4,
                            n_coords=32, seed=0, rel_floor=1e-5) -> list[TensorCheck]:
    """Compare analytic gradients with central differences.

    Relative error is ``|a - f| / max(|a|, |f|, rel_floor)``; the floor keeps
    exactly-zero gradients from turning rounding noise into a failure.
    """
    if np.dtype(config.dtype) != np.float64:
        raise DataError("finite-difference check needs float64")
    if config.dropout_rate:
        config = ModelConfig.from_json({**config.to_json(), "dropout_rate": 0.0})
    rng = np.random.default_rng(seed)
    _, _, grads = loss_and_grads(params, config, batch)
    report = []
    for name, p in params.items():
        flat = p.reshape(-1)
        candidates = np.arange(flat.size)
        if name in PADDED_TENSORS:
            candidates = candidates[candidates >= p.shape[1]]
        picks = candidates if candidates.size <= n_coords else rng.choice(candidates, n_coords, replace=False)
        worst = 0.0
        for i in picks:
            orig = flat[i]
            flat[i] = orig + epsilon
            up = total_loss(params, config, batch)
            flat[i] = orig - epsilon
            down = total_loss(params, config, batch)
            flat[i] = orig
            fd = (up - down) / (2 * epsilon)
            an = grads[name].reshape(-1)[i]
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), rel_floor))
        report.append(TensorCheck(name, int(len(picks)), float(worst), bool(worst < tolerance)))
    return report


# --------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params) -> "AdamState":
        return cls(zero_grads(params), zero_grads(params), 0)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        out["step"] = np.array(self.step)
        return out

    @classmethod
    def from_arrays(cls, arrays) -> "AdamState":
        m = {k[2:]: v for k, v in arrays.items() if k.startswith("m/")}
        v = {k[2:]: x for k, x in arrays.items() if k.startswith("v/")}
        return cls(m, v, int(arrays["step"]))


def clip_grads(grads, max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def adam_step(params, grads, state: AdamState, tc: TrainConfig) -> AdamState:
    """In-place bias-corrected Adam update; padding rows stay zero."""
    state.step += 1
    b1, b2 = tc.beta1, tc.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        if name in tc.frozen:
            continue
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= tc.learning_rate * (m / c1) / (np.sqrt(v / c2) + tc.adam_eps)
        if name in PADDED_TENSORS:
            p[0] = 0.0
    return state


# ---------------------------------------------------------------- training


@dataclass
class EpochResult:
    loss: float
    n_targets: int
    steps: int
    masked_fraction: float | None = None
    batch_losses: list[float] = field(default_factory=list)


def train_epoch(windows: WindowArrays, params, config: ModelConfig, tc: TrainConfig, rng: np.random.Generator,
                state: AdamState, sampler: LogUniformSampler | None = None,
                log: Callable[[dict], None] | None = None, epoch: int = 0) -> EpochResult:
    """One pass over shuffled windows; returns the mean per-target loss."""
    if len(windows) == 0:
        raise DataError("empty training set")
    order = rng.permutation(len(windows))
    total, count, steps = 0.0, 0, 0
    masked = nonzero = 0
    batch_losses = []
    mask_p = config.context_mask_prob if config.mode.variant is Variant.INPUT_B else 0.0
    for lo in range(0, len(order), tc.batch_size):
        batch = windows.take(order[lo : lo + tc.batch_size])
        contexts = batch.contexts
        if mask_p > 0.0:
            contexts = mask_contexts(contexts, mask_p, rng)
            nz = int((batch.contexts != 0).sum())
            masked += nz - int((contexts != 0).sum())
            nonzero += nz
        loss, n, grads = loss_and_grads(params, config, batch, training=True, rng=rng, sampler=sampler,
                                        neg_ratio=tc.neg_sample_ratio, contexts=contexts)
        if not math.isfinite(loss):
            raise NumericalError(f"loss diverged at epoch {epoch} step {steps}")
        if tc.grad_clip:
            clip_grads(grads, tc.grad_clip)
        adam_step(params, grads, state, tc)
        total += loss
        count += n
        steps += 1
        batch_losses.append(loss / max(n, 1))
        if log is not None:
            rec = {"epoch": epoch, "step": state.step, "loss": loss / max(n, 1), "lr": tc.learning_rate,
                   "seed": tc.seed, "mode": config.mode.variant.value, "p": config.context_mask_prob}
            if mask_p > 0.0:
                rec["masked_fraction"] = (nz - int((contexts != 0).sum())) / max(nz, 1)
            log(rec)
    return EpochResult(total / max(count, 1), count, steps, masked / nonzero if nonzero else None, batch_losses)


def fit(windows: WindowArrays, params, config: ModelConfig, tc: TrainConfig, *, sampler=None, state=None,
        start_epoch: int = 0, rng: np.random.Generator | None = None, log=None,
        on_epoch: Callable[[int, EpochResult], None] | None = None) -> list[EpochResult]:
    """Train for ``tc.max_epochs`` epochs (continuing from ``start_epoch``)."""
    rng = rng if rng is not None else np.random.default_rng(tc.seed)
    state = state if state is not None else AdamState.zeros(params)
    if tc.neg_sample_ratio not in (0.0, 1.0) and sampler is None:
        raise DataError("sampled softmax needs a frequency ranking")
    history = []
    for epoch in range(start_epoch, tc.max_epochs):
        res = train_epoch(windows, params, config, tc, rng, state, sampler, log, epoch)
        logger.info("epoch %d loss %.5f", epoch, res.loss)
        history.append(res)
        if on_epoch is not None:
            on_epoch(epoch, res)
    return history


class JsonlLog:
    """Line-delimited JSON log writer."""

    def __init__(self, path):
        self._fh = open(path, "a")

    def __call__(self, record: dict) -> None:
        self._fh.write(json.dumps(record) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()
