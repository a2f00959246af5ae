"""Brute-force references for the batched model and loss.

Nothing here calls into the batched forward pass; only the parameter
dictionary and config are shared.
"""

from __future__ import annotations

import math

import numpy as np

from qcrec.errors import DataError
from qcrec.model import ModelConfig, Variant, layer_key
from qcrec.seqdata import EventLog, Interaction, Vocab

_GELU_C = math.sqrt(2.0 / math.pi)


def reference_softmax_ce(scores, target: int) -> float:
    """``-log softmax(scores)[target]`` using exactly-rounded sums."""
    ys = [float(y) for y in scores]
    m = max(ys)
    total = math.fsum(math.exp(y - m) for y in ys)
    return -(ys[target] - m - math.log(total))


def _norm(x, g, b, eps):
    mu = math.fsum(x) / len(x)
    var = math.fsum((v - mu) ** 2 for v in x) / len(x)
    return (x - mu) / math.sqrt(var + eps) * g + b


def _gelu(u):
    return 0.5 * u * (1.0 + np.tanh(_GELU_C * (u + 0.044715 * u**3)))


def _prefix_forward(tokens, ctx_final, ctx_history, params, config: ModelConfig, fuse: str, n_pad: int = 0):
    """Final-position hidden state of one prefix, row by row.

    The prefix sits behind ``n_pad`` zero rows. Those rows are carried
    through every layer (attending only among themselves) so a prefix costs
    as much as a full window, but no real row ever reads them.
    """
    n = n_pad + len(tokens)
    D, nh, dh = config.D, config.n_heads, config.head_dim
    X = [np.zeros(D) for _ in range(n_pad)]
    for pos, tok in enumerate(tokens):
        row = params["item_emb"][tok].astype(np.float64).copy()
        if config.positional:
            row = row + params["pos_emb"][pos]
        if config.mode.variant is Variant.INPUT_B:
            row = row + params["ctx_emb"][ctx_history[pos]]
        X.append(row)
    if fuse == "input" and config.mode.variant in (Variant.OUTSIDE_A, Variant.LAST_LAYER_C):
        X[-1] = X[-1] + params["ctx_emb"][ctx_final]
    for h in range(config.H):
        p = lambda name: params[layer_key(h, name)]  # noqa: E731
        keys = [x @ p("wk") for x in X]
        vals = [x @ p("wv") for x in X]
        out = []
        for i in range(n):
            q_row = X[i]
            if (fuse == "query" and config.mode.variant is Variant.LAST_LAYER_C and h == config.H - 1
                    and i == n - 1):
                q_row = q_row + params["ctx_emb"][ctx_final]
            q = q_row @ p("wq")
            z = np.zeros(D)
            for head in range(nh):
                sl = slice(head * dh, (head + 1) * dh)
                visible = range(0 if i < n_pad else n_pad, i + 1)
                logits = [float(q[sl] @ keys[j][sl]) / math.sqrt(dh) for j in visible]
                m = max(logits)
                w = [math.exp(v - m) for v in logits]
                total = math.fsum(w)
                for j, wj in zip(visible, w):
                    z[sl] += (wj / total) * vals[j][sl]
            a = z @ p("wo") + p("bo")
            h1 = _norm(X[i] + a, p("ln1_g"), p("ln1_b"), config.ln_eps)
            f = _gelu(h1 @ p("w1") + p("b1")) @ p("w2") + p("b2")
            out.append(_norm(h1 + f, p("ln2_g"), p("ln2_b"), config.ln_eps))
        X = out
    return X[-1]


def incremental_forward_oracle(items, contexts_shifted, params, config: ModelConfig, fuse: str = "query",
                               pad: bool = True):
    """Scores for every non-padding position via one fresh pass per prefix.

    Position ``i`` is scored from the prefix ending at ``i`` with its shifted
    context fused only at the prefix's final position (``fuse="query"``:
    last-layer query for C; ``fuse="input"``: added to the final input
    embedding, which also feeds keys and values and is *not* equivalent to
    C). Under B the historical shifted contexts stay at their positions.
    Each prefix is left-padded back to the window length before its pass
    (``pad=False`` drops the padding, which changes cost but not scores).
    Padding rows of the result are NaN. Cost is cubic in the window length.
    """
    if fuse not in ("query", "input"):
        raise DataError(f"unknown fuse {fuse!r}")
    items = np.asarray(items)
    cs = np.asarray(contexts_shifted)
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    N = items.shape[0]
    scores = np.full((N, config.n_items), np.nan)
    real = np.flatnonzero(items != 0)
    if real.size == 0:
        return scores
    first = real[0]
    cand = params["item_emb"][1 : config.n_items + 1]
    for i in range(first, N):
        tokens = items[first : i + 1]
        hist = cs[first : i + 1]
        final = _prefix_forward(tokens, cs[i], hist, params, config, fuse, n_pad=N - len(tokens) if pad else 0)
        base = final @ params["out_proj"]
        if config.mode.variant in (Variant.OUTSIDE_A, Variant.LAST_LAYER_C):
            base = base + params["ctx_emb"][cs[i]]
        scores[i] = cand @ base
    return scores


def forward_cost(N: int, D: int, H: int, d_ff: int | None = None) -> dict[str, int]:
    """Multiply-add counts of one causal pass and of the left-padded per-prefix oracle."""
    d_ff = d_ff or 4 * D

    def one_pass(n_real, n_pad=0):
        # scores plus weighted values; padding and real rows attend within their own block
        pairs = n_real * (n_real + 1) // 2 + n_pad * (n_pad + 1) // 2
        n = n_real + n_pad
        return H * (pairs * D * 2 + n * D * D * 4 + n * D * d_ff * 2)

    return {"single": one_pass(N), "oracle": sum(one_pass(i, N - i) for i in range(1, N + 1))}


# ------------------------------------------------------------ synthetic data


def synth_gen(n_users: int, n_items: int, n_contexts: int, alpha: float, seed: int, *,
              mean_length: float = 8.0, stickiness: float = 0.5, horizon: float = 1e6) -> EventLog:
    """Users walk context chains; items follow the declared context with prob ``alpha``.

    Item ``i{k}`` belongs to context group ``c{k // (n_items // n_contexts)}``.
    The next context repeats the current one with probability ``stickiness``
    and is otherwise uniform. Lengths are geometric (mean ``mean_length``,
    minimum 1); timestamps are increasing within each user.
    """
    if n_items % n_contexts:
        raise DataError("n_items must be divisible by n_contexts")
    if not 0.0 <= alpha <= 1.0:
        raise DataError("alpha must be in [0, 1]")
    rng = np.random.default_rng(seed)
    group = n_items // n_contexts
    items, contexts = Vocab(), Vocab()
    out = []
    for u in range(n_users):
        length = int(rng.geometric(1.0 / mean_length))
        t = float(rng.uniform(0, horizon * 0.5))
        ctx = int(rng.integers(n_contexts))
        for step in range(length):
            if step and rng.random() >= stickiness:
                ctx = int(rng.integers(n_contexts))
            if rng.random() < alpha:
                item = ctx * group + int(rng.integers(group))
            else:
                item = int(rng.integers(n_items))
            t += float(rng.exponential(horizon * 0.5 / mean_length))
            out.append(Interaction(f"u{u}", items.add(f"i{item}"), contexts.add(f"c{ctx}"), t))
    return EventLog(out, items, contexts, stats={"generator": "synth", "alpha": alpha, "seed": seed})


def context_group_of(log: EventLog, n_items: int, n_contexts: int) -> dict[int, int]:
    """Dense item index -> dense context index of its group in a synthetic log."""
    group = n_items // n_contexts
    out = {}
    for idx in range(1, log.n_items + 1):
        k = int(log.item_vocab.raw(idx)[1:])
        raw_ctx = f"c{k // group}"
        if raw_ctx in log.context_vocab:
            out[idx] = log.context_vocab.index(raw_ctx)
    return out


def runtime_ratio(N: int, D: int = 8, H: int = 2, *, seed: int = 0, repeats: int = 3) -> dict[str, float]:
    """Wall-clock ratio of the oracle to one full-window pass of the same naive code.

    Both sides use the row-by-row forward above, so the ratio reflects the
    number of passes rather than numpy versus Python loop overhead.
    """
    import time

    from qcrec.model import init_params

    rng = np.random.default_rng(seed)
    config = ModelConfig(N=N, D=D, H=H, n_heads=2 if D % 2 == 0 else 1, vocab_items=12, vocab_contexts=5)
    params = init_params(config, rng)
    items = rng.integers(1, config.n_items + 1, size=N)
    cs = rng.integers(1, config.vocab_contexts, size=N)

    def best(fn):
        out = math.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            out = min(out, time.perf_counter() - t0)
        return out

    single = best(lambda: _prefix_forward(items, cs[-1], cs, params, config, "query"))
    oracle = best(lambda: incremental_forward_oracle(items, cs, params, config))
    return {"N": N, "single_s": single, "oracle_s": oracle, "ratio": oracle / single}
