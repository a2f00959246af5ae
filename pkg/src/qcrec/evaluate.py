"""Full-catalog ranking evaluation with Recall@k and NDCG@k."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from qcrec.errors import DataError
from qcrec.model import ModelConfig, Visibility, model_forward, score_positions
from qcrec.seqdata import PAD, EvalInstance


def recall_at_k(rank: int | None, k: int) -> int:
    if k < 1:
        raise DataError("k must be >= 1")
    return int(rank is not None and rank <= k)


def ndcg_at_k(rank: int | None, k: int) -> float:
    # One relevant item per instance, so the ideal DCG is 1.
    if k < 1:
        raise DataError("k must be >= 1")
    if rank is None or rank > k:
        return 0.0
    return 1.0 / math.log2(1 + rank)


def target_rank(scores: np.ndarray, target_col: int) -> int:
    """1-based rank; higher scores first, equal scores by smaller index."""
    s = scores[target_col]
    return int(1 + np.count_nonzero(scores > s) + np.count_nonzero(scores[:target_col] == s))


def eval_window(inst: EvalInstance, N: int, bos_index: int | None) -> tuple[np.ndarray, np.ndarray] | None:
    """Left-padded ``(items, shifted contexts)`` for one instance.

    A BOS token leads the window whenever the whole history fits, matching
    how the first training window of a sequence is built. Returns ``None``
    for an empty history without BOS.
    """
    hist, hctx = inst.history_items, inst.history_contexts
    if bos_index is not None and len(hist) <= N - 1:
        tokens = [bos_index] + list(hist)
        shifted = list(hctx) + [inst.current_context]
    else:
        if not hist:
            return None
        tokens = list(hist[-N:])
        shifted = list(hctx[len(hist) - len(tokens) + 1 :]) + [inst.current_context]
    items = np.zeros(N, dtype=np.int64)
    cs = np.zeros(N, dtype=np.int64)
    items[N - len(tokens) :] = tokens
    cs[N - len(shifted) :] = shifted
    return items, cs


@dataclass
class EvalReport:
    ks: list[int]
    metrics: dict[str, float]
    cold_start_metrics: dict[str, float]
    n_instances: int
    n_cold_start: int
    mode: str
    visibility: str
    ranks: list[int | None] = field(default_factory=list, repr=False)

    def recall(self, k: int) -> float:
        return self.metrics[f"recall@{k}"]

    def ndcg(self, k: int) -> float:
        return self.metrics[f"ndcg@{k}"]

    def to_json(self, config: ModelConfig | None = None) -> dict:
        return {
            "config": config.to_json() if config is not None else None,
            "mode": self.mode,
            "visibility": self.visibility,
            "ks": self.ks,
            "metrics": self.metrics,
            "per_k": {str(k): {"recall": self.recall(k), "ndcg": self.ndcg(k)} for k in self.ks},
            "cold_start": self.cold_start_metrics,
            "counts": {"instances": self.n_instances, "cold_start": self.n_cold_start},
        }

    def same_metrics(self, other: "EvalReport") -> bool:
        return self.metrics == other.metrics and self.ranks == other.ranks


def aggregate(ranks: Sequence[int | None], ks: Sequence[int]) -> dict[str, float]:
    out = {}
    n = max(len(ranks), 1)
    for k in ks:
        out[f"recall@{k}"] = sum(recall_at_k(r, k) for r in ranks) / n
        out[f"ndcg@{k}"] = sum(ndcg_at_k(r, k) for r in ranks) / n
    return out


def instance_ranks(params, config: ModelConfig, instances: Sequence[EvalInstance], *, use_bos=True,
                   exclude_consumed=False, batch_size=256) -> list[int | None]:
    bos = config.bos_index if use_bos else None
    ranks: list[int | None] = [None] * len(instances)
    built = [eval_window(inst, config.N, bos) for inst in instances]
    todo = [i for i, w in enumerate(built) if w is not None]
    for lo in range(0, len(todo), batch_size):
        idx = todo[lo : lo + batch_size]
        items = np.stack([built[i][0] for i in idx])
        cs = np.stack([built[i][1] for i in idx])
        trace = model_forward(items, cs, params, config, training=False)
        scores = score_positions(trace, params, config)
        for row, i in enumerate(idx):
            inst = instances[i]
            s = scores[row]
            if exclude_consumed:
                s = s.copy()
                seen = np.array([x for x in set(inst.history_items) if x not in (PAD, inst.target_item)
                                 and 1 <= x <= config.n_items], dtype=np.int64)
                s[seen - 1] = -np.inf
            ranks[i] = target_rank(s, inst.target_item - 1)
    return ranks


def evaluate_model(params, config: ModelConfig, instances: Sequence[EvalInstance], ks: Sequence[int],
                   visibility: Visibility | str | None = None, *, use_bos=True, exclude_consumed=False,
                   batch_size=256) -> EvalReport:
    """Rank the whole catalog for every instance and aggregate the metrics."""
    if not instances:
        raise DataError("no evaluation instances")
    ks = sorted(int(k) for k in ks)
    if visibility is not None:
        config = config.with_mode(visibility=visibility)
    ranks = instance_ranks(params, config, instances, use_bos=use_bos, exclude_consumed=exclude_consumed,
                           batch_size=batch_size)
    cold = [r for r, inst in zip(ranks, instances) if not inst.history_items]
    return EvalReport(
        ks=ks,
        metrics=aggregate(ranks, ks),
        cold_start_metrics=aggregate(cold, ks) if cold else {},
        n_instances=len(instances),
        n_cold_start=len(cold),
        mode=config.mode.variant.value,
        visibility=config.mode.visibility.value,
        ranks=ranks,
    )


def write_report(report: EvalReport, path, config: ModelConfig | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_json(config), fh, indent=2)


def write_ranks_csv(report: EvalReport, instances: Sequence[EvalInstance], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance_id", "target", "rank"])
        for i, (inst, r) in enumerate(zip(instances, report.ranks)):
            w.writerow([i, inst.target_item, "" if r is None else r])


def format_table(rows: Sequence[tuple[str, EvalReport]]) -> str:
    """Human-readable metrics table, one line per labelled report."""
    if not rows:
        return ""
    keys = list(rows[0][1].metrics)
    width = max(len(label) for label, _ in rows)
    lines = [" ".join([f"{'':<{width}}"] + [f"{k:>10}" for k in keys])]
    for label, rep in rows:
        lines.append(" ".join([f"{label:<{width}}"] + [f"{rep.metrics[k]:>10.4f}" for k in keys]))
    return "\n".join(lines)
