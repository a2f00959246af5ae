"""End-to-end helpers shared by the CLI and the experiment tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from qcrec.errors import DataError
from qcrec.model import ModelConfig, init_params
from qcrec.seqdata import (
    EvalInstance,
    EventLog,
    WindowArrays,
    build_user_sequences,
    build_windows,
    filter_min_support,
    item_frequency_ranking,
    sequence_stats,
    temporal_split,
)
from qcrec.train import EpochResult, LogUniformSampler, TrainConfig, fit


@dataclass
class PreparedData:
    windows: WindowArrays
    instances: list[EvalInstance]
    n_items: int
    n_contexts: int
    manifest: dict

    @property
    def vocab_items(self) -> int:
        return self.n_items + 2

    @property
    def vocab_contexts(self) -> int:
        return self.n_contexts + 1


def split_time_at_quantile(log: EventLog, q: float) -> float:
    ts = np.array([it.timestamp for it in log.interactions])
    return float(np.quantile(ts, q))


def prepare(log: EventLog, N: int, *, t_split: float | None = None, split_quantile: float = 0.8,
            min_count: int | None = None, bos: bool = True) -> PreparedData:
    raw_stats = sequence_stats(build_user_sequences(log))
    if min_count:
        log = filter_min_support(log, min_count)
    seqs = build_user_sequences(log)
    if t_split is None:
        t_split = split_time_at_quantile(log, split_quantile)
    train, test = temporal_split(seqs, t_split)
    windows = build_windows(train, N, log.bos_index if bos else None)
    if not windows:
        raise DataError("no training windows; enable BOS or use longer sequences")
    manifest = {
        "n_items": log.n_items,
        "n_contexts": log.n_contexts,
        "vocab_items": log.n_items + 2,
        "vocab_contexts": log.n_contexts + 1,
        "bos_index": log.bos_index if bos else None,
        "N": N,
        "t_split": t_split,
        "min_count": min_count,
        "counts": {
            "interactions": len(log.interactions),
            "users": len(seqs),
            "train_users": len(train),
            "train_events": sum(len(s) for s in train),
            "windows": len(windows),
            "test_instances": len(test),
            "cold_start_instances": sum(1 for t in test if not t.history_items),
            "skipped_rows": log.skipped,
        },
        "raw": {**log.stats, **{f"unfiltered_{k}": v for k, v in raw_stats.items()}},
        "filtered": sequence_stats(seqs),
    }
    return PreparedData(WindowArrays.stack(windows), test, log.n_items, log.n_contexts, manifest)


def model_config_for(data: PreparedData, **kw) -> ModelConfig:
    return ModelConfig(vocab_items=data.vocab_items, vocab_contexts=data.vocab_contexts, **kw)


def train_model(data: PreparedData, config: ModelConfig, tc: TrainConfig, *, log=None
                ) -> tuple[dict[str, np.ndarray], list[EpochResult]]:
    """Initialise from ``tc.seed`` and train on the prepared windows."""
    rng = np.random.default_rng(tc.seed)
    params = init_params(config, rng)
    sampler = None
    if tc.neg_sample_ratio not in (0.0, 1.0):
        sampler = LogUniformSampler(item_frequency_ranking(data.windows, data.n_items))
    history = fit(data.windows, params, config, tc, sampler=sampler, rng=rng, log=log)
    return params, history
