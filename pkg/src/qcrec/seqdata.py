"""Interaction log parsing, preprocessing and window construction.

Index 0 is padding in both the item and the context vocabulary. Real items
occupy ``1..n_items`` and the BOS token gets ``n_items + 1``.
"""

from __future__ import annotations

import bisect
import csv
import json
import logging
import math
import zlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from qcrec.errors import DataError

logger = logging.getLogger(__name__)

PAD = 0
FORMATS = ("taobao_csv", "retailrocket_csv")


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: int
    context_id: int
    timestamp: float
    event_type: str = ""


class Vocab:
    """Bidirectional raw-id <-> dense-index map; index 0 is reserved."""

    def __init__(self, raw_ids: Iterable[str] = ()):
        self._raw: list[str] = []
        self._index: dict[str, int] = {}
        for raw in raw_ids:
            self.add(raw)

    def add(self, raw: str) -> int:
        idx = self._index.get(raw)
        if idx is None:
            self._raw.append(raw)
            idx = len(self._raw)
            self._index[raw] = idx
        return idx

    def index(self, raw: str) -> int:
        return self._index[raw]

    def raw(self, idx: int) -> str:
        if idx < 1:
            raise KeyError(idx)
        return self._raw[idx - 1]

    def __contains__(self, raw: str) -> bool:
        return raw in self._index

    def __len__(self) -> int:
        return len(self._raw)

    def to_list(self) -> list[str]:
        return list(self._raw)


@dataclass
class EventLog:
    interactions: list[Interaction]
    item_vocab: Vocab
    context_vocab: Vocab
    skipped: int = 0
    stats: dict = field(default_factory=dict)

    @property
    def n_items(self) -> int:
        return len(self.item_vocab)

    @property
    def n_contexts(self) -> int:
        return len(self.context_vocab)

    @property
    def bos_index(self) -> int:
        return self.n_items + 1

    def users(self) -> set[str]:
        return {it.user_id for it in self.interactions}


@dataclass
class UserSequence:
    user_id: str
    items: list[int]
    contexts: list[int]
    timestamps: list[float]

    def __post_init__(self):
        n = len(self.items)
        if n < 1 or len(self.contexts) != n or len(self.timestamps) != n:
            raise DataError(f"ragged or empty sequence for user {self.user_id!r}")

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class Window:
    input_items: np.ndarray
    input_contexts_shifted: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    user_id: str = ""
    max_timestamp: float = -math.inf

    @property
    def N(self) -> int:
        return len(self.input_items)


@dataclass
class EvalInstance:
    history_items: list[int]
    history_contexts: list[int]
    current_context: int
    target_item: int
    user_id: str = ""
    timestamp: float = 0.0

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "timestamp": self.timestamp,
            "history_items": self.history_items,
            "history_contexts": self.history_contexts,
            "current_context": self.current_context,
            "target_item": self.target_item,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EvalInstance":
        return cls(
            history_items=list(d["history_items"]),
            history_contexts=list(d["history_contexts"]),
            current_context=int(d["current_context"]),
            target_item=int(d["target_item"]),
            user_id=str(d.get("user_id", "")),
            timestamp=float(d.get("timestamp", 0.0)),
        )


# ---------------------------------------------------------------- parsing


def _parse_timestamp(text: str, scale: float = 1.0) -> float:
    ts = float(text) * scale
    if not math.isfinite(ts) or ts < 0:
        raise ValueError(f"bad timestamp {text!r}")
    return ts


def _keep_user(user: str, user_fraction: float) -> bool:
    if user_fraction >= 1.0:
        return True
    return zlib.crc32(user.encode()) / 2**32 < user_fraction


def _iter_taobao(path: Path) -> Iterator[tuple[str, str, str, str, str] | None]:
    # UserBehavior.csv ships without a header; tolerate one if present.
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh)):
            if lineno == 0 and row and row[0].strip().lower() == "user_id":
                continue
            if len(row) != 5 or not all(x.strip() for x in row):
                yield None
                continue
            user, item, cat, behavior, ts = (x.strip() for x in row)
            yield user, item, cat, ts, behavior


def _load_retailrocket_categories(paths: Sequence[Path]) -> dict[str, tuple[list[float], list[str]]]:
    hist: dict[str, list[tuple[float, str]]] = defaultdict(list)
    for path in paths:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                continue
            cols = {name.strip(): i for i, name in enumerate(header)}
            try:
                its, iitem, iprop, ival = (cols[c] for c in ("timestamp", "itemid", "property", "value"))
            except KeyError as exc:
                raise DataError(f"{path}: missing column {exc}") from None
            for row in reader:
                if len(row) <= max(its, iitem, iprop, ival) or row[iprop] != "categoryid":
                    continue
                try:
                    ts = _parse_timestamp(row[its], 1e-3)
                except ValueError:
                    continue
                hist[row[iitem]].append((ts, row[ival].strip()))
    out = {}
    for item, values in hist.items():
        values.sort(key=lambda tv: tv[0])
        out[item] = ([t for t, _ in values], [v for _, v in values])
    return out


def _category_at(history: tuple[list[float], list[str]], ts: float) -> str:
    times, values = history
    pos = bisect.bisect_right(times, ts) - 1
    # No value recorded yet at interaction time: fall back to the earliest one.
    return values[max(pos, 0)]


def _iter_retailrocket(
    path: Path, categories: dict[str, tuple[list[float], list[str]]], counts: Counter
) -> Iterator[tuple[str, str, str, str, str] | None]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return
        cols = {name.strip(): i for i, name in enumerate(header)}
        try:
            its, iuser, ievent, iitem = (cols[c] for c in ("timestamp", "visitorid", "event", "itemid"))
        except KeyError as exc:
            raise DataError(f"{path}: missing column {exc}") from None
        for row in reader:
            try:
                ts = str(_parse_timestamp(row[its], 1e-3))
                user, event, item = row[iuser].strip(), row[ievent].strip(), row[iitem].strip()
            except (ValueError, IndexError):
                yield None
                continue
            if not user or not item:
                yield None
                continue
            hist = categories.get(item)
            if hist is None:
                counts["no_category"] += 1
                continue
            yield user, item, _category_at(hist, float(ts)), ts, event


def parse_events(
    path: str | Path,
    format: str,
    *,
    item_properties: Sequence[str | Path] = (),
    user_fraction: float = 1.0,
) -> EventLog:
    """Read a raw interaction CSV into an :class:`EventLog`.

    ``user_fraction`` keeps a deterministic hash-based subset of users; the
    raw item/category counts in ``stats`` always cover the whole file.
    """
    if format not in FORMATS:
        raise DataError(f"unknown format {format!r}; expected one of {FORMATS}")
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")

    counts: Counter = Counter()
    if format == "taobao_csv":
        rows = _iter_taobao(path)
    else:
        props = [Path(p) for p in item_properties]
        for p in props:
            if not p.exists():
                raise DataError(f"missing file: {p}")
        rows = _iter_retailrocket(path, _load_retailrocket_categories(props), counts)

    items, contexts = Vocab(), Vocab()
    raw_items: set[str] = set()
    raw_contexts: set[str] = set()
    interactions = []
    skipped = 0
    for row in rows:
        if row is None:
            skipped += 1
            continue
        user, item, ctx, ts_text, event = row
        try:
            ts = _parse_timestamp(ts_text)
        except ValueError:
            skipped += 1
            continue
        raw_items.add(item)
        raw_contexts.add(ctx)
        if not _keep_user(user, user_fraction):
            continue
        interactions.append(Interaction(user, items.add(item), contexts.add(ctx), ts, event))

    if not interactions:
        raise DataError(f"{path}: zero parseable rows")
    if skipped:
        logger.info("skipped %d malformed rows in %s", skipped, path)
    stats = {"raw_items": len(raw_items), "raw_contexts": len(raw_contexts), **counts}
    return EventLog(interactions, items, contexts, skipped=skipped, stats=stats)


def log_from_records(records: Iterable[tuple[str, str, str, float]]) -> EventLog:
    """Build an EventLog from (user, raw_item, raw_context, timestamp) tuples."""
    items, contexts = Vocab(), Vocab()
    interactions = []
    for user, item, ctx, ts in records:
        ts = _parse_timestamp(str(ts))
        interactions.append(Interaction(str(user), items.add(str(item)), contexts.add(str(ctx)), ts))
    if not interactions:
        raise DataError("zero parseable rows")
    return EventLog(interactions, items, contexts)


# ----------------------------------------------------------- preprocessing


def _reindex(log: EventLog, keep: list[Interaction]) -> EventLog:
    items, contexts = Vocab(), Vocab()
    out = []
    for it in keep:
        item = items.add(log.item_vocab.raw(it.item_id))
        ctx = contexts.add(log.context_vocab.raw(it.context_id))
        out.append(replace(it, item_id=item, context_id=ctx))
    return EventLog(out, items, contexts, skipped=log.skipped, stats=dict(log.stats))


def filter_min_support(log: EventLog, min_count: int) -> EventLog:
    """Drop interactions with rare items or contexts until nothing changes."""
    if min_count < 1:
        raise DataError("min_count must be >= 1")
    keep = list(log.interactions)
    while True:
        item_counts = Counter(it.item_id for it in keep)
        ctx_counts = Counter(it.context_id for it in keep)
        kept = [it for it in keep if item_counts[it.item_id] >= min_count and ctx_counts[it.context_id] >= min_count]
        if len(kept) == len(keep):
            break
        keep = kept
    if not keep:
        raise DataError(f"min_count={min_count} removed every interaction")
    return _reindex(log, keep)


def build_user_sequences(log: EventLog) -> list[UserSequence]:
    by_user: dict[str, list[Interaction]] = defaultdict(list)
    for it in log.interactions:
        by_user[it.user_id].append(it)
    seqs = []
    for user in sorted(by_user):
        # sorted() is stable, so equal timestamps keep file order.
        events = sorted(by_user[user], key=lambda it: it.timestamp)
        seqs.append(
            UserSequence(
                user,
                [it.item_id for it in events],
                [it.context_id for it in events],
                [it.timestamp for it in events],
            )
        )
    return seqs


def temporal_split(
    sequences: Sequence[UserSequence], t_split: float
) -> tuple[list[UserSequence], list[EvalInstance]]:
    train: list[UserSequence] = []
    test: list[EvalInstance] = []
    for seq in sequences:
        n_before = bisect.bisect_left(seq.timestamps, t_split)
        if n_before:
            train.append(
                UserSequence(seq.user_id, seq.items[:n_before], seq.contexts[:n_before], seq.timestamps[:n_before])
            )
        for k in range(n_before, len(seq)):
            test.append(
                EvalInstance(
                    history_items=seq.items[:k],
                    history_contexts=seq.contexts[:k],
                    current_context=seq.contexts[k],
                    target_item=seq.items[k],
                    user_id=seq.user_id,
                    timestamp=seq.timestamps[k],
                )
            )
    if not train:
        raise DataError(f"empty train partition at t_split={t_split}")
    if not test:
        raise DataError(f"empty test partition at t_split={t_split}")
    return train, test


def make_training_windows(seq: UserSequence, N: int, bos: int | None = None) -> list[Window]:
    """Cut a sequence into left-padded windows of length ``N``.

    ``bos`` is the BOS item index, or ``None`` to disable it. Chunks of at
    most ``N + 1`` tokens are taken from the most recent end with stride
    ``N``, so targets never repeat across windows and only the oldest chunk
    is padded.
    """
    if N < 2:
        raise DataError("window length N must be >= 2")
    items = list(seq.items)
    contexts = list(seq.contexts)
    times = list(seq.timestamps)
    if bos is not None:
        # BOS carries no context of its own; its shifted context is c_1.
        items.insert(0, bos)
        contexts.insert(0, PAD)
        times.insert(0, -math.inf)
    windows = []
    end = len(items)
    while end >= 2:
        start = max(0, end - (N + 1))
        windows.append(_window_from_chunk(items[start:end], contexts[start:end], times[start:end], N, seq.user_id))
        end = start + 1
    windows.reverse()
    return windows


def _window_from_chunk(items, contexts, times, N, user_id) -> Window:
    n = len(items) - 1
    pad = N - n
    inp = np.zeros(N, dtype=np.int64)
    cs = np.zeros(N, dtype=np.int64)
    tgt = np.zeros(N, dtype=np.int64)
    inp[pad:] = items[:-1]
    tgt[pad:] = items[1:]
    cs[pad:] = contexts[1:]
    return Window(inp, cs, tgt, tgt != PAD, user_id=user_id, max_timestamp=max(times))


def window_chunk(window: Window) -> tuple[list[int], list[int]]:
    """Recover the (items, contexts) chunk a window was cut from.

    The first item's own context is not stored in a window and comes back
    as padding.
    """
    real = np.flatnonzero(window.loss_mask)
    if real.size == 0:
        return [], []
    first = real[0]
    items = [int(x) for x in window.input_items[first:]] + [int(window.targets[-1])]
    contexts = [PAD] + [int(c) for c in window.input_contexts_shifted[first:]]
    return items, contexts


# ------------------------------------------------------------ batching/io


@dataclass
class WindowArrays:
    """Stacked windows, one row per window."""

    items: np.ndarray
    contexts: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray

    def __len__(self) -> int:
        return self.items.shape[0]

    @property
    def N(self) -> int:
        return self.items.shape[1]

    def take(self, idx) -> "WindowArrays":
        return WindowArrays(self.items[idx], self.contexts[idx], self.targets[idx], self.loss_mask[idx])

    @classmethod
    def stack(cls, windows: Sequence[Window]) -> "WindowArrays":
        if not windows:
            raise DataError("no windows to stack")
        return cls(
            np.stack([w.input_items for w in windows]),
            np.stack([w.input_contexts_shifted for w in windows]),
            np.stack([w.targets for w in windows]),
            np.stack([w.loss_mask for w in windows]),
        )

    def save(self, path: str | Path) -> None:
        np.savez_compressed(path, items=self.items, contexts=self.contexts, targets=self.targets, loss_mask=self.loss_mask)

    @classmethod
    def load(cls, path: str | Path) -> "WindowArrays":
        with np.load(path) as z:
            return cls(z["items"], z["contexts"], z["targets"], z["loss_mask"])


def build_windows(sequences: Sequence[UserSequence], N: int, bos: int | None) -> list[Window]:
    out = []
    for seq in sequences:
        out.extend(make_training_windows(seq, N, bos))
    return out


def save_instances(instances: Iterable[EvalInstance], path: str | Path) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_json()) + "\n")


def load_instances(path: str | Path) -> list[EvalInstance]:
    with open(path) as fh:
        return [EvalInstance.from_json(json.loads(line)) for line in fh if line.strip()]


def item_frequency_ranking(windows: WindowArrays, n_items: int) -> np.ndarray:
    """Item indices sorted by descending target frequency (ties by index)."""
    counts = np.bincount(windows.targets[windows.loss_mask], minlength=n_items + 2)[1 : n_items + 1]
    return np.argsort(-counts, kind="stable") + 1


def sequence_stats(sequences: Sequence[UserSequence]) -> dict:
    lengths = np.array([len(s) for s in sequences])
    return {
        "users": int(lengths.size),
        "interactions": int(lengths.sum()),
        "single_interaction_fraction": float(np.mean(lengths == 1)),
        "median_length": float(np.median(lengths)),
    }
