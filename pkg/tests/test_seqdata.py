import csv
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qcrec.errors import DataError
from qcrec.seqdata import (
    UserSequence,
    build_user_sequences,
    build_windows,
    filter_min_support,
    log_from_records,
    make_training_windows,
    parse_events,
    temporal_split,
    window_chunk,
)

BOS = 99


def write_rows(path, rows, header=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(header)
        w.writerows(rows)


# ------------------------------------------------------------------ parsing


def test_parse_toy_taobao(tmp_path):
    p = tmp_path / "t.csv"
    write_rows(p, [["u1", "i1", "c1", "pv", "10"], ["u1", "i2", "c1", "buy", "11"], ["u2", "i1", "c2", "pv", "12"]])
    log = parse_events(p, "taobao_csv")
    assert len(log.interactions) == 3
    assert log.users() == {"u1", "u2"}
    assert log.n_items == 2 and log.n_contexts == 2
    assert all(it.item_id >= 1 and it.context_id >= 1 for it in log.interactions)
    assert [log.item_vocab.raw(it.item_id) for it in log.interactions] == ["i1", "i2", "i1"]


def test_parse_empty_file(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    with pytest.raises(DataError, match="zero parseable rows"):
        parse_events(p, "taobao_csv")


def test_parse_errors(tmp_path):
    with pytest.raises(DataError, match="missing file"):
        parse_events(tmp_path / "nope.csv", "taobao_csv")
    p = tmp_path / "x.csv"
    p.write_text("u,i,c,pv,1\n")
    with pytest.raises(DataError, match="unknown format"):
        parse_events(p, "movielens")


def _reference_count(path):
    """Independent line-by-line parser: five non-empty fields, numeric ts >= 0."""
    good = bad = 0
    for line in open(path).read().splitlines():
        parts = line.split(",")
        ok = len(parts) == 5 and all(x.strip() for x in parts)
        if ok:
            try:
                ts = float(parts[4])
                ok = math.isfinite(ts) and ts >= 0
            except ValueError:
                ok = False
        good += ok
        bad += not ok
    return good, bad


def test_parse_taobao_sample_with_malformed_rows(tmp_path):
    rng = np.random.default_rng(7)
    rows = [[f"u{rng.integers(50)}", f"i{rng.integers(300)}", f"c{rng.integers(20)}", "pv",
             str(1511544070 + int(rng.integers(10**5)))] for _ in range(1000)]
    rows[17] = ["u1", "i2", "c3", "pv"]  # missing column
    rows[503] = ["u1", "i2", "c3", "pv", "not-a-time"]
    p = tmp_path / "UserBehavior.csv"
    write_rows(p, rows)
    good, bad = _reference_count(p)
    assert (good, bad) == (998, 2)
    log = parse_events(p, "taobao_csv")
    assert len(log.interactions) == good
    assert log.skipped == bad


def test_parse_retailrocket_asof_category(tmp_path):
    ev = tmp_path / "events.csv"
    write_rows(ev, [["1000", "7", "view", "55", ""], ["5000", "7", "addtocart", "55", ""],
                    ["6000", "8", "view", "66", ""], ["bad", "8", "view", "66", ""]],
               header=["timestamp", "visitorid", "event", "itemid", "transactionid"])
    props = tmp_path / "item_properties.csv"
    write_rows(props, [["2000", "55", "categoryid", "A"], ["4000", "55", "categoryid", "B"],
                       ["1", "55", "available", "1"], ["1", "66", "categoryid", "C"]],
               header=["timestamp", "itemid", "property", "value"])
    log = parse_events(ev, "retailrocket_csv", item_properties=[props])
    cats = [log.context_vocab.raw(it.context_id) for it in log.interactions]
    # t=1s precedes every recorded value for item 55 -> earliest value A.
    assert cats == ["A", "B", "C"]
    assert log.skipped == 1
    assert log.interactions[0].timestamp == pytest.approx(1.0)


def test_user_fraction_keeps_raw_counts(tmp_path):
    p = tmp_path / "t.csv"
    write_rows(p, [[f"u{i}", f"i{i}", "c1", "pv", str(i)] for i in range(200)])
    log = parse_events(p, "taobao_csv", user_fraction=0.3)
    assert 0 < len(log.interactions) < 200
    assert log.stats["raw_items"] == 200


# ---------------------------------------------------------------- filtering


def test_filter_fixed_point_immediately():
    recs = [(f"u{i % 3}", f"i{i % 2}", f"c{i % 2}", i) for i in range(40)]
    log = log_from_records(recs)
    out = filter_min_support(log, 10)
    assert len(out.interactions) == 40


def test_filter_drops_rare_item():
    recs = [("u", "A", "c", i) for i in range(12)] + [("u", "B", "c", 100 + i) for i in range(3)]
    out = filter_min_support(log_from_records(recs), 10)
    assert {out.item_vocab.raw(it.item_id) for it in out.interactions} == {"A"}
    assert out.item_vocab.to_list() == ["A"]


def test_filter_chained_removal():
    # 20 rows, threshold 4. Pass 1: item B (3 rows) goes; those were 3 of the
    # 5 rows under context Z. Pass 2: Z has 2 rows left -> they go as well,
    # which drops item C to 2 rows. Pass 3: C goes. Fixed point: A/X, D/Y.
    recs = (
        [("u", "B", "Z", t) for t in range(3)]
        + [("u", "C", "Z", t) for t in range(3, 5)]
        + [("u", "C", "X", t) for t in range(5, 7)]
        + [("u", "A", "X", t) for t in range(7, 13)]
        + [("u", "D", "Y", t) for t in range(13, 20)]
    )
    assert len(recs) == 20
    out = filter_min_support(log_from_records(recs), 4)
    kept = Counter((out.item_vocab.raw(i.item_id), out.context_vocab.raw(i.context_id)) for i in out.interactions)
    assert kept == {("A", "X"): 6, ("D", "Y"): 7}


def test_filter_empties_log():
    with pytest.raises(DataError):
        filter_min_support(log_from_records([("u", "a", "c", 1)]), 2)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 8), st.integers(0, 4)), min_size=1, max_size=80),
       st.integers(1, 5))
def test_filter_fixed_point_property(rows, k):
    log = log_from_records([(f"u{u}", f"i{i}", f"c{c}", n) for n, (u, i, c) in enumerate(rows)])
    try:
        out = filter_min_support(log, k)
    except DataError:
        return
    ic = Counter(it.item_id for it in out.interactions)
    cc = Counter(it.context_id for it in out.interactions)
    assert min(ic.values()) >= k and min(cc.values()) >= k
    assert sorted(ic) == list(range(1, out.n_items + 1))
    assert sorted(cc) == list(range(1, out.n_contexts + 1))


# ---------------------------------------------------------------- sequences


def test_sequences_sorted_and_stable():
    log = log_from_records([("u", "c", "x", 3), ("u", "a", "x", 1), ("u", "b", "x", 2),
                            ("v", "p", "x", 5), ("v", "q", "x", 5)])
    seqs = {s.user_id: s for s in build_user_sequences(log)}
    raw = lambda s: [log.item_vocab.raw(i) for i in s.items]  # noqa: E731
    assert raw(seqs["u"]) == ["a", "b", "c"]
    assert raw(seqs["v"]) == ["p", "q"]


def test_sequence_lengths_match_groupby():
    rng = np.random.default_rng(3)
    recs = [(f"u{rng.integers(10)}", f"i{rng.integers(30)}", "c", float(rng.integers(1000))) for _ in range(300)]
    expected = Counter(r[0] for r in recs)
    seqs = build_user_sequences(log_from_records(recs))
    assert {s.user_id: len(s) for s in seqs} == dict(expected)
    assert all(np.all(np.diff(s.timestamps) >= 0) for s in seqs)


# ------------------------------------------------------------------- split


def test_split_empty_test():
    seqs = [UserSequence("u", [1, 2], [1, 1], [1.0, 2.0])]
    with pytest.raises(DataError, match="empty test"):
        temporal_split(seqs, 10.0)


def test_split_history_includes_pre_split():
    seqs = [UserSequence("u", [11, 12, 13], [1, 2, 3], [1.0, 2.0, 5.0])]
    train, test = temporal_split(seqs, 4.0)
    assert train[0].items == [11, 12] and train[0].timestamps == [1.0, 2.0]
    assert len(test) == 1
    assert test[0].history_items == [11, 12]
    assert test[0].history_contexts == [1, 2]
    assert test[0].target_item == 13 and test[0].current_context == 3


def test_split_partition_count():
    rng = np.random.default_rng(5)
    recs = [(f"u{rng.integers(40)}", f"i{rng.integers(50)}", "c", float(rng.integers(10**4))) for _ in range(1000)]
    seqs = build_user_sequences(log_from_records(recs))
    train, test = temporal_split(seqs, 5000.0)
    assert sum(len(s) for s in train) + len(test) == 1000
    assert all(t < 5000.0 for s in train for t in s.timestamps)
    # no leakage into windows
    windows = build_windows(train, 4, BOS)
    assert max(w.max_timestamp for w in windows) < 5000.0


# ----------------------------------------------------------------- windows


def test_window_single_item_no_bos():
    assert make_training_windows(UserSequence("u", [5], [2], [0.0]), 4, None) == []


def test_window_single_item_bos():
    (w,) = make_training_windows(UserSequence("u", [5], [2], [0.0]), 4, BOS)
    assert w.input_items.tolist() == [0, 0, 0, BOS]
    assert w.targets.tolist() == [0, 0, 0, 5]
    assert w.input_contexts_shifted.tolist() == [0, 0, 0, 2]
    assert w.loss_mask.tolist() == [False, False, False, True]


def test_window_segmentation_hand_enumerated():
    # N = 4, seven items a..g (= N + 3), no BOS.
    items = [1, 2, 3, 4, 5, 6, 7]
    ctx = [11, 12, 13, 14, 15, 16, 17]
    w1, w2 = make_training_windows(UserSequence("u", items, ctx, list(range(7))), 4, None)
    assert w1.input_items.tolist() == [0, 0, 1, 2]
    assert w1.targets.tolist() == [0, 0, 2, 3]
    assert w1.input_contexts_shifted.tolist() == [0, 0, 12, 13]
    assert w2.input_items.tolist() == [3, 4, 5, 6]
    assert w2.targets.tolist() == [4, 5, 6, 7]
    assert w2.input_contexts_shifted.tolist() == [14, 15, 16, 17]


def test_window_n_too_small():
    with pytest.raises(DataError):
        make_training_windows(UserSequence("u", [1, 2], [1, 1], [0, 1]), 1, None)


seq_strategy = st.integers(1, 30).flatmap(
    lambda n: st.tuples(st.lists(st.integers(1, 20), min_size=n, max_size=n),
                        st.lists(st.integers(1, 6), min_size=n, max_size=n)))


@settings(max_examples=150, deadline=None)
@given(seq_strategy, st.integers(2, 9), st.booleans())
def test_window_invariants(seq, N, use_bos):
    items, ctx = seq
    s = UserSequence("u", items, ctx, list(range(len(items))))
    windows = make_training_windows(s, N, BOS if use_bos else None)
    tokens = ([BOS] if use_bos else []) + items
    token_ctx = ([0] if use_bos else []) + ctx
    assert sum(int(w.loss_mask.sum()) for w in windows) == len(tokens) - 1
    all_targets = [int(t) for w in windows for t in w.targets[w.loss_mask]]
    assert all_targets == tokens[1:]
    for w in windows:
        assert np.array_equal(w.targets != 0, w.loss_mask)
        real = np.flatnonzero(w.input_items)
        assert real.size == 0 or np.array_equal(real, np.arange(real[0], N))
        assert np.all((w.input_contexts_shifted == 0) | (w.targets != 0))
        # round trip through the recovered chunk
        chunk_items, chunk_ctx = window_chunk(w)
        (again,) = make_training_windows(UserSequence("u", chunk_items, chunk_ctx, list(range(len(chunk_items)))),
                                         N, None)
        assert np.array_equal(again.input_items, w.input_items)
        assert np.array_equal(again.targets, w.targets)
        assert np.array_equal(again.input_contexts_shifted, w.input_contexts_shifted)
    # shift correctness: each target paired with the context it occurred under
    shifted = [int(c) for w in windows for c in w.input_contexts_shifted[w.loss_mask]]
    assert shifted == token_ctx[1:]
