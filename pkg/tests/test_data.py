import io
import math
from datetime import datetime, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tagnn import data as dp
from tagnn.data import RawEvent, Session, TrainExample


def _ms(text):
    return int(datetime.fromisoformat(text).replace(tzinfo=timezone.utc).timestamp() * 1000)


def events_from(sessions, start=0):
    """RawEvents for lists of external ids; session i at time (start + i) hours."""
    out = []
    for i, items in enumerate(sessions):
        for j, item in enumerate(items):
            out.append(RawEvent(str(i), (start + i) * 3_600_000 + j * 1000, str(item)))
    return out


# ---------------------------------------------------------------------------
# parsing


def test_yoochoose_row():
    result = dp.parse_events(b"1,2014-04-07T10:51:09.277Z,214536502,0\n", "yoochoose")
    (ev,) = result.events
    assert (ev.session_id, ev.item_id) == ("1", "214536502")
    assert ev.timestamp == _ms("2014-04-07T10:51:09") + 277


def test_empty_stream():
    result = dp.parse_events(io.BytesIO(b""), "yoochoose")
    assert result.events == [] and result.rows == 0


def test_unknown_format():
    with pytest.raises(dp.DataError, match="unknown format"):
        dp.parse_events(b"", "lastfm")


def test_yoochoose_fixture_skips_bad_timestamp(fixtures_dir):
    result = dp.parse_events(fixtures_dir / "yoochoose_sample.dat", "yoochoose")
    assert result.rows == 9
    assert result.skipped == 1
    assert len(result.events) == 8
    assert result.warning is not None and "1 of 9" in result.warning


def test_diginetica_fixture_orders_by_timeframe(fixtures_dir):
    result = dp.parse_events(fixtures_dir / "diginetica_sample.csv", "diginetica")
    assert result.skipped == 0
    groups = dict(dp.group_sessions(result.events))
    assert [ev.item_id for ev in groups["1"]] == ["32118", "81766", "31331"]
    assert [ev.item_id for ev in groups["2"]] == ["32627", "9654"]
    assert groups["3"][0].timestamp == _ms("2016-05-10T00:00:00")


def test_diginetica_missing_column():
    with pytest.raises(dp.DataError, match="timeframe"):
        dp.parse_events(b"sessionId;userId;itemId;eventdate\n1;;2;2016-01-01\n", "diginetica")


def test_ties_keep_input_order():
    evs = [RawEvent("s", 5, "b"), RawEvent("s", 5, "a"), RawEvent("s", 1, "c")]
    (_, ordered), = dp.group_sessions(evs)
    assert [e.item_id for e in ordered] == ["c", "b", "a"]


# ---------------------------------------------------------------------------
# filtering


def test_item_seen_four_times_is_dropped():
    sessions = [["a", "r"], ["a", "r"], ["a", "r"], ["a", "r"], ["a", "b"], ["b", "a"], ["b", "b"], ["b", "a"]]
    out, vocab = dp.build_and_filter(events_from(sessions))
    assert "r" not in vocab
    assert set(vocab.ids) == {"a", "b"}


def test_session_reduced_to_one_item_is_dropped():
    sessions = [["a", "b"]] * 5 + [["a", "rare"]]
    out, _ = dp.build_and_filter(events_from(sessions))
    assert len(out) == 5


def test_frequent_items_and_long_sessions_pass_unchanged():
    sessions = [["a", "b", "c"], ["c", "b", "a"], ["a", "b"], ["b", "c"], ["c", "a"], ["a", "b", "c"]]
    out, vocab = dp.build_and_filter(events_from(sessions))
    assert [[vocab.external(i) for i in s.items] for s in out] == sessions


def test_nothing_survives():
    with pytest.raises(dp.EmptyDatasetError):
        dp.build_and_filter(events_from([["a", "b"]]))


def test_single_pass_is_not_always_a_fixed_point():
    # "x" has 5 clicks, but two of them sit in a session that the length
    # filter removes, so a second pass drops it. The stable mode settles.
    sessions = [["x", "a"], ["x", "a"], ["x", "a"], ["x", "rare"], ["x", "rare2"]] + [["a", "a"]] * 2
    groups = dp.group_sessions(events_from(sessions))
    once = dp.filter_sessions(groups)
    assert dp.filter_sessions(once) != once
    stable = dp.filter_sessions(groups, until_stable=True)
    assert dp.filter_sessions(stable) == stable


@settings(max_examples=80, deadline=None)
@given(st.lists(st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=6), min_size=1, max_size=30))
def test_stable_filter_is_idempotent(sessions):
    groups = dp.group_sessions(events_from(sessions))
    once = dp.filter_sessions(groups, until_stable=True)
    assert dp.filter_sessions(once, until_stable=True) == once


# ---------------------------------------------------------------------------
# splitting


def _s(items, end):
    return Session(list(items), end_time=end)


def test_split_one_each_side():
    train, test = dp.split_by_time([_s([0, 1], 0), _s([1, 0], 10 * dp.DAY_MS)], dp.DAY_MS)
    assert len(train) == 1 and len(test) == 1


def test_split_all_old_is_an_error():
    sessions = [_s([0, 1], 0), _s([1, 0], 100)]
    with pytest.raises(dp.SplitError, match="boundary"):
        dp.split_by_time(sessions, 1000 * dp.DAY_MS)


def test_split_removes_untrained_items_from_test():
    train_s = _s([0, 1, 2], 0)
    test_s = _s([0, 9, 1], 10 * dp.DAY_MS)
    _, test = dp.split_by_time([train_s, test_s], dp.DAY_MS)
    assert test[0].items == [0, 1]


def test_split_drops_test_sessions_that_become_too_short():
    sessions = [_s([0, 1], 0), _s([0, 9], 10 * dp.DAY_MS), _s([1, 0], 10 * dp.DAY_MS)]
    _, test = dp.split_by_time(sessions, dp.DAY_MS)
    assert [s.items for s in test] == [[1, 0]]


def test_compact_vocabulary_reindexes_to_train_items():
    vocab = dp.ItemVocabulary(["a", "b", "c", "d"])
    train = [_s([1, 3], 0)]
    test = [_s([3, 1], 1)]
    train2, test2, v2 = dp.compact_vocabulary(vocab, train, test)
    assert v2.ids == ["b", "d"]
    assert train2[0].items == [0, 1] and test2[0].items == [1, 0]


def test_recent_fraction_of_128_sessions():
    sessions = [_s([0, 1], t) for t in range(128)]
    kept = dp.select_recent_fraction(sessions, 1 / 64)
    assert [s.end_time for s in kept] == [126, 127]


@given(st.integers(1, 500), st.sampled_from([1 / 64, 1 / 4, 1 / 3, 1.0]))
def test_recent_fraction_uses_ceiling(n, fraction):
    sessions = [_s([0, 1], (t * 7919) % 1000) for t in range(n)]
    kept = dp.select_recent_fraction(sessions, fraction)
    assert len(kept) == math.ceil(n * fraction)
    cutoff = min(s.end_time for s in kept)
    assert sum(s.end_time > cutoff for s in sessions) <= len(kept)


# ---------------------------------------------------------------------------
# expansion and vocabulary


def test_expand_three():
    a, b, c = 1, 2, 3
    assert dp.expand_prefixes([a, b, c]) == [TrainExample((a,), b), TrainExample((a, b), c)]


def test_expand_minimal():
    assert dp.expand_prefixes([4, 5]) == [TrainExample((4,), 5)]


def test_expand_length_ten():
    assert len(dp.expand_prefixes(list(range(10)))) == 9


def test_expand_too_short():
    with pytest.raises(ValueError):
        dp.expand_prefixes([1])


@given(st.lists(st.lists(st.integers(0, 9), min_size=2, max_size=8), max_size=20))
def test_example_count_is_sum_of_lengths_minus_one(sessions):
    examples = dp.expand_all(Session(s) for s in sessions)
    assert len(examples) == sum(len(s) - 1 for s in sessions)


@given(st.lists(st.text(min_size=1, max_size=8).filter(lambda s: "\t" not in s and "\n" not in s
                                                        and "\r" not in s), unique=True, max_size=30))
def test_vocabulary_round_trip(ids):
    vocab = dp.ItemVocabulary(ids)
    for i in range(len(vocab)):
        assert vocab.index(vocab.external(i)) == i


def test_vocabulary_save_load_is_stable(tmp_path):
    vocab = dp.ItemVocabulary(["214536502", "x y", "42"])
    vocab.save(tmp_path / "vocab.txt")
    loaded = dp.ItemVocabulary.load(tmp_path / "vocab.txt")
    assert loaded.ids == vocab.ids
    assert loaded.digest() == vocab.digest()
    assert (tmp_path / "vocab.txt").read_text() == "0\t214536502\n1\tx y\n2\t42\n"


def test_unknown_item_lookup():
    with pytest.raises(dp.UnknownItemError, match="zzz"):
        dp.ItemVocabulary(["a"]).index("zzz")


def test_fnv1a_reference_values():
    # published FNV-1a 64-bit test vectors
    assert dp.fnv1a64(b"") == 0xCBF29CE484222325
    assert dp.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert dp.fnv1a64(b"foobar") == 0x85944171F73967E8


def test_example_file_round_trip(tmp_path):
    examples = [TrainExample((0, 1, 1), 2), TrainExample((3,), 0)]
    dp.write_examples(tmp_path / "t.txt", examples)
    assert (tmp_path / "t.txt").read_text() == "2\t0,1,1\n0\t3\n"
    assert dp.read_examples(tmp_path / "t.txt", n_items=4) == examples
    with pytest.raises(dp.DataError):
        dp.read_examples(tmp_path / "t.txt", n_items=3)


# ---------------------------------------------------------------------------
# batching


def _examples(n):
    return [TrainExample((i % 7, (i + 1) % 7), i % 5) for i in range(n)]


def test_batch_sizes():
    sizes = [len(b) for b in dp.make_batches(_examples(250), 100, seed=0, pad_index=7)]
    assert sizes == [100, 100, 50]


def test_same_seed_same_order():
    ex = _examples(250)
    a = [b.examples for b in dp.make_batches(ex, 100, seed=3, pad_index=7)]
    b = [b.examples for b in dp.make_batches(ex, 100, seed=3, pad_index=7)]
    assert a == b


def test_different_seeds_permute_the_same_multiset():
    ex = [TrainExample((i,), i) for i in range(250)]
    a = [e for b in dp.make_batches(ex, 100, seed=1, pad_index=300) for e in b.examples]
    b = [e for b in dp.make_batches(ex, 100, seed=2, pad_index=300) for e in b.examples]
    assert a != b
    assert sorted(a, key=lambda e: e.label) == sorted(b, key=lambda e: e.label) == ex


def test_epochs_reshuffle():
    ex = [TrainExample((i,), i) for i in range(50)]
    first = next(dp.make_batches(ex, 50, seed=0, epoch=0, pad_index=99)).labels
    second = next(dp.make_batches(ex, 50, seed=0, epoch=1, pad_index=99)).labels
    assert not np.array_equal(first, second)


def test_batch_padding_and_mask():
    ex = [TrainExample((1,), 2), TrainExample((1, 2, 3, 1), 0)]
    (batch,) = dp.make_batches(ex, 10, shuffle=False, pad_index=9)
    assert batch.graphs.nodes.tolist() == [[1, 9, 9], [1, 2, 3]]
    assert batch.graphs.node_mask.tolist() == [[True, False, False], [True, True, True]]
    assert batch.labels.tolist() == [2, 0]


def test_bad_batch_size():
    with pytest.raises(ValueError):
        next(dp.make_batches(_examples(3), 0))
