import math

import numpy as np
import pandas as pd
import pytest

from recdistill import corpus
from recdistill.corpus import PAD, SequenceSample
from recdistill.errors import EmptyAfterFilterError, EmptyInputError, ParameterError, ParseError


def _log(histories, ratings=False):
    """Build a log from ``{user: [item, ...]}`` with timestamps 1, 2, ..."""
    rows = []
    for user, items in histories.items():
        for t, item in enumerate(items, start=1):
            rows.append((user, item, t, 5.0 if ratings else math.nan))
    return corpus.from_events(pd.DataFrame(rows, columns=["user", "item", "timestamp", "rating"]))


def test_load_counts_users_and_items(write_log, tmp_path):
    path = write_log(["u1\ta\t10", "u1\tb\t20", "u2\ta\t15"])
    log = corpus.load_interactions(path, map_dir=tmp_path / "maps")
    assert (log.user_count, log.catalog_size) == (2, 2)
    assert not log.has_ratings
    assert log.events["rating"].isna().all()
    assert corpus.read_id_map(tmp_path / "maps" / "items.map") == {"a": 1, "b": 2}


def test_load_skips_header_and_reads_ratings(write_log):
    path = write_log(["user,item,timestamp,rating", "1,7,3,4.5", "1,8,1,2", "2,7,2,5"], name="e.csv")
    log = corpus.load_interactions(path)
    assert len(log.events) == 3
    assert log.has_ratings
    first = log.events[log.events["user"] == 1]
    assert first["timestamp"].tolist() == [1, 3]


def test_numeric_ids_are_ordered_numerically(write_log):
    log = corpus.load_interactions(write_log(["10\t2\t1", "9\t11\t2", "9\t2\t3"]))
    assert list(log.raw_users) == ["9", "10"]
    assert list(log.raw_items) == ["2", "11"]


def test_malformed_row_names_line(write_log):
    path = write_log(["u1\ta\t10", "u1\tb\tsoon"])
    with pytest.raises(ParseError) as info:
        corpus.load_interactions(path)
    assert info.value.line == 2


def test_malformed_first_row_is_not_taken_for_a_header(write_log):
    with pytest.raises(ParseError) as info:
        corpus.load_interactions(write_log(["1,7,abc", "1,8,2", "2,7,3"], name="e.csv"))
    assert info.value.line == 1
    with pytest.raises(ParseError) as info:
        corpus.load_interactions(write_log(["u1\ta\tsoon", "u1\tb\t20", "u2\ta\t15"]))
    assert info.value.line == 1


def test_equal_timestamps_keep_file_order(write_log):
    log = corpus.load_interactions(write_log(["u\ta\t5", "u\tb\t5", "u\tc\t3", "u\td\t6"]))
    parts = corpus.partition(corpus.build_sequences(log, max_len=4))
    (test,), (valid,) = parts["test"], parts["valid"]
    # dense ids follow raw order: a=1, b=2, c=3, d=4
    assert test.sequence == (PAD, 3, 1, 2) and test.target == 4
    assert valid.sequence == (PAD, PAD, 3, 1) and valid.target == 2


def test_empty_file(write_log):
    with pytest.raises(EmptyInputError):
        corpus.load_interactions(write_log([""]))


def test_filter_drops_short_user():
    histories = {u: [1, 2, 3, 4, 5] for u in range(1, 6)}
    histories[6] = [1, 2, 3, 4]
    log = corpus.filter_min_interactions(_log(histories), k=5)
    assert log.user_count == 5
    assert log.events.groupby("user").size().min() >= 5


def test_filter_chain_removal():
    # item 9 has one event; dropping it leaves user 3 below k=2
    out = corpus.filter_min_interactions(_log({1: [1, 2], 2: [1, 2], 3: [1, 9]}), k=2)
    assert out.user_count == 2
    assert set(out.raw_items) == {"1", "2"}


def test_filter_is_idempotent(toy_data):
    log, _, _ = toy_data
    once = corpus.filter_min_interactions(log, 3)
    twice = corpus.filter_min_interactions(once, 3)
    pd.testing.assert_frame_equal(once.events, twice.events)


def test_filter_to_nothing():
    with pytest.raises(EmptyAfterFilterError):
        corpus.filter_min_interactions(_log({1: [1, 2]}), k=5)


def test_leave_one_out_windows():
    samples = corpus.build_sequences(_log({1: [1, 2, 3, 4]}), max_len=10)
    parts = corpus.partition(samples)
    (test,), (valid,) = parts["test"], parts["valid"]
    assert test.sequence == (PAD,) * 7 + (1, 2, 3) and test.target == 4
    assert valid.sequence == (PAD,) * 8 + (1, 2) and valid.target == 3
    assert [s.target for s in parts["train"]] == [2]


def test_exactly_l_plus_one_history():
    items = list(range(1, 12))
    (test,) = corpus.partition(corpus.build_sequences(_log({1: items}), max_len=10))["test"]
    assert PAD not in test.sequence
    assert test.sequence == tuple(range(1, 11))


def test_long_history_is_cut_into_windows():
    items = list(range(1, 22))
    train = corpus.partition(corpus.build_sequences(_log({1: items}), max_len=10))["train"]
    assert len(train) == 2
    assert train[0].sequence == tuple(range(1, 11)) and train[0].target == 11
    assert train[1].target == 19
    assert train[1].sequence == (PAD,) * 3 + tuple(range(12, 19))


def test_window_prefixes_make_each_event_a_target_once():
    items = list(range(1, 22))
    train = corpus.partition(corpus.build_sequences(_log({1: items}), max_len=10, prefixes=True))["train"]
    targets = [s.target for s in train]
    assert targets == list(range(2, 12)) + list(range(13, 20))
    by_target = {s.target: s.sequence for s in train}
    assert by_target[2] == (PAD,) * 9 + (1,)
    assert by_target[11] == tuple(range(1, 11))
    # windows never feed each other
    assert by_target[13] == (PAD,) * 9 + (12,)
    assert by_target[19] == (PAD,) * 3 + tuple(range(12, 19))


def test_short_users_are_skipped(caplog):
    samples = corpus.build_sequences(_log({1: [1, 2], 2: [1, 2, 3]}), max_len=4)
    assert {s.user_id for s in samples} == {2}
    assert "fewer than 3" in caplog.text


def test_splits_are_disjoint_and_causal(toy_data):
    log, parts, _ = toy_data
    assert len(parts["test"]) == len(parts["valid"]) == log.user_count
    assert len({s.user_id for s in parts["test"]}) == log.user_count
    assert all(s.target != PAD for split in corpus.SPLITS for s in parts[split])
    histories = {u: list(items) for u, items, _ in log.histories()}
    for s in parts["test"]:
        items = [i for i in s.sequence if i != PAD]
        history = histories[s.user_id]
        assert history[-1] == s.target
        assert items == history[-1 - len(items):-1]


def test_subsample_counts_and_determinism():
    samples = [SequenceSample(1, (PAD, i), i, "train") for i in range(1, 101)]
    assert len(corpus.subsample(samples, 0.8, seed=4)) == 80
    assert corpus.subsample(samples, 0.8, seed=4) == corpus.subsample(samples, 0.8, seed=4)
    assert corpus.subsample(samples, 1.0, seed=9) == samples
    for bad in (0.0, 1.5):
        with pytest.raises(ParameterError):
            corpus.subsample(samples, bad, seed=0)
    with pytest.raises(ParameterError):
        corpus.subsample([SequenceSample(1, (PAD, 1), 2, "test")], 1.0, seed=0)


def _train_with_targets(targets):
    return [SequenceSample(1, (PAD,), t, "train") for t in targets]


def test_uniform_popularity_ties_by_id():
    bins = corpus.popularity_bins(_train_with_targets(range(1, 11)), catalog_size=10)
    assert bins.popular_items == {1, 2}
    assert bins.popular_items | bins.niche_items == set(range(1, 11))
    assert not bins.popular_items & bins.niche_items


def test_dominant_item_is_popular():
    bins = corpus.popularity_bins(_train_with_targets([4, 4, 4, 4, 1, 2, 3, 5]), catalog_size=5)
    assert bins.popular_items == {4}
    assert bins.kind(4) == "popular-type" and bins.kind(1) == "niche-type"


def test_zipf_popularity_matches_sort():
    rng = np.random.default_rng(0)
    weights = 1.0 / np.arange(1, 101)
    targets = rng.choice(np.arange(1, 101), size=3000, p=weights / weights.sum())
    bins = corpus.popularity_bins(_train_with_targets(targets.tolist()), catalog_size=100)
    counts = np.bincount(targets, minlength=101)[1:]
    expected = sorted(range(1, 101), key=lambda i: (-counts[i - 1], i))[:20]
    assert bins.popular_items == set(expected)


def test_bins_roundtrip(tmp_path):
    bins = corpus.popularity_bins(_train_with_targets([1, 1, 2]), catalog_size=6)
    bins.save(tmp_path / "bins.json")
    assert corpus.PopularityBins.load(tmp_path / "bins.json") == bins


def test_remove_users():
    log = _log({u: [1, 2, 3] for u in range(1, 11)})
    assert corpus.remove_users(log, 0.0, seed=0, min_interactions=None).user_count == 10
    half = corpus.remove_users(log, 0.5, seed=0, min_interactions=None)
    assert half.user_count == 5
    assert half.sparsity == pytest.approx(1 - 15 / (5 * 3))


def test_split_file_roundtrip(tmp_path):
    samples = [SequenceSample(3, (PAD, 4, 5), 6, "valid", 4.5), SequenceSample(4, (PAD, PAD, 1), 2, "valid")]
    corpus.write_split(samples, tmp_path / "valid.txt")
    assert corpus.read_split(tmp_path / "valid.txt", "valid") == samples
    assert (tmp_path / "valid.txt").read_text().splitlines()[1] == "4\t0 0 1\t2\t-"
