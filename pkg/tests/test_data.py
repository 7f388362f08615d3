
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tppkit.data import (
    DataError,
    Dataset,
    Event,
    EventSequence,
    dataset_stats,
    denormalize_times,
    kfold_split,
    load_jsonl,
    mean_interevent_time,
    normalize_times,
    save_jsonl,
)


def _dataset(records, class_count=None, **kw):
    seqs = []
    for i, (times, marks) in enumerate(records):
        events = tuple(Event(t, k) for t, k in zip(times, marks))
        t_end = (times[-1] if times else 0.0) + 1.0
        seqs.append(EventSequence(events=events, t_end=t_end, seq_id=f"s{i}", **kw))
    k = class_count or (max((max(m, default=0) for _, m in records), default=0) + 1)
    return Dataset(sequences=tuple(seqs), class_count=k)


# -- loading -------------------------------------------------------------------

def test_load_minimal_record(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"events":[{"t":1.0,"k":0}],"t_end":2.0}\n')
    ds = load_jsonl(p)
    assert len(ds) == 1 and len(ds.sequences[0]) == 1
    assert ds.sequences[0].events[0].time == 1.0


def test_load_rejects_non_monotone_times(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"events":[{"t":2.0,"k":0},{"t":1.0,"k":0}],"t_end":3.0}\n')
    with pytest.raises(DataError, match="non-monotone"):
        load_jsonl(p)


def test_load_rejects_ties(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"events":[{"t":1.0,"k":0},{"t":1.0,"k":1}],"t_end":3.0}\n')
    with pytest.raises(DataError, match="non-monotone"):
        load_jsonl(p)


def test_load_reports_line_number(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"events":[],"t_end":1.0}\nnot json\n')
    with pytest.raises(DataError, match="line 2"):
        load_jsonl(p)


def test_mark_bound_validated(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"events":[{"t":1.0,"k":3}],"t_end":2.0}\n')
    with pytest.raises(DataError, match="mark"):
        load_jsonl(p, class_count=2)


def test_inconsistent_static_length_rejected(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text(
        '{"events":[{"t":1.0,"k":0}],"t_end":2.0,"static":[1.0,2.0]}\n'
        '{"events":[{"t":1.0,"k":0}],"t_end":2.0,"static":[1.0]}\n'
    )
    with pytest.raises(DataError, match="static"):
        load_jsonl(p)


def test_save_empty_dataset_is_zero_lines(tmp_path):
    p = tmp_path / "d.jsonl"
    save_jsonl(Dataset(sequences=(), class_count=1), p)
    assert p.read_text() == ""


def test_save_three_sequences_three_lines(tmp_path):
    ds = _dataset([([1.0], [0]), ([0.5, 2.0], [0, 1]), ([], [])])
    p = tmp_path / "d.jsonl"
    save_jsonl(ds, p)
    assert len(p.read_text().splitlines()) == 3


events_strategy = st.lists(
    st.tuples(st.floats(min_value=1e-3, max_value=100.0), st.integers(0, 3)),
    max_size=20,
)


@settings(max_examples=40, deadline=None)
@given(st.lists(events_strategy, max_size=6), st.booleans())
def test_roundtrip_identity(tmp_path_factory, raw, with_static):
    sequences = []
    for i, pairs in enumerate(raw):
        times = np.cumsum([t for t, _ in pairs])
        events = tuple(Event(float(t), k) for t, (_, k) in zip(times, pairs))
        static = (1.5, -2.0) if with_static else None
        t_end = float(times[-1]) + 1.0 if len(times) else 1.0
        sequences.append(EventSequence(events=events, t_end=t_end,
                                       static_features=static, seq_id=f"s{i}"))
    ds = Dataset(sequences=tuple(sequences), class_count=4)
    p = tmp_path_factory.mktemp("rt") / "d.jsonl"
    save_jsonl(ds, p)
    loaded = load_jsonl(p, class_count=4)
    assert loaded == ds


def test_roundtrip_on_generated_hawkes(small_hawkes_dataset, tmp_path):
    p = tmp_path / "hawkes.jsonl"
    save_jsonl(small_hawkes_dataset, p)
    assert load_jsonl(p, class_count=2) == small_hawkes_dataset


# -- normalization -------------------------------------------------------------

def test_normalize_equal_intervals():
    ds = _dataset([([5.0, 10.0, 15.0], [0, 0, 0])])
    out = normalize_times(ds)
    assert np.allclose(np.diff(out.sequences[0].times()), 1.0)
    assert out.time_scale == 5.0


def test_normalize_identity_when_already_unit():
    ds = _dataset([([1.0, 2.0, 3.0], [0, 0, 0])])
    out = normalize_times(ds)
    assert np.allclose(out.sequences[0].times(), ds.sequences[0].times())


def test_normalize_hawkes_mean_interval_is_one(small_hawkes_dataset):
    out = normalize_times(small_hawkes_dataset)
    assert abs(mean_interevent_time(out) - 1.0) < 1e-9


def test_denormalize_recovers_times(small_hawkes_dataset):
    out = denormalize_times(normalize_times(small_hawkes_dataset))
    for a, b in zip(out.sequences, small_hawkes_dataset.sequences):
        ta, tb = a.times(), b.times()
        if len(ta):
            assert np.max(np.abs(ta - tb) / np.maximum(tb, 1e-12)) < 1e-9


def test_normalize_rejects_degenerate():
    ds = _dataset([([1.0], [0])])
    with pytest.raises(DataError):
        normalize_times(ds)


def test_normalize_preserves_order_and_marks(small_hawkes_dataset):
    out = normalize_times(small_hawkes_dataset)
    for a, b in zip(out.sequences, small_hawkes_dataset.sequences):
        assert np.array_equal(a.marks(), b.marks())
        assert np.all(np.diff(a.times()) > 0) or len(a) < 2


# -- splitting -----------------------------------------------------------------

def test_kfold_even_partition():
    ds = _dataset([([float(i + 1)], [0]) for i in range(10)])
    for fold in range(5):
        _, _, test = kfold_split(ds, 5, fold, 0.25, seed=3)
        assert len(test) == 2


def test_kfold_deterministic():
    ds = _dataset([([float(i + 1)], [0]) for i in range(20)])
    a = kfold_split(ds, 4, 1, 0.2, seed=9)
    b = kfold_split(ds, 4, 1, 0.2, seed=9)
    assert a == b


def test_kfold_sizes_5082():
    ds = _dataset([([float(i + 1)], [0]) for i in range(5082)])
    sizes = sorted(len(kfold_split(ds, 5, f, 0.2, seed=0)[2]) for f in range(5))
    assert sizes == [1016, 1016, 1016, 1017, 1017]


@settings(max_examples=25, deadline=None)
@given(st.integers(6, 40), st.integers(2, 5), st.integers(0, 10_000))
def test_kfold_is_partition(n, folds, seed):
    ds = _dataset([([float(i + 1)], [0]) for i in range(n)])
    for fold in range(folds):
        train, valid, test = kfold_split(ds, folds, fold, 0.3, seed=seed)
        ids = [s.seq_id for part in (train, valid, test) for s in part.sequences]
        assert sorted(ids) == sorted(s.seq_id for s in ds.sequences)


def test_kfold_too_many_folds():
    ds = _dataset([([1.0], [0]), ([2.0], [0])])
    with pytest.raises(DataError):
        kfold_split(ds, 3, 0, 0.2, seed=0)


# -- statistics ----------------------------------------------------------------

def test_stats_empty():
    report = dataset_stats(Dataset(sequences=(), class_count=2))
    assert report.n_sequences == 0 and report.n_events == 0 and report.avg_length == 0.0


def test_stats_arithmetic():
    ds = _dataset([([1.0, 2.0, 3.0], [0, 1, 0]), ([1.0, 2.0, 3.0, 4.0, 5.0], [1] * 5)])
    report = dataset_stats(ds)
    assert report.n_events == 8
    assert report.avg_length == 4.0
    assert report.n_events == sum(report.class_counts)


def test_stats_table_mentions_splits(small_hawkes_dataset):
    train, valid, test = kfold_split(small_hawkes_dataset, 6, 0, 0.2, seed=0)
    report = dataset_stats(small_hawkes_dataset,
                           {"train": train, "valid": valid, "test": test})
    table = report.format_table()
    assert "train" in table and "# events" in table
    assert report.split_sizes["train"][0] + report.split_sizes["valid"][0] + \
        report.split_sizes["test"][0] == 400


def test_generated_hawkes_avg_length_near_14(small_hawkes_dataset):
    report = dataset_stats(small_hawkes_dataset)
    assert abs(report.avg_length - 14.0) <= 2.0
