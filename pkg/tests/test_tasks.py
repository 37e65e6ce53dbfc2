import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from tcts.models import make_transduction_batch
from tcts.tasks import (
    HORIZON, LATENCY, DataError, ForecastBatch, ParallelCorpus, SeriesPanel, TaskSet, TaskSpec,
    assemble_batch, ingest_csv, make_synthetic_series, make_synthetic_transduction, oracle_prediction,
    read_vocab, synthetic_target, write_vocab,
)


# -- task specs --------------------------------------------------------------

def test_task_offsets():
    assert TaskSpec(LATENCY, 1).delta == 0
    assert TaskSpec(LATENCY, 5).delta == 4
    assert TaskSpec(HORIZON, 3).sigma == 3
    assert str(TaskSpec(LATENCY, 3)) == "wait-3"
    assert str(TaskSpec(HORIZON, 2)) == "horizon-2"


def test_task_spec_validation():
    with pytest.raises(ValueError):
        TaskSpec(LATENCY, 0)
    with pytest.raises(ValueError):
        TaskSpec("other", 1)
    with pytest.raises(AttributeError):
        TaskSpec(LATENCY, 1).sigma


def test_task_set_membership():
    ts = TaskSet.range(LATENCY, 13, 3)
    assert len(ts) == 13
    assert ts.main_position == 2
    assert TaskSpec(LATENCY, 13) in ts
    assert TaskSpec(LATENCY, 14) not in ts
    assert TaskSpec(HORIZON, 1) not in ts
    with pytest.raises(ValueError):
        TaskSet(LATENCY, (1, 2), 3)
    with pytest.raises(ValueError):
        TaskSet(LATENCY, (1, 1), 1)


# -- synthetic transduction --------------------------------------------------

def test_target_formula_example():
    # pairs (1,3), (2,4), (3,4), (4,4): the last two reach the final source token
    assert synthetic_target([1, 2, 3, 4], 10, 2) == [4, 6, 7, 8]


@given(x=st.lists(st.integers(0, 15), min_size=1, max_size=20))
def test_no_dependency_doubles(x):
    assert synthetic_target(x, 16, 0) == [(2 * v) % 16 for v in x]


@given(x=st.lists(st.integers(0, 15), min_size=1, max_size=20), d=st.integers(0, 25))
def test_target_reads_at_most_d_ahead(x, d):
    y = synthetic_target(x, 16, d)
    assert len(y) == len(x)
    for t in range(len(x)):
        assert y[t] == (x[t] + x[min(t + d, len(x) - 1)]) % 16


def test_corpus_shape_and_lengths():
    c = make_synthetic_transduction(0, 300, 16, 2)
    assert len(c) == 300
    for x, y in c.pairs:
        assert 5 <= len(x) <= 20
        assert len(x) == len(y)
        assert y == synthetic_target(x, 16, 2)
    lengths = {len(x) for x, _ in c.pairs}
    assert lengths == set(range(5, 21))


def test_corpus_determinism_bytes(tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    make_synthetic_transduction(7, 100, 16, 2).write(a)
    make_synthetic_transduction(7, 100, 16, 2).write(b)
    assert a.read_bytes() == b.read_bytes()
    make_synthetic_transduction(8, 100, 16, 2).write(b)
    assert a.read_bytes() != b.read_bytes()


def test_splits_differ():
    train = make_synthetic_transduction(0, 50, 16, 2, split="train")
    valid = make_synthetic_transduction(0, 50, 16, 2, split="valid")
    assert train.pairs != valid.pairs


def test_corpus_round_trip(tmp_path):
    c = make_synthetic_transduction(1, 20, 16, 2)
    c.write(tmp_path / "c.txt")
    back = ParallelCorpus.read(tmp_path / "c.txt", 16)
    assert back.pairs == c.pairs
    write_vocab(tmp_path / "vocab.txt", 16)
    assert read_vocab(tmp_path / "vocab.txt") == [str(i) for i in range(16)] + ["</s>"]


def test_corpus_validation(tmp_path):
    with pytest.raises(DataError, match="outside vocabulary"):
        ParallelCorpus([([1, 20], [1, 2])], 16)
    with pytest.raises(DataError, match="empty"):
        ParallelCorpus([([], [1])], 16)
    (tmp_path / "bad.txt").write_text("1 2\t3\nfoo\n")
    with pytest.raises(DataError, match="bad.txt:2"):
        ParallelCorpus.read(tmp_path / "bad.txt", 16)


def test_generator_preconditions():
    with pytest.raises(ValueError):
        make_synthetic_transduction(0, 10, 3, 1)
    with pytest.raises(ValueError):
        make_synthetic_transduction(0, 10, 16, -1)


# -- synthetic series --------------------------------------------------------

def test_series_prices_positive_and_label_identity():
    panel = make_synthetic_series(0, 10, 300)
    assert np.all(panel.raw[..., :4] > 0)
    p = panel.close
    for k in (1, 2, 5):
        y = panel.label(k)
        D = panel.n_days
        lhs = y[:, :D - k] * p[:, k - 1:D - 1] + p[:, k - 1:D - 1]
        np.testing.assert_allclose(lhs, p[:, k:], rtol=0, atol=1e-9 * p.max())
        assert np.all(np.isnan(y[:, D - k:]))


@pytest.mark.parametrize("h", [1, 2, 3])
def test_noiseless_oracle_rank_ic_is_one(h):
    from tcts.metrics import rank_ic
    panel = make_synthetic_series(3, 20, 300, horizon_signal=h, noise=0.0)
    pred = oracle_prediction(panel)
    y = panel.label(h)
    D = panel.n_days - h
    dates = np.repeat(np.arange(D)[None, :], panel.n_instruments, axis=0).ravel()
    assert rank_ic(dates, pred[:, :D].ravel(), y[:, :D].ravel()) == 1.0


def test_noisy_series_signal_is_partial():
    panel = make_synthetic_series(0, 20, 600)
    pred, y = oracle_prediction(panel), panel.label(1)
    rho = np.mean([spearmanr(pred[:, t], y[:, t])[0] for t in range(500)])
    assert 0.1 < rho < 0.9


def test_series_determinism():
    a, b = make_synthetic_series(5, 4, 200), make_synthetic_series(5, 4, 200)
    np.testing.assert_array_equal(a.raw, b.raw)


def test_series_precondition():
    with pytest.raises(ValueError):
        make_synthetic_series(0, 4, 70, window=60, max_horizon=10)


def test_features_use_training_statistics_only():
    panel = make_synthetic_series(1, 5, 400)
    train = panel.features[:, :panel.train_end]
    np.testing.assert_allclose(train.mean(axis=1), 0.0, atol=1e-9)
    np.testing.assert_allclose(train.std(axis=1), 1.0, atol=1e-9)
    # later days are normalised with the same statistics
    assert abs(panel.features[:, panel.valid_end:, 1].mean()) > 1e-6


def test_chronological_splits_do_not_overlap():
    panel = make_synthetic_series(2, 6, 500)
    seen = {}
    for split in ("train", "valid", "test"):
        keys = panel.samples(split, 30, (1, 2, 3))
        lo, hi = panel.split_range(split)
        assert np.all((keys[:, 1] >= lo) & (keys[:, 1] + 3 < hi))
        seen[split] = {tuple(k) for k in keys}
    assert not seen["train"] & seen["valid"]
    assert not seen["valid"] & seen["test"]
    assert max(t for _, t in seen["train"]) < min(t for _, t in seen["valid"])
    assert max(t for _, t in seen["valid"]) < min(t for _, t in seen["test"])


def test_normalized_labels_are_cross_sectional_z_scores():
    panel = make_synthetic_series(3, 8, 200)
    z = panel.normalized_label(2)[:, :150]
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-12)


# -- CSV ingestion -----------------------------------------------------------

HEADER = "date,symbol,open,close,high,low,volume\n"


def test_ingest_three_rows(tmp_path):
    f = tmp_path / "p.csv"
    f.write_text(HEADER + "2020-01-01,A,1,2,3,1,100\n2020-01-02,A,2,3,3,2,100\n2020-01-03,A,3,4,4,3,100\n")
    panel = ingest_csv(f)
    assert np.isfinite(panel.raw).all(axis=2).sum() == 3
    assert panel.dates == [dt.date(2020, 1, d) for d in (1, 2, 3)]
    np.testing.assert_array_equal(panel.close[0], [2, 3, 4])


def test_ingest_rejects_negative_close(tmp_path):
    f = tmp_path / "p.csv"
    f.write_text(HEADER + "2020-01-01,A,1,2,3,1,100\n2020-01-02,A,2,-3,3,2,100\n")
    with pytest.raises(DataError, match=r"p\.csv:3: column 'close'"):
        ingest_csv(f)


def test_ingest_rejects_unknown_column(tmp_path):
    f = tmp_path / "p.csv"
    f.write_text("date,symbol,open,close,high,low,volume,extra\n")
    with pytest.raises(DataError, match="unknown column"):
        ingest_csv(f)


def test_ingest_names_malformed_field(tmp_path):
    f = tmp_path / "p.csv"
    f.write_text(HEADER + "2020-01-01,A,1,x,3,1,100\n")
    with pytest.raises(DataError, match=r"p\.csv:2: column 'close'"):
        ingest_csv(f)
    f.write_text(HEADER + "2020-01-02,A,1,2,3,1,100\n2020-01-01,A,1,2,3,1,100\n")
    with pytest.raises(DataError, match="column 'date'"):
        ingest_csv(f)


def test_ingest_round_trip_and_train_means(tmp_path):
    panel = make_synthetic_series(4, 3, 120)
    panel.to_csv(tmp_path / "p.csv")
    back = ingest_csv(tmp_path / "p.csv")
    np.testing.assert_allclose(back.raw, panel.raw, rtol=1e-15)
    np.testing.assert_allclose(back.features[:, :back.train_end].mean(axis=1), 0.0, atol=1e-9)


# -- batch assembly ----------------------------------------------------------

def test_main_task_batch_equals_vanilla_batch():
    corpus = make_synthetic_transduction(0, 10, 16, 2)
    ts = TaskSet.range(LATENCY, 5, 3)
    batch = assemble_batch(corpus, [(i, ts.main_spec) for i in range(10)], ts)
    vanilla = make_transduction_batch([(x, y + [corpus.eos]) for x, y in corpus.pairs], 3, corpus.eos)
    for name in ("src", "src_len", "tgt", "tgt_len", "waits"):
        np.testing.assert_array_equal(getattr(batch, name), getattr(vanilla, name))


def test_latency_batch_carries_waits():
    corpus = make_synthetic_transduction(0, 6, 16, 2)
    ts = TaskSet.range(LATENCY, 5, 1)
    specs = [TaskSpec(LATENCY, m) for m in (1, 5, 2, 2, 3, 4)]
    batch = assemble_batch(corpus, list(zip(range(6), specs)), ts)
    assert batch.size == 6
    assert list(batch.waits) == [1, 5, 2, 2, 3, 4]


def test_assignment_outside_task_set_rejected():
    corpus = make_synthetic_transduction(0, 2, 16, 2)
    ts = TaskSet.range(LATENCY, 3, 1)
    with pytest.raises(ValueError, match="not in the task set"):
        assemble_batch(corpus, [(0, TaskSpec(LATENCY, 4))], ts)


def tiny_panel(closes):
    D = len(closes)
    c = np.asarray(closes, dtype=float)
    raw = np.stack([c, c, c, c, np.full(D, 1e3)], axis=-1)[None]
    dates = [dt.date(2020, 1, 1) + dt.timedelta(days=j) for j in range(D)]
    return SeriesPanel(["A"], dates, raw, 0.5, 0.25)


def test_horizon_label_example():
    panel = tiny_panel([100, 110, 121, 100])
    ts = TaskSet(HORIZON, (1,), 1)
    batch = assemble_batch(panel, [((0, 0), TaskSpec(HORIZON, 1))], ts, window=1, normalize_labels=False)
    assert isinstance(batch, ForecastBatch)
    assert batch.labels[0] == pytest.approx(0.10, abs=1e-12)


def test_undefined_labels_are_skipped_and_counted():
    panel = make_synthetic_series(0, 3, 100)
    ts = TaskSet(HORIZON, (1, 2, 3), 1)
    last = panel.n_days - 1
    assign = [((0, 70), TaskSpec(HORIZON, 1)), ((1, last), TaskSpec(HORIZON, 1)),
              ((2, last - 2), TaskSpec(HORIZON, 3)), ((2, last - 2), TaskSpec(HORIZON, 2))]
    batch = assemble_batch(panel, assign, ts, window=60)
    assert batch.size == 2 and batch.skipped == 2
    assert list(batch.heads) == [0, 1]
    assert batch.windows.shape == (2, 60, 5)


@settings(max_examples=25)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(60, 190), st.integers(1, 3)), min_size=1, max_size=30))
def test_series_batch_size_preserved_when_labels_defined(assign):
    panel = make_synthetic_series(0, 5, 200)
    ts = TaskSet(HORIZON, (1, 2, 3), 1)
    batch = assemble_batch(panel, [((i, t), TaskSpec(HORIZON, k)) for i, t, k in assign], ts, window=60)
    assert batch.size + batch.skipped == len(assign)
    for (i, t), h, y in zip(batch.keys, batch.heads, batch.labels):
        assert y == panel.normalized_label(ts.indices[h])[i, t]
