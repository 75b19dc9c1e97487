import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gfemamba.errors import ValidationError
from gfemamba.metrics import (
    ConfusionCounts,
    aggregate_reports,
    compute_metrics,
    confusion_counts,
    confusion_matrix_normalized,
    kfold_split,
    mean_roc,
    roc_auc,
)
from oracles import formula_metrics, pairwise_auc


def test_confusion_counts_hand_example():
    c = confusion_counts([1, 1, 0, 0], [1, 0, 0, 1])
    assert (c.tp, c.fp, c.tn, c.fn) == (1, 1, 1, 1)


def test_confusion_counts_all_correct():
    c = confusion_counts([1, 0, 1, 0, 0], [1, 0, 1, 0, 0])
    assert c.fp == 0 and c.fn == 0 and c.total == 5


def test_confusion_counts_matches_tally_loop():
    rng = np.random.default_rng(3)
    p = rng.integers(0, 2, 1000)
    y = rng.integers(0, 2, 1000)
    tally = {"tp": 0, "fp": 0, "tn": 0, "fn": 0}
    for a, b in zip(p, y):
        key = ("t" if a == b else "f") + ("p" if a == 1 else "n")
        tally[key] += 1
    c = confusion_counts(p, y)
    assert (c.tp, c.fp, c.tn, c.fn) == (tally["tp"], tally["fp"], tally["tn"], tally["fn"])


def test_confusion_counts_length_mismatch():
    with pytest.raises(ValidationError):
        confusion_counts([1, 0], [1])


def test_metrics_worked_example():
    r = compute_metrics(ConfusionCounts(tp=3, fp=1, tn=5, fn=1))
    assert r.precision == pytest.approx(0.75)
    assert r.recall == pytest.approx(0.75)
    assert r.f1 == pytest.approx(0.75)
    assert r.accuracy == pytest.approx(0.8)
    assert r.mcc == pytest.approx(14 / 24)
    assert r.undefined == {}


def test_metrics_perfect_classifier():
    r = compute_metrics(ConfusionCounts(tp=7, fp=0, tn=4, fn=0))
    assert (r.precision, r.recall, r.f1, r.accuracy, r.mcc) == (1.0, 1.0, 1.0, 1.0, 1.0)


def test_metrics_zero_denominator_flagged():
    r = compute_metrics(ConfusionCounts(tp=0, fp=0, tn=5, fn=3))
    assert r.precision == 0.0 and r.undefined["precision"]
    assert r.mcc == 0.0 and r.undefined["mcc"]


def test_metrics_agree_with_formula_on_small_grid():
    # full 11^4 enumeration lives in the acceptance module
    for tp, fp, tn, fn in itertools.product(range(4), repeat=4):
        if tp + fp + tn + fn == 0:
            continue
        r = compute_metrics(ConfusionCounts(tp, fp, tn, fn))
        ref = formula_metrics(tp, fp, tn, fn)
        for key, val in ref.items():
            got = getattr(r, key)
            if val is None:
                assert got == 0.0 and r.undefined.get(key)
            else:
                assert abs(got - val) <= 1e-12


@given(st.tuples(*[st.integers(0, 50)] * 4).filter(lambda t: sum(t) > 0))
def test_metric_ranges(t):
    r = compute_metrics(ConfusionCounts(*t))
    for key in ("precision", "recall", "f1", "accuracy"):
        assert 0.0 <= getattr(r, key) <= 1.0
    assert -1.0 - 1e-12 <= r.mcc <= 1.0 + 1e-12


def test_auc_separable_and_ties():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]).auc == 1.0
    assert roc_auc([0.5] * 6, [1, 0, 1, 0, 0, 1]).auc == 0.5


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000))
def test_auc_equals_pairwise_concordance(n, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    scores = rng.integers(0, 4, n) / 4.0  # coarse grid forces ties
    assert roc_auc(scores, labels).auc == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)


def test_roc_curve_shape():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 50)
    c = roc_auc(rng.random(50), y)
    assert (c.fpr[0], c.tpr[0]) == (0.0, 0.0)
    assert (c.fpr[-1], c.tpr[-1]) == (1.0, 1.0)
    assert np.all(np.diff(c.fpr) >= 0) and np.all(np.diff(c.tpr) >= 0)


def test_auc_single_class_rejected():
    with pytest.raises(ValidationError):
        roc_auc([0.1, 0.2], [1, 1])


def test_mean_roc_grid_and_band():
    rng = np.random.default_rng(1)
    curves = [roc_auc(rng.random(30), rng.integers(0, 2, 30)) for _ in range(7)]
    m = mean_roc(curves)
    assert m["fpr"].shape == (101,)
    assert m["mean_tpr"][0] == 0.0 and m["mean_tpr"][-1] == 1.0
    assert np.all(m["lower"] <= m["mean_tpr"] + 1e-12) and np.all(m["upper"] >= m["mean_tpr"] - 1e-12)
    tprs = np.array([np.interp(m["fpr"], c.fpr, c.tpr) for c in curves])
    inner = slice(1, 100)
    expected_upper = np.clip(tprs.mean(0) + 1.5 * tprs.std(0), 0, 1)
    assert np.allclose(m["upper"][inner], expected_upper[inner])


def test_kfold_sizes_302():
    splits = kfold_split(302, 7, seed=0)
    sizes = sorted((len(t) for _, t in splits), reverse=True)
    assert sizes == [44, 43, 43, 43, 43, 43, 43]


@settings(max_examples=40, deadline=None)
@given(st.integers(7, 200), st.integers(0, 1000), st.booleans())
def test_kfold_partition(n, seed, stratify):
    labels = np.random.default_rng(seed).integers(0, 2, n) if stratify else None
    splits = kfold_split(n, 7, labels=labels, seed=seed)
    tests = np.concatenate([t for _, t in splits])
    assert sorted(tests.tolist()) == list(range(n))
    sizes = [len(t) for _, t in splits]
    assert max(sizes) - min(sizes) <= 1
    for train, test in splits:
        assert not set(train) & set(test)
        assert len(train) + len(test) == n


def test_kfold_grouped_never_splits_subject():
    rng = np.random.default_rng(5)
    groups = rng.integers(0, 40, 128)
    labels = rng.integers(0, 2, 128)
    for train, test in kfold_split(128, 7, groups=groups, labels=labels, seed=2):
        assert not set(groups[train]) & set(groups[test])


def test_kfold_deterministic_and_errors():
    a = kfold_split(50, 7, seed=4)
    b = kfold_split(50, 7, seed=4)
    assert all(np.array_equal(x[1], y[1]) for x, y in zip(a, b))
    with pytest.raises(ValidationError):
        kfold_split(5, 7)


def test_confusion_matrix_normalized():
    m, flags = confusion_matrix_normalized(ConfusionCounts(tp=9, fp=2, tn=8, fn=1))
    assert np.allclose(m, [[0.8, 0.2], [0.1, 0.9]])
    assert flags["empty_rows"] == []
    m, _ = confusion_matrix_normalized(ConfusionCounts(tp=5, fp=0, tn=3, fn=0))
    assert np.array_equal(m, np.eye(2))
    m, flags = confusion_matrix_normalized(ConfusionCounts(tp=0, fp=2, tn=3, fn=0))
    assert flags["empty_rows"] == [1] and np.array_equal(m[1], [0.0, 0.0])


@given(st.tuples(*[st.integers(1, 1000)] * 4))
def test_confusion_rows_sum_to_one(t):
    m, _ = confusion_matrix_normalized(ConfusionCounts(*t))
    assert np.allclose(m.sum(axis=1), 1.0, atol=1e-12)


def test_aggregate_reports():
    reps = [compute_metrics(ConfusionCounts(3, 1, 5, 1)), compute_metrics(ConfusionCounts(4, 0, 4, 0))]
    agg = aggregate_reports(reps)
    assert agg["accuracy"]["mean"] == pytest.approx(0.9)
    assert agg["accuracy"]["std"] == pytest.approx(0.1)
