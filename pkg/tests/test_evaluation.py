import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pslosses.core import Propensities, SparseLabels
from pslosses.errors import ParameterError
from pslosses.evaluation import (
    MetricReport,
    evaluate_predictions,
    precision_at_k,
    ps_precision_at_k,
    ps_recall_at_k,
    quantile_filter,
    recall_at_k,
    subsampled_ps_recall,
    top_k,
)
from pslosses.multilabel import ps_recall
from pslosses.oracle import MaskDistribution, exact_expectation


def test_top_k_examples():
    assert top_k([0.1, 0.9, 0.5, 0.7], 2).indices == (1, 3)
    assert top_k([1.0, 1.0, 1.0], 2).indices == (0, 1)
    with pytest.raises(ParameterError):
        top_k([1.0, 2.0], 3)
    with pytest.raises(ParameterError):
        top_k([1.0, 2.0], 0)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=12, unique=True), st.data())
def test_top_k_permutation_equivariant(scores, data):
    k = data.draw(st.integers(1, len(scores)))
    perm = data.draw(st.permutations(range(len(scores))))
    base = set(top_k(scores, k).indices)
    permuted = top_k([scores[i] for i in perm], k)
    assert {perm[j] for j in permuted.indices} == base


def test_precision_recall_at_k():
    y = SparseLabels((0, 3), 5)
    s = [0.9, 0.1, 0.8, 0.7, 0.0]
    assert precision_at_k(y, s, 2) == 0.5
    assert recall_at_k(y, s, 3) == 1.0
    assert ps_precision_at_k([0.5, 1, 1, 1, 1], y, s, 2) == 1.0
    assert ps_precision_at_k(np.ones(5), y, s, 3) == precision_at_k(y, s, 3)


def test_ps_precision_unbiased_over_masks():
    p = Propensities([0.3, 0.7, 0.5, 0.9])
    truth, s = SparseLabels((0, 1, 3), 4), [0.2, 0.9, 0.8, 0.1]
    e = exact_expectation(lambda o, yh: ps_precision_at_k(p, o, yh, 2), MaskDistribution(truth, p), s)
    assert e == pytest.approx(precision_at_k(truth, s, 2), abs=1e-12)
    e = exact_expectation(lambda o, yh: ps_recall_at_k(p, o, yh, 2), MaskDistribution(truth, p), s)
    assert e == pytest.approx(recall_at_k(truth, s, 2), abs=1e-12)


def test_subsampled_equals_exact_under_cap():
    p = np.full(6, 0.4)
    y, pred = SparseLabels((0, 1, 4), 6), SparseLabels((1,), 6)
    assert subsampled_ps_recall(p, y, pred, cap=3) == ps_recall(p, y, pred)


def test_subsampling_one_level_is_exactly_unbiased():
    p = Propensities([0.9, 0.6, 0.8, 0.7, 0.5, 1.0])
    y, pred = SparseLabels((0, 1, 2, 3, 5), 6), SparseLabels((1, 5), 6)
    cap, half = 2, Propensities(p.p / 2)
    total = 0.0
    for bits in itertools.product((0, 1), repeat=len(y)):
        sub = SparseLabels(tuple(i for i, b in zip(y.indices, bits) if b), 6)
        total += ps_recall(half, sub, pred, cap=None)
    assert total / 2 ** len(y) == pytest.approx(ps_recall(p, y, pred), abs=1e-9)


def test_subsampling_rounds_reduce_spread():
    p = np.full(10, 0.8)
    y, pred = SparseLabels(tuple(range(8)), 10), SparseLabels((0,), 10)
    rng = np.random.default_rng(0)
    one = [subsampled_ps_recall(p, y, pred, rounds=1, rng=rng, cap=4) for _ in range(300)]
    many = [subsampled_ps_recall(p, y, pred, rounds=100, rng=rng, cap=4) for _ in range(30)]
    assert np.std(many) < np.std(one) / 3
    assert subsampled_ps_recall(p, y, pred, rng=5, cap=4) == subsampled_ps_recall(p, y, pred, rng=5, cap=4)
    with pytest.raises(ParameterError):
        subsampled_ps_recall(p, y, pred, rounds=0)
    with pytest.raises(ParameterError):
        subsampled_ps_recall(p, y, pred, max_depth=-1)


def test_quantile_filter():
    kept, frac = quantile_filter(np.arange(1, 101), 0.01, 0.01)
    assert kept.min() == 2 and kept.max() == 99 and frac == pytest.approx(0.02)
    kept, frac = quantile_filter([3.0, 3.0, 3.0], 0.1, 0.1)
    assert kept.tolist() == [3.0, 3.0, 3.0] and frac == 0.0
    kept, frac = quantile_filter([5.0, 1.0, 2.0], 0.0, 0.0)
    assert kept.tolist() == [5.0, 1.0, 2.0]
    with pytest.raises(ParameterError):
        quantile_filter([], 0.1, 0.1)
    with pytest.raises(ParameterError):
        quantile_filter([1.0], 0.6, 0.5)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=50), st.floats(0.0, 0.4))
def test_quantile_filter_bounds(values, q):
    kept, _ = quantile_filter(values, q, q)
    assert kept.size >= 1
    assert min(values) <= kept.mean() + 1e-9 and kept.mean() <= max(values) + 1e-9


def test_metric_report_and_evaluate():
    rep = MetricReport.from_values([1.0, 2.0, 3.0])
    assert rep.to_dict() == {"mean": 2.0, "std": 1.0, "count": 3, "filtered_fraction": 0.0}
    assert MetricReport.from_values([4.0]).std == 0.0
    labels = [SparseLabels((0,), 3), SparseLabels((1, 2), 3)]
    scores = np.array([[0.9, 0.1, 0.0], [0.8, 0.5, 0.3]])
    out = evaluate_predictions(labels, scores, ks=(1, 2))
    assert out["P@1"].mean == 0.5 and out["R@2"].mean == 0.75
    assert "PSP@1" not in out
    ps = evaluate_predictions(labels, scores, ks=(1,), p=np.ones(3), rng=0)
    assert ps["PSP@1"].mean == ps["P@1"].mean and ps["PSR@1"].mean == ps["R@1"].mean
    with pytest.raises(ParameterError):
        evaluate_predictions(labels, scores[:1])
