import numpy as np
import pytest

from pslosses.core import SparseLabels
from pslosses.errors import ParameterError
from pslosses.simulate import (
    SyntheticSpec,
    build_experiment,
    generate_synthetic,
    make_linear_dataset,
    oracle_prediction,
    recall_variance_sweep,
    training_experiment,
)
from pslosses.propensity import linear_inverse_propensity


def test_generate_synthetic_extremes_and_mean():
    assert all(len(y) == 0 for y in generate_synthetic(SyntheticSpec(10, 0.0, 20)))
    assert all(len(y) == 10 for y in generate_synthetic(SyntheticSpec(10, 1.0, 20)))
    ys = generate_synthetic(SyntheticSpec(50, 0.2, 400, seed=3))
    counts = np.array([len(y) for y in ys])
    se = np.sqrt(50 * 0.2 * 0.8 / 400)
    assert abs(counts.mean() - 10) < 4 * se
    assert [y.indices for y in ys] == [y.indices for y in generate_synthetic(SyntheticSpec(50, 0.2, 400, seed=3))]
    with pytest.raises(ParameterError):
        SyntheticSpec(10, 1.5, 5)


def test_oracle_prediction():
    assert oracle_prediction(SparseLabels((7,), 9), 0).indices == (7,)
    assert oracle_prediction(SparseLabels((), 9), 0).indices == ()
    rng = np.random.default_rng(0)
    picks = [oracle_prediction(SparseLabels((1, 4, 6), 9), rng).indices[0] for _ in range(3000)]
    freq = np.array([picks.count(i) for i in (1, 4, 6)]) / 3000
    assert np.all(np.abs(freq - 1 / 3) < 4 * np.sqrt(2 / 9 / 3000))


@pytest.fixture(scope="module")
def sweep():
    return recall_variance_sweep(SyntheticSpec(30, 0.1, 300, seed=2), [0.3, 1.0], repetitions=20)


def test_sweep_reproducible_and_exact_at_one(sweep):
    again = recall_variance_sweep(SyntheticSpec(30, 0.1, 300, seed=2), [0.3, 1.0], repetitions=20)
    assert sweep == again
    at_one = [r for r in sweep if r["p"] == 1.0]
    assert len({r["mean"] for r in at_one}) == 1
    assert all(r["std"] == 0.0 and r["mean"] == r["true_recall"] for r in at_one)


def test_sweep_bias_directions(sweep):
    rows = {r["estimator"]: r for r in sweep if r["p"] == 0.3}
    truth, se = rows["vanilla"]["true_recall"], lambda r: r["std"] / np.sqrt(20)
    # empty observations score zero, so plain recall is pulled down
    assert rows["vanilla"]["mean"] < truth
    assert abs(rows["unbiased"]["mean"] - truth) < 4 * se(rows["unbiased"])
    assert rows["upper_bound"]["mean"] > rows["vanilla"]["mean"]


def test_sweep_options():
    spec = SyntheticSpec(20, 0.1, 100, seed=1)
    plain = recall_variance_sweep(spec, [0.5], repetitions=3)
    skipped = recall_variance_sweep(spec, [0.5], repetitions=3, skip_empty=True)
    for a, b in zip(plain, skipped):
        assert b["mean"] >= a["mean"]
    assert recall_variance_sweep(spec, [0.5], repetitions=3, threads=2) == plain
    with pytest.raises(ParameterError):
        recall_variance_sweep(spec, [0.0])
    with pytest.raises(ParameterError):
        recall_variance_sweep(spec, [0.5], repetitions=0)


def test_training_experiment_shapes():
    splits, p = training_experiment(num_examples=100, num_features=4, num_labels=5, test_examples=40, seed=0)
    assert splits.clean_train.num_examples == 70 and splits.noisy_val.num_examples == 30
    assert splits.clean_test.num_examples == 40 and len(p) == 5
    counts = splits.clean_train.label_counts()
    assert np.all(np.diff(counts) <= 0)
    for clean, noisy in ((splits.clean_train, splits.noisy_train), (splits.clean_val, splits.noisy_val)):
        diff = clean.dense_labels().astype(int) - noisy.dense_labels()
        assert diff.min() >= 0


def test_build_experiment_checks_label_count():
    pool, teacher = make_linear_dataset(50, 3, 4, seed=0)
    test, _ = make_linear_dataset(20, 3, 4, seed=1, teacher=teacher)
    with pytest.raises(ParameterError):
        build_experiment(pool, test, linear_inverse_propensity(3, 2, 10))
    with pytest.raises(ParameterError):
        build_experiment(pool, test, linear_inverse_propensity(4, 2, 10), val_fraction=0.001)
