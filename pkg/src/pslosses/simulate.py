"""Synthetic data and the recall-estimator variance experiment."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .core import Propensities, Seed, SparseLabels, apply_mask_dense, make_rng
from .data import SparseDataset, label_frequency_order, split_indices, top_n_labels
from .errors import ParameterError
from .evaluation import subsampled_ps_recall
from .multilabel import DEFAULT_CAP, ps_recall, t_tilde
from .propensity import linear_inverse_propensity
from .train import ExperimentSplits

ESTIMATORS = ("vanilla", "unbiased", "upper_bound")
DEFAULT_P_GRID = tuple(round(0.1 * i, 1) for i in range(1, 11))


@dataclass(frozen=True)
class SyntheticSpec:
    num_labels: int = 100
    label_prob: float = 0.1
    num_examples: int = 10000
    seed: int = 0

    def __post_init__(self):
        if self.num_labels < 1 or self.num_examples < 1:
            raise ParameterError("need at least one label and one example")
        if not 0.0 <= self.label_prob <= 1.0:
            raise ParameterError(f"label_prob must be in [0, 1], got {self.label_prob}")


def synthetic_label_matrix(spec: SyntheticSpec, rng: Seed = None) -> np.ndarray:
    rng = make_rng(spec.seed if rng is None else rng)
    return rng.random((spec.num_examples, spec.num_labels)) < spec.label_prob


def generate_synthetic(spec: SyntheticSpec) -> list[SparseLabels]:
    """Independent labels, each present with ``label_prob``; reproducible from ``spec.seed``."""
    return [SparseLabels.from_dense(row) for row in synthetic_label_matrix(spec)]


def oracle_prediction(truth: SparseLabels, rng: Seed = None) -> SparseLabels:
    """One label drawn uniformly from ``truth`` (empty for an empty ``truth``)."""
    if not truth.indices:
        return truth
    rng = make_rng(rng)
    pick = truth.indices[int(rng.integers(len(truth)))]
    return SparseLabels._trusted((pick,), truth.num_labels)


class _UniformRecallTables:
    """Estimator values for a uniform propensity, keyed by (hits, misses).

    With one predicted label and identical propensities every estimator
    depends only on these two counts, so each value is computed once with the
    regular estimator functions.
    """

    def __init__(self, p: float, cap: int):
        self.p = p
        self.cap = cap
        self._ps: dict[tuple[int, int], float] = {}
        self._ub: dict[tuple[int, int], float] = {}

    def _labels(self, hits, misses):
        k = hits + misses
        return Propensities.uniform(self.p, k), SparseLabels._trusted(tuple(range(k)), k), \
            SparseLabels._trusted(tuple(range(hits)), k)

    def unbiased(self, hits: int, misses: int) -> float:
        key = (hits, misses)
        if key not in self._ps:
            p, y, pred = self._labels(hits, misses)
            self._ps[key] = ps_recall(p, y, pred, cap=None)
        return self._ps[key]

    def upper_bound(self, hits: int, misses: int) -> float:
        key = (hits, misses)
        if key not in self._ub:
            p, y, pred = self._labels(hits, misses)
            self._ub[key] = float(sum(t_tilde(p, y)[list(pred.indices)])) if hits else 0.0
        return self._ub[key]


def _one_repetition(args):
    truth, pred, p_grid, seed_seq, skip_empty, cap = args
    rng = np.random.default_rng(seed_seq)
    n, l = truth.shape
    # one uniform matrix per repetition, shared across the p grid
    u = rng.random(truth.shape)
    has_pred = pred >= 0
    rows = np.arange(n)
    out = {}
    for p in p_grid:
        observed = truth & (u < p)
        k = observed.sum(axis=1)
        hit = np.where(has_pred, observed[rows, np.maximum(pred, 0)], False).astype(np.int64)
        tables = _UniformRecallTables(p, cap)
        with np.errstate(invalid="ignore", divide="ignore"):
            vanilla = np.where(k > 0, hit / np.maximum(k, 1), 0.0)
        unbiased = np.zeros(n)
        upper = np.zeros(n)
        for i in np.flatnonzero(hit):
            ki = int(k[i])
            if ki > cap:
                y = SparseLabels._trusted(tuple(int(j) for j in np.flatnonzero(observed[i])), l)
                unbiased[i] = subsampled_ps_recall(Propensities.uniform(p, l), y,
                                                   SparseLabels._trusted((int(pred[i]),), l), rng=rng, cap=cap)
            else:
                unbiased[i] = tables.unbiased(1, ki - 1)
            upper[i] = tables.upper_bound(1, ki - 1)
        sel = k > 0 if skip_empty else np.ones(n, dtype=bool)
        count = max(int(sel.sum()), 1)
        out[p] = {
            "vanilla": math.fsum(vanilla[sel]) / count,
            "unbiased": math.fsum(unbiased[sel]) / count,
            "upper_bound": math.fsum(upper[sel]) / count,
        }
    return out


def _sample_std(vals: np.ndarray) -> float:
    # shifted by the first value so identical repetitions give exactly 0
    if vals.size < 2:
        return 0.0
    d = vals - vals[0]
    ss = math.fsum(d * d) - math.fsum(d) ** 2 / d.size
    return math.sqrt(max(ss, 0.0) / (d.size - 1))


def recall_variance_sweep(
    spec: SyntheticSpec,
    p_grid: Sequence[float] = DEFAULT_P_GRID,
    repetitions: int = 100,
    skip_empty: bool = False,
    threads: int = 1,
    cap: int = DEFAULT_CAP,
) -> list[dict]:
    """Mean and spread of dataset-level recall estimates under repeated masking.

    Ground truth and the single-label predictions are drawn once; every
    repetition re-masks the truth with its own derived seed, using the same
    uniforms for every ``p`` so that the curves are coupled across the grid.
    Returns rows ``{p, estimator, mean, std, true_recall}`` with ``std`` the
    sample standard deviation over repetitions.
    """
    if repetitions < 1:
        raise ParameterError("repetitions must be >= 1")
    p_grid = [float(p) for p in p_grid]
    if not p_grid or any(not 0.0 < p <= 1.0 for p in p_grid):
        raise ParameterError("p grid values must lie in (0, 1]")
    root = np.random.SeedSequence(spec.seed)
    truth_seq, pred_seq, rep_seq = root.spawn(3)
    truth = synthetic_label_matrix(spec, np.random.default_rng(truth_seq))
    pred_rng = np.random.default_rng(pred_seq)
    pred = np.full(spec.num_examples, -1, dtype=np.int64)
    for i, row in enumerate(truth):
        choice = oracle_prediction(SparseLabels._trusted(tuple(int(j) for j in np.flatnonzero(row)),
                                                         spec.num_labels), pred_rng)
        if choice.indices:
            pred[i] = choice.indices[0]
    k_true = truth.sum(axis=1)
    true_recall = math.fsum(np.where(k_true > 0, 1.0 / np.maximum(k_true, 1), 0.0)) / spec.num_examples

    jobs = [(truth, pred, p_grid, s, skip_empty, cap) for s in rep_seq.spawn(repetitions)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_one_repetition, jobs))
    else:
        results = [_one_repetition(job) for job in jobs]

    rows = []
    for p in p_grid:
        for est in ESTIMATORS:
            vals = np.array([r[p][est] for r in results])
            rows.append({
                "p": p,
                "estimator": est,
                "mean": math.fsum(vals) / vals.size,
                "std": _sample_std(vals),
                "true_recall": true_recall,
            })
    return rows


# --- synthetic data for the training experiments ------------------------------


def make_linear_dataset(
    num_examples: int,
    num_features: int,
    num_labels: int,
    seed: Seed = None,
    signal: float = 3.0,
    max_rate: float = 0.3,
    min_rate: float = 0.03,
    rng: Optional[np.random.Generator] = None,
    teacher: Optional[tuple[np.ndarray, np.ndarray]] = None,
) -> tuple[SparseDataset, tuple[np.ndarray, np.ndarray]]:
    """Gaussian features with labels from a logistic teacher model.

    Label base rates fall geometrically from ``max_rate`` to ``min_rate``, so
    frequencies are imbalanced. Pass the returned ``teacher`` back in to draw
    more data (e.g. a test set) from the same distribution.
    """
    rng = rng if rng is not None else make_rng(seed)
    if teacher is None:
        w = rng.standard_normal((num_features, num_labels)) * (signal / math.sqrt(num_features))
        rates = np.geomspace(max_rate, min_rate, num_labels)
        b = np.log(rates / (1.0 - rates))
        teacher = (w, b)
    w, b = teacher
    x = rng.standard_normal((num_examples, num_features))
    logits = x @ w + b
    y = rng.random(logits.shape) < 1.0 / (1.0 + np.exp(-logits))
    return SparseDataset(sp.csr_matrix(x), sp.csr_matrix(y.astype(np.int8))), teacher


def build_experiment(
    clean_pool: SparseDataset,
    clean_test: SparseDataset,
    p: Propensities,
    val_fraction: float = 0.3,
    seed: Seed = 0,
    top_labels: Optional[int] = None,
) -> ExperimentSplits:
    """Split clean data into train/validation and mask each part independently.

    With ``top_labels`` all splits keep the most frequent labels of the
    training part (ranked before masking); ``p`` must then refer to the
    relabelled indices.
    """
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    split_seq, mask_train_seq, mask_val_seq = seq.spawn(3)
    n = clean_pool.num_examples
    train_rows, val_rows = split_indices(n, val_fraction, np.random.default_rng(split_seq))
    if train_rows.size == 0 or val_rows.size == 0:
        raise ParameterError(f"split of {n} examples with fraction {val_fraction} leaves an empty part")
    clean_train, clean_val = clean_pool.subset(train_rows), clean_pool.subset(val_rows)
    if top_labels is not None:
        order = label_frequency_order(clean_train)
        clean_train, clean_val, clean_test = (top_n_labels(ds, top_labels, order)
                                              for ds in (clean_train, clean_val, clean_test))
    if not len(p) == clean_train.num_labels == clean_test.num_labels:
        raise ParameterError(f"{len(p)} propensities for {clean_train.num_labels} training and "
                             f"{clean_test.num_labels} test labels")
    noisy_train = clean_train.with_labels(
        apply_mask_dense(clean_train.dense_labels(), p, np.random.default_rng(mask_train_seq)))
    noisy_val = clean_val.with_labels(
        apply_mask_dense(clean_val.dense_labels(), p, np.random.default_rng(mask_val_seq)))
    return ExperimentSplits(clean_train, noisy_train, clean_val, noisy_val, clean_test)


def training_experiment(
    num_examples: int = 2000,
    num_features: int = 50,
    num_labels: int = 20,
    top: float = 2.0,
    bottom: float = 10.0,
    test_examples: int = 2000,
    val_fraction: float = 0.3,
    seed: int = 0,
) -> tuple[ExperimentSplits, Propensities]:
    """Synthetic version of :func:`build_experiment` for one seed.

    Labels are ranked by training-split frequency and receive inverse
    propensities rising linearly from ``top`` to ``bottom``.
    """
    data_seq, test_seq, rest = np.random.SeedSequence(seed).spawn(3)
    pool, teacher = make_linear_dataset(num_examples, num_features, num_labels, rng=np.random.default_rng(data_seq))
    test, _ = make_linear_dataset(test_examples, num_features, num_labels, rng=np.random.default_rng(test_seq),
                                  teacher=teacher)
    p = linear_inverse_propensity(num_labels, top, bottom)
    return build_experiment(pool, test, p, val_fraction, rest, top_labels=num_labels), p
