"""Ranking metrics at k, their propensity-scored versions, subsampling and outlier filtering."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import PropensityLike, Seed, SparseLabels, as_propensities, check_dims, make_rng
from .errors import ParameterError
from .multilabel import DEFAULT_CAP, ps_recall, recall

SUBSAMPLE_ROUNDS = 100
DEFAULT_FILTER_Q = 0.01


def top_k(y_hat, k: int) -> SparseLabels:
    """Indices of the ``k`` largest scores; ties go to the lower index."""
    s = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    l = s.shape[0]
    if not 1 <= k <= l:
        raise ParameterError(f"k must be in [1, {l}], got {k}")
    order = np.argsort(-s, kind="stable")[:k]
    return SparseLabels(tuple(sorted(int(i) for i in order)), l)


def precision_at_k(y: SparseLabels, y_hat, k: int) -> float:
    top = top_k(y_hat, k)
    return len(set(top.indices).intersection(y.indices)) / k


def ps_precision_at_k(p: PropensityLike, y: SparseLabels, y_hat, k: int) -> float:
    """Each hit counts ``1 / p_i`` instead of 1."""
    p = as_propensities(p)
    check_dims(y, p)
    top = top_k(y_hat, k)
    hits = sorted(set(top.indices).intersection(y.indices))
    return math.fsum(1.0 / p.p[i] for i in hits) / k


def recall_at_k(y: SparseLabels, y_hat, k: int) -> float:
    return recall(y, top_k(y_hat, k))


def ps_recall_at_k(
    p: PropensityLike,
    y: SparseLabels,
    y_hat,
    k: int,
    cap: int = DEFAULT_CAP,
    rounds: int = SUBSAMPLE_ROUNDS,
    rng: Seed = None,
    max_depth: Optional[int] = 1,
) -> float:
    """Propensity-scored recall of the top-k prediction.

    Examples with more than ``cap`` observed labels go through
    :func:`subsampled_ps_recall`, which needs ``rng``.
    """
    return subsampled_ps_recall(p, y, top_k(y_hat, k), rounds=rounds, rng=rng, cap=cap, max_depth=max_depth)


def subsampled_ps_recall(
    p: PropensityLike,
    y: SparseLabels,
    prediction: SparseLabels,
    rounds: int = SUBSAMPLE_ROUNDS,
    rng: Seed = None,
    cap: int = DEFAULT_CAP,
    max_depth: Optional[int] = 1,
) -> float:
    """PS recall for label sets too large to enumerate.

    While ``|y| > cap`` each observed label is dropped with probability 1/2 and
    every propensity is halved; the composite is again a missing-label
    observation, so the estimate stays unbiased. ``rounds`` independent
    subsamples are averaged; nested subsamples (still over the cap) use a
    single round each.

    A subsample that is still over the cap after ``max_depth`` halvings is
    scored exactly (``ps_recall`` has polynomial cost). Unlimited nesting
    (``max_depth=None``) is also unbiased, but its variance is infinite: each
    extra level is reached with probability about ``2**-(cap+1)`` while the
    values grow like ``2**cap``.
    """
    if rounds < 1:
        raise ParameterError(f"rounds must be >= 1, got {rounds}")
    if max_depth is not None and max_depth < 0:
        raise ParameterError(f"max_depth must be >= 0 or None, got {max_depth}")
    p = as_propensities(p)
    check_dims(y, p)
    return _subsample(p, y, prediction, rounds, make_rng(rng) if len(y) > cap else None, cap, max_depth)


def _subsample(p, y, prediction, rounds, rng, cap, depth_left) -> float:
    if len(y) <= cap:
        return ps_recall(p, y, prediction, cap=cap)
    if depth_left == 0:
        return ps_recall(p, y, prediction, cap=None)
    half = as_propensities(p.p / 2.0)
    idx = np.asarray(y.indices)
    nxt = None if depth_left is None else depth_left - 1
    values = []
    for _ in range(rounds):
        keep = rng.random(idx.shape[0]) < 0.5
        sub = SparseLabels._trusted(tuple(int(i) for i in idx[keep]), y.num_labels)
        values.append(_subsample(half, sub, prediction, 1, rng, cap, nxt))
    return math.fsum(values) / rounds


def quantile_filter(values: Sequence[float], lower_q: float, upper_q: float) -> tuple[np.ndarray, float]:
    """Drop values strictly below the ``lower_q`` quantile or strictly above the ``1 - upper_q`` quantile.

    Quantiles interpolate linearly between order statistics. Returns the kept
    values (original order) and the fraction removed. If no value lies between
    the two quantiles (possible for tiny inputs), the values nearest the median
    are kept.
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ParameterError("cannot filter an empty list")
    if not (0.0 <= lower_q and 0.0 <= upper_q and lower_q < 1.0 - upper_q <= 1.0):
        raise ParameterError(f"need 0 <= lower_q < 1 - upper_q <= 1, got {lower_q}, {upper_q}")
    lo, hi = np.quantile(v, [lower_q, 1.0 - upper_q], method="linear")
    keep = (v >= lo) & (v <= hi)
    if not keep.any():
        gap = np.abs(v - np.median(v))
        keep = gap == gap.min()
    kept = v[keep]
    return kept, 1.0 - kept.size / v.size


@dataclass(frozen=True)
class MetricReport:
    mean: float
    std: float
    count: int
    filtered_fraction: float

    @classmethod
    def from_values(cls, values: Iterable[float], filter_q: Optional[float] = None) -> "MetricReport":
        v = np.asarray(list(values), dtype=np.float64)
        if v.size == 0:
            raise ParameterError("a metric report needs at least one value")
        fraction = 0.0
        if filter_q:
            v, fraction = quantile_filter(v, filter_q, filter_q)
        return cls(
            mean=math.fsum(v) / v.size,
            std=float(np.std(v, ddof=1)) if v.size > 1 else 0.0,
            count=int(v.size),
            filtered_fraction=float(fraction),
        )

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_predictions(
    labels: Sequence[SparseLabels],
    scores: np.ndarray,
    ks: Sequence[int] = (1, 3, 5),
    p: Optional[PropensityLike] = None,
    filter_q: Optional[float] = None,
    rng: Seed = None,
) -> dict[str, MetricReport]:
    """Dataset-level P@k and R@k, plus PSP@k and PSR@k when propensities are given.

    Outlier filtering is applied to the propensity-scored metrics only; the
    vanilla metrics are bounded in [0, 1].
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[0] != len(labels):
        raise ParameterError(f"{len(labels)} label rows but {scores.shape[0]} score rows")
    rng = make_rng(rng)
    if p is not None:
        p = as_propensities(p)
    report: dict[str, MetricReport] = {}
    for k in ks:
        tops = [top_k(row, k) for row in scores]
        hits = [len(set(t.indices).intersection(y.indices)) for t, y in zip(tops, labels)]
        report[f"P@{k}"] = MetricReport.from_values(h / k for h in hits)
        report[f"R@{k}"] = MetricReport.from_values(recall(y, t) for y, t in zip(labels, tops))
        if p is not None:
            psp = [
                math.fsum(1.0 / p.p[i] for i in set(t.indices).intersection(y.indices)) / k
                for t, y in zip(tops, labels)
            ]
            psr = [subsampled_ps_recall(p, y, t, rng=rng) for y, t in zip(labels, tops)]
            report[f"PSP@{k}"] = MetricReport.from_values(psp, filter_q)
            report[f"PSR@{k}"] = MetricReport.from_values(psr, filter_q)
    return report
