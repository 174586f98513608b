"""Unbiased estimators for multilabel losses under missing labels.

The general estimator sums over every subset of the observed positives, so its
cost is ``2 ** |observed|`` loss evaluations; :data:`DEFAULT_CAP` bounds it.
The reductions (OvA, PAL and their normalized forms) reduce to per-label
weights, which is how both :func:`reduction_loss` and the trainer evaluate them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .binary import BinaryLoss, Variant, get_binary_loss
from .core import PropensityLike, SparseLabels, as_propensities, check_dims
from .errors import ParameterError, TooManyLabelsError

DEFAULT_CAP = 25

MultilabelLossFn = Callable[[SparseLabels, np.ndarray], float]


def _check_cap(y: SparseLabels, cap: Optional[int]) -> None:
    if cap is not None and len(y) > cap:
        raise TooManyLabelsError(
            f"{len(y)} observed labels exceed the enumeration cap of {cap}; use subsampling"
        )


def _subset_table(values: Sequence) -> list:
    """Products over all subsets, indexed by bitmask (bit b <-> ``values[b]``)."""
    table = [1.0]
    for v in values:
        table = table + [t * v for t in table]
    return table


def elementary_symmetric(values) -> np.ndarray:
    """``e_0 .. e_n`` of ``values``."""
    e = np.zeros(len(values) + 1)
    e[0] = 1.0
    for n, v in enumerate(values, start=1):
        e[1 : n + 1] = e[1 : n + 1] + v * e[0:n]
    return e


def unbiased_general(
    f_star: MultilabelLossFn,
    p: PropensityLike,
    y: SparseLabels,
    y_hat,
    cap: Optional[int] = DEFAULT_CAP,
) -> float:
    """Unbiased estimate of an arbitrary multilabel loss from observed labels ``y``.

    Evaluates ``prod_{i in y} 1/p_i * sum_{J subset y} f_star(J) prod_{j in y minus J} (p_j - 1)``.
    Subsets whose weight is exactly zero (some excluded label has ``p = 1``) are
    skipped. The sum is accumulated with :func:`math.fsum` because terms
    alternate in sign.
    """
    p = as_propensities(p)
    check_dims(y, p)
    _check_cap(y, cap)
    idx = y.indices
    if not idx:
        return float(f_star(y, y_hat))
    pk = [float(p.p[i]) for i in idx]
    weights = _subset_table([v - 1.0 for v in pk])
    subsets = [()]
    for i in idx:
        subsets = subsets + [s + (i,) for s in subsets]
    full = len(subsets) - 1
    terms = []
    for mask, subset in enumerate(subsets):
        w = weights[full ^ mask]
        if w == 0.0:
            continue
        terms.append(w * float(f_star(SparseLabels._trusted(subset, y.num_labels), y_hat)))
    return math.fsum(terms) / math.prod(pk)


# --- normalized label weights ------------------------------------------------


def vanilla_T(y: SparseLabels) -> np.ndarray:
    """``y_i / sum_j y_j`` as a dense vector (all zeros for an empty label set)."""
    out = np.zeros(y.num_labels)
    if y.indices:
        out[list(y.indices)] = 1.0 / len(y)
    return out


def normalized_T(p: PropensityLike, y: SparseLabels, cap: Optional[int] = DEFAULT_CAP) -> np.ndarray:
    """Unique unbiased estimate of the normalized label weights ``y_i / sum_j y_j``.

    The subset sum collapses to a one-dimensional integral,
    ``T_i = prod_j 1/p_j * int_0^1 prod_{j != i} (t + p_j - 1) dt``,
    whose integrand is a polynomial of degree ``|y| - 1``; Gauss-Legendre
    quadrature with enough nodes evaluates it exactly up to rounding, without
    the alternating subset sum.
    """
    p = as_propensities(p)
    check_dims(y, p)
    _check_cap(y, cap)
    out = np.zeros(y.num_labels)
    k = len(y)
    if k == 0:
        return out
    idx = np.asarray(y.indices)
    pk = p.p[idx]
    nodes, wts = np.polynomial.legendre.leggauss(k // 2 + 1)
    t = 0.5 * (nodes + 1.0)
    wts = 0.5 * wts
    factors = t[:, None] + (pk - 1.0)[None, :]  # (nodes, k)
    pref = 1.0 / np.prod(pk)
    for pos in range(k):
        others = np.delete(factors, pos, axis=1)
        out[idx[pos]] = pref * float(np.dot(wts, np.prod(others, axis=1)))
    return out


def t_tilde(p: PropensityLike, y: SparseLabels, full_denominator: bool = False) -> np.ndarray:
    """Upper-bound surrogate ``(y_i/p_i) / (1 + sum_{j != i} y_j/p_j)``.

    Not unbiased, but its expectation dominates the clean weight. With
    ``full_denominator`` the denominator is ``sum_j y_j/p_j`` over all observed
    labels, i.e. the weights are self-normalized.
    """
    p = as_propensities(p)
    check_dims(y, p)
    out = np.zeros(y.num_labels)
    if not y.indices:
        return out
    idx = np.asarray(y.indices)
    r = 1.0 / p.p[idx]
    total = r.sum()
    denom = total if full_denominator else 1.0 + (total - r)
    out[idx] = r / denom
    return out


# --- multiclass losses for PAL reductions -----------------------------------


@dataclass(frozen=True)
class MulticlassLoss:
    """``g(i, scores)`` for every label ``i`` at once, plus the gradient of a weighted sum."""

    name: str
    values: Callable[[np.ndarray], np.ndarray]
    weighted_grad: Callable[[np.ndarray, np.ndarray], np.ndarray]


def _logsumexp(s):
    m = np.max(s, axis=-1, keepdims=True)
    return m + np.log(np.sum(np.exp(s - m), axis=-1, keepdims=True))


def _softmax(s):
    e = np.exp(s - np.max(s, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


SOFTMAX_CCE = MulticlassLoss(
    "cce",
    values=lambda s: _logsumexp(s) - s,
    weighted_grad=lambda w, s: np.sum(w, axis=-1, keepdims=True) * _softmax(s) - w,
)
# g(i, s) = s_i; with 0/1 predictions the normalized PAL form is per-example recall
LINEAR = MulticlassLoss("linear", values=lambda s: np.asarray(s, dtype=np.float64), weighted_grad=lambda w, s: w)

MULTICLASS_LOSSES = {SOFTMAX_CCE.name: SOFTMAX_CCE, LINEAR.name: LINEAR}


def get_multiclass_loss(name: Union[str, MulticlassLoss]) -> MulticlassLoss:
    if isinstance(name, MulticlassLoss):
        return name
    try:
        return MULTICLASS_LOSSES[name]
    except KeyError:
        raise ParameterError(f"unknown multiclass loss {name!r}; choose from {sorted(MULTICLASS_LOSSES)}") from None


# --- reductions ---------------------------------------------------------------

REDUCTION_KINDS = ("ova", "pal", "ova_n", "pal_n")


@dataclass(frozen=True)
class Reduction:
    """A multilabel reduction with its base loss and missing-label variant.

    ``base`` is a binary loss name for ``ova``/``ova_n`` and a multiclass loss
    name for ``pal``/``pal_n``. For ``pal`` the unbiased and upper-bound
    variants coincide. For ``ova_n`` the upper-bound variant is the same
    heuristic weighting as for ``pal_n`` and is not guaranteed to bound the
    unbiased loss for BCE or squared hinge.
    """

    kind: str
    base: str
    variant: Variant = Variant.VANILLA
    full_denominator: bool = False
    cap: Optional[int] = DEFAULT_CAP

    def __post_init__(self):
        if self.kind not in REDUCTION_KINDS:
            raise ParameterError(f"unknown reduction {self.kind!r}; choose from {REDUCTION_KINDS}")
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.is_ova:
            get_binary_loss(self.base)
        else:
            get_multiclass_loss(self.base)

    @property
    def is_ova(self) -> bool:
        return self.kind in ("ova", "ova_n")

    @property
    def normalized(self) -> bool:
        return self.kind.endswith("_n")

    @property
    def binary_loss(self) -> BinaryLoss:
        return get_binary_loss(self.base)

    @property
    def multiclass_loss(self) -> MulticlassLoss:
        return get_multiclass_loss(self.base)

    def with_variant(self, variant) -> "Reduction":
        return Reduction(self.kind, self.base, Variant(variant), self.full_denominator, self.cap)


def label_weights(r: Reduction, p: PropensityLike, y: SparseLabels) -> tuple[np.ndarray, np.ndarray]:
    """Per-label coefficients ``(A, B)`` of the loss as a function of the scores.

    OvA-type losses are ``sum_i A_i pos(s_i) + B_i neg(s_i)``; PAL-type losses
    are ``sum_i A_i g(i, s)`` and ``B`` is zero.
    """
    p = as_propensities(p)
    check_dims(y, p)
    ydense = y.to_dense().astype(np.float64)
    v = r.variant
    if r.normalized:
        if v is Variant.VANILLA:
            a = vanilla_T(y)
        elif v is Variant.UNBIASED:
            a = normalized_T(p, y, cap=r.cap)
        else:
            a = t_tilde(p, y, full_denominator=r.full_denominator)
        b = 1.0 - a
    elif v is Variant.VANILLA:
        a, b = ydense, 1.0 - ydense
    elif v is Variant.UNBIASED or not r.is_ova:
        # PAL: the upper bound is the unbiased loss itself
        a = ydense / p.p
        b = 1.0 - a
    else:
        a = ydense * (2.0 / p.p - 1.0)
        b = 1.0 - ydense
    if not r.is_ova:
        b = np.zeros_like(a)
    return a, b


def loss_from_weights(r: Reduction, a: np.ndarray, b: np.ndarray, scores) -> np.ndarray:
    """Loss for one example (1-d inputs) or a batch (2-d inputs, one value per row)."""
    if r.is_ova:
        base = r.binary_loss
        s = base.check_domain(scores)
        return np.sum(a * base.pos(s) + b * base.neg(s), axis=-1)
    s = np.asarray(scores, dtype=np.float64)
    return np.sum(a * r.multiclass_loss.values(s), axis=-1)


def grad_from_weights(r: Reduction, a: np.ndarray, b: np.ndarray, scores) -> np.ndarray:
    """Gradient of :func:`loss_from_weights` with respect to the scores."""
    if r.is_ova:
        base = r.binary_loss
        s = base.check_domain(scores)
        return a * base.dpos(s) + b * base.dneg(s)
    s = np.asarray(scores, dtype=np.float64)
    return r.multiclass_loss.weighted_grad(a, s)


def reduction_loss(r: Reduction, p: PropensityLike, y: SparseLabels, y_hat) -> float:
    a, b = label_weights(r, p, y)
    return float(loss_from_weights(r, a, b, y_hat))


def reduction_gradient(r: Reduction, p: PropensityLike, y: SparseLabels, y_hat) -> np.ndarray:
    a, b = label_weights(r, p, y)
    return grad_from_weights(r, a, b, y_hat)


def batch_label_weights(r: Reduction, p: PropensityLike, labels: Sequence[SparseLabels]):
    """Stack :func:`label_weights` for many examples into ``(n, l)`` arrays."""
    p = as_propensities(p)
    n, l = len(labels), len(p)
    a = np.zeros((n, l))
    b = np.zeros((n, l))
    for row, y in enumerate(labels):
        a[row], b[row] = label_weights(r, p, y)
    return a, b


# --- recall ---------------------------------------------------------------------


def recall(y: SparseLabels, prediction: SparseLabels) -> float:
    """Fraction of the positives in ``y`` that were predicted; 0 for an empty ``y``."""
    if not y.indices:
        return 0.0
    hits = len(set(y.indices).intersection(prediction.indices))
    return hits / len(y)


def ps_recall(
    p: PropensityLike, y: SparseLabels, prediction: SparseLabels, cap: Optional[int] = DEFAULT_CAP
) -> float:
    """Propensity-scored per-example recall.

    Splits the observed labels into hits ``S`` and misses ``T`` and groups the
    subset sum by how many elements of each it contains, so only elementary
    symmetric polynomials of ``p - 1`` over ``S`` and ``T`` are needed.
    """
    p = as_propensities(p)
    check_dims(y, p)
    _check_cap(y, cap)
    if not y.indices:
        return 0.0
    pred = set(prediction.indices)
    hits = [i for i in y.indices if i in pred]
    if not hits:
        return 0.0
    misses = [i for i in y.indices if i not in pred]
    e_s = elementary_symmetric(p.p[hits] - 1.0)
    e_t = elementary_symmetric(p.p[misses] - 1.0)
    ns, nt = len(hits), len(misses)
    terms = [
        s / (u + s) * e_s[ns - s] * e_t[nt - u]
        for s in range(1, ns + 1)
        for u in range(0, nt + 1)
    ]
    return math.fsum(terms) / float(np.prod(p.p[list(y.indices)]))


def mask_outcomes(truth: SparseLabels, p: PropensityLike, limit: int = 20):
    """All ``(observed, probability)`` pairs reachable from ``truth`` under the mask model."""
    p = as_propensities(p)
    check_dims(truth, p)
    if len(truth) > limit:
        raise TooManyLabelsError(f"{len(truth)} labels are too many to enumerate (limit {limit})")
    outcomes = [((), 1.0)]
    for i in truth.indices:
        pi = float(p.p[i])
        outcomes = [(s, w * (1.0 - pi)) for s, w in outcomes] + [(s + (i,), w * pi) for s, w in outcomes]
    return [(SparseLabels._trusted(s, truth.num_labels), w) for s, w in outcomes]


def ps_recall_expectation_check(p: PropensityLike, truth: SparseLabels, prediction: SparseLabels) -> float:
    """Exact expectation of :func:`ps_recall` over all masks of ``truth``; equals the clean recall."""
    return math.fsum(w * ps_recall(p, obs, prediction, cap=None) for obs, w in mask_outcomes(truth, p) if w)


# --- pairwise losses ------------------------------------------------------------

PairwiseFns = Mapping[tuple[int, int], Callable[[np.ndarray, np.ndarray], np.ndarray]]


def _pairs(l: int):
    if l < 2:
        raise ParameterError("pairwise losses need at least two labels")
    return np.triu_indices(l, k=1)


def pairwise_loss(g: PairwiseFns, y: SparseLabels, y_hat) -> float:
    """``sum_{i<j} g[y_i, y_j](s_i, s_j)`` on clean labels."""
    s = np.asarray(y_hat, dtype=np.float64)
    ii, jj = _pairs(y.num_labels)
    yd = y.to_dense()
    yi, yj = yd[ii], yd[jj]
    total = []
    for (a, b), fn in g.items():
        sel = (yi == a) & (yj == b)
        if np.any(sel):
            total.append(float(np.sum(fn(s[ii[sel]], s[jj[sel]]))))
    return math.fsum(total)


def pairwise_unbiased(p: PropensityLike, g: PairwiseFns, y: SparseLabels, y_hat) -> float:
    """Unbiased pairwise loss; each label enters linearly, so only ``1/(p_i p_j)`` factors appear."""
    p = as_propensities(p)
    check_dims(y, p)
    s = np.asarray(y_hat, dtype=np.float64)
    ii, jj = _pairs(y.num_labels)
    r = y.to_dense() / p.p
    coef = {1: r, 0: 1.0 - r}
    total = [
        float(np.sum(coef[a][ii] * coef[b][jj] * fn(s[ii], s[jj])))
        for (a, b), fn in g.items()
    ]
    return math.fsum(total)


def _zero(si, sj):
    return np.zeros(np.broadcast(si, sj).shape)


KENDALL_TAU: PairwiseFns = {
    (0, 0): _zero,
    (1, 1): _zero,
    (0, 1): lambda si, sj: (si > sj).astype(np.float64),
    (1, 0): lambda si, sj: (sj > si).astype(np.float64),
}


def kendall_tau_unbiased(p: PropensityLike, y: SparseLabels, y_hat) -> float:
    """Unbiased Kendall-Tau loss in its simplified two-term form."""
    p = as_propensities(p)
    check_dims(y, p)
    s = np.asarray(y_hat, dtype=np.float64)
    ii, jj = _pairs(y.num_labels)
    yd = y.to_dense().astype(np.float64)
    pi, pj, yi, yj = p.p[ii], p.p[jj], yd[ii], yd[jj]
    g01 = KENDALL_TAU[(0, 1)](s[ii], s[jj])
    g10 = KENDALL_TAU[(1, 0)](s[ii], s[jj])
    return float(np.sum(((pi - yi) * yj * g01 + yi * (pj - yj) * g10) / (pi * pj)))
