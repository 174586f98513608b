"""Binary base losses, propensity scoring, the convex upper bound and their gradients.

All functions broadcast over numpy arrays in ``p``, ``y`` and ``y_hat``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, ParameterError, UnsupportedGradientError

ArrayFn = Callable[[np.ndarray], np.ndarray]


class Variant(str, Enum):
    VANILLA = "vanilla"
    UNBIASED = "unbiased"
    UPPER_BOUND = "upper_bound"


@dataclass(frozen=True)
class BinaryLoss:
    """A binary loss split as ``f(y, s) = y * pos(s) + (1 - y) * neg(s)``.

    ``probability_scores`` marks losses defined on the open unit interval
    (scores are probabilities); the rest take unconstrained margins.
    """

    name: str
    pos: ArrayFn
    neg: ArrayFn
    dpos: Optional[ArrayFn] = None
    dneg: Optional[ArrayFn] = None
    probability_scores: bool = False

    @property
    def differentiable(self) -> bool:
        return self.dpos is not None

    def check_domain(self, y_hat) -> np.ndarray:
        s = np.asarray(y_hat, dtype=np.float64)
        if not np.all(np.isfinite(s)):
            raise DomainError(f"{self.name}: scores must be finite")
        if self.probability_scores and (np.any(s <= 0.0) or np.any(s >= 1.0)):
            raise DomainError(f"{self.name}: scores must lie strictly inside (0, 1)")
        return s

    def value_pos(self, y_hat):
        return self.pos(self.check_domain(y_hat))

    def value_neg(self, y_hat):
        return self.neg(self.check_domain(y_hat))

    def __call__(self, y, y_hat):
        s = self.check_domain(y_hat)
        return np.where(_check_labels(y) == 1, self.pos(s), self.neg(s))


def _sq_hinge_pos(s):
    return np.maximum(0.0, 1.0 - s) ** 2


def _sq_hinge_neg(s):
    return np.maximum(0.0, 1.0 + s) ** 2


SQUARED_ERROR = BinaryLoss(
    "squared_error",
    pos=lambda s: (1.0 - s) ** 2,
    neg=lambda s: s**2,
    dpos=lambda s: -2.0 * (1.0 - s),
    dneg=lambda s: 2.0 * s,
)
BCE = BinaryLoss(
    "bce",
    pos=lambda s: -np.log(s),
    neg=lambda s: -np.log1p(-s),
    dpos=lambda s: -1.0 / s,
    dneg=lambda s: 1.0 / (1.0 - s),
    probability_scores=True,
)
SQUARED_HINGE = BinaryLoss(
    "squared_hinge",
    pos=_sq_hinge_pos,
    neg=_sq_hinge_neg,
    dpos=lambda s: -2.0 * np.maximum(0.0, 1.0 - s),
    dneg=lambda s: 2.0 * np.maximum(0.0, 1.0 + s),
)
ZERO_ONE = BinaryLoss(
    "zero_one",
    pos=lambda s: (s <= 0.0).astype(np.float64),
    neg=lambda s: (s > 0.0).astype(np.float64),
)

BINARY_LOSSES = {loss.name: loss for loss in (SQUARED_ERROR, BCE, SQUARED_HINGE, ZERO_ONE)}


def get_binary_loss(name: str | BinaryLoss) -> BinaryLoss:
    if isinstance(name, BinaryLoss):
        return name
    try:
        return BINARY_LOSSES[name]
    except KeyError:
        raise ParameterError(f"unknown binary loss {name!r}; choose from {sorted(BINARY_LOSSES)}") from None


def check_propensity(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(~(p > 0.0)) or np.any(p > 1.0):
        raise ParameterError("propensity must lie in (0, 1]")
    return p


def _check_labels(y) -> np.ndarray:
    y = np.asarray(y)
    if np.any((y != 0) & (y != 1)):
        raise ParameterError("binary labels must be 0 or 1")
    return y


def ps_operator(base, p, y, y_hat):
    """Propensity-scored version of ``base`` evaluated at observed label ``y``.

    For a positive observation the value is ``(pos + (p - 1) * neg) / p``; a
    negative observation is scored by ``neg`` unchanged. Its expectation under
    the missing-label model equals the clean loss.
    """
    base = get_binary_loss(base)
    p = check_propensity(p)
    y = _check_labels(y)
    s = base.check_domain(y_hat)
    fp, fn = base.pos(s), base.neg(s)
    return np.where(y == 1, (fp + (p - 1.0) * fn) / p, fn)


def ps_gradient(base, p, y, y_hat):
    base = get_binary_loss(base)
    if not base.differentiable:
        raise UnsupportedGradientError(f"{base.name} has no gradient")
    p = check_propensity(p)
    y = _check_labels(y)
    s = base.check_domain(y_hat)
    gp, gn = base.dpos(s), base.dneg(s)
    return np.where(y == 1, (gp + (p - 1.0) * gn) / p, gn)


def binary_upper_bound(base, p, y, y_hat):
    """Convex surrogate of the propensity-scored 0-1 loss: ``y (2/p - 1) pos + (1 - y) neg``.

    The constant offset of the scored 0-1 loss is dropped, so values are only
    comparable to other upper-bound values.
    """
    base = get_binary_loss(base)
    p = check_propensity(p)
    y = _check_labels(y)
    s = base.check_domain(y_hat)
    return np.where(y == 1, (2.0 / p - 1.0) * base.pos(s), base.neg(s))


def binary_upper_bound_gradient(base, p, y, y_hat):
    base = get_binary_loss(base)
    if not base.differentiable:
        raise UnsupportedGradientError(f"{base.name} has no gradient")
    p = check_propensity(p)
    y = _check_labels(y)
    s = base.check_domain(y_hat)
    return np.where(y == 1, (2.0 / p - 1.0) * base.dpos(s), base.dneg(s))


def binary_variant_loss(base, variant, p, y, y_hat):
    variant = Variant(variant)
    if variant is Variant.VANILLA:
        return get_binary_loss(base)(y, y_hat)
    if variant is Variant.UNBIASED:
        return ps_operator(base, p, y, y_hat)
    return binary_upper_bound(base, p, y, y_hat)


def binary_variant_gradient(base, variant, p, y, y_hat):
    variant = Variant(variant)
    if variant is Variant.VANILLA:
        return ps_gradient(base, 1.0, y, y_hat)
    if variant is Variant.UNBIASED:
        return ps_gradient(base, p, y, y_hat)
    return binary_upper_bound_gradient(base, p, y, y_hat)


def variance_ratio_estimate(base, p: float, q: float, y_hat: float) -> tuple[float, float]:
    """Variance of the propensity-scored loss at a fixed prediction.

    ``q`` is the marginal probability of an *observed* positive, ``E[Y]``.
    Returns ``(exact, approx)``: ``exact`` is the variance of the two-point
    distribution taking the positive-branch value with probability ``q``;
    ``approx`` is ``q (1 - q) (pos - neg)^2 / p^2``.

    Because ``Y`` and ``1 - Y`` are perfectly anti-correlated the two agree up
    to rounding. Relative to the clean loss (see :func:`clean_variance`) the
    variance grows like ``1 / p``.
    """
    base = get_binary_loss(base)
    p = float(check_propensity(p))
    if not 0.0 < q < 1.0:
        raise ParameterError(f"q must lie in (0, 1), got {q}")
    s = base.check_domain(y_hat)
    fp, fn = float(base.pos(s)), float(base.neg(s))
    hi = (fp + (p - 1.0) * fn) / p
    lo = fn
    exact = q * (1.0 - q) * (hi - lo) ** 2
    approx = q * (1.0 - q) * (fp - fn) ** 2 / p**2
    return exact, approx


def clean_variance(base, q_star: float, y_hat: float) -> float:
    """Variance of the clean loss when ``Y* ~ Bernoulli(q_star)``."""
    base = get_binary_loss(base)
    s = base.check_domain(y_hat)
    return q_star * (1.0 - q_star) * float(base.pos(s) - base.neg(s)) ** 2
