"""Brute-force reference computations for validating the estimators.

Nothing here is used by the production code paths. Everything is deliberately
naive so that it can serve as an independent check.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import Propensities, PropensityLike, SparseLabels, as_propensities, check_dims
from .errors import DomainError, ParameterError, TooManyLabelsError

MAX_ENUMERABLE = 20
MAX_MATRIX_LABELS = 12


@dataclass(frozen=True)
class MaskDistribution:
    truth: SparseLabels
    p: Propensities

    def __post_init__(self):
        object.__setattr__(self, "p", as_propensities(self.p))
        check_dims(self.truth, self.p)
        if len(self.truth) > MAX_ENUMERABLE:
            raise TooManyLabelsError(f"cannot enumerate masks of {len(self.truth)} labels")

    def outcomes(self):
        """Yield ``(kept, probability)`` for every keep/drop pattern of the true positives."""
        idx = self.truth.indices
        for bits in itertools.product((0, 1), repeat=len(idx)):
            prob = 1.0
            kept = []
            for i, b in zip(idx, bits):
                pi = float(self.p.p[i])
                if b:
                    prob *= pi
                    kept.append(i)
                else:
                    prob *= 1.0 - pi
            yield SparseLabels(tuple(kept), self.truth.num_labels), prob


def exact_expectation(f: Callable[[SparseLabels, np.ndarray], float], dist: MaskDistribution, y_hat) -> float:
    return math.fsum(prob * float(f(kept, y_hat)) for kept, prob in dist.outcomes())


def _state_bits(l: int) -> np.ndarray:
    states = np.arange(2**l)
    return (states[:, None] >> np.arange(l)[None, :]) & 1


def corruption_matrix(p: PropensityLike) -> np.ndarray:
    """``T[observed, true]``: probability of observing label state ``observed`` given ``true``.

    States are bitmasks with bit ``i`` for label ``i``.
    """
    p = as_propensities(p)
    l = len(p)
    if l > MAX_MATRIX_LABELS:
        raise ParameterError(f"corruption matrix limited to {MAX_MATRIX_LABELS} labels, got {l}")
    bits = _state_bits(l)
    obs = bits[:, None, :]
    true = bits[None, :, :]
    per_label = np.where(
        true == 1,
        np.where(obs == 1, p.p, 1.0 - p.p),
        np.where(obs == 1, 0.0, 1.0),
    )
    return np.prod(per_label, axis=-1)


def corruption_matrix_estimate(
    f_star: Callable[[SparseLabels, np.ndarray], float], p: PropensityLike, y: SparseLabels, y_hat
) -> float:
    """Corruption-corrected loss: solve ``T^t f = f*`` over all label states and read entry ``y``."""
    p = as_propensities(p)
    check_dims(y, p)
    l = len(p)
    t = corruption_matrix(p)
    bits = _state_bits(l)
    f_true = np.array([float(f_star(SparseLabels.from_dense(row), y_hat)) for row in bits])
    f_obs = np.linalg.solve(t.T, f_true)
    state = sum(1 << i for i in y.indices)
    return float(f_obs[state])


def finite_diff_gradient(f: Callable[[np.ndarray], float], y_hat, h: float = 1e-6) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h``."""
    x = np.array(y_hat, dtype=np.float64)
    scalar = x.ndim == 0
    x = x.reshape(-1) if scalar else x
    grad = np.empty_like(x)
    for i in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        try:
            fu, fd = float(f(up.reshape(()) if scalar else up)), float(f(down.reshape(()) if scalar else down))
        except DomainError as exc:
            raise DomainError(f"finite difference stepped outside the domain at {i}: {exc}") from None
        grad[i] = (fu - fd) / (2.0 * h)
    return grad.reshape(()) if scalar else grad
