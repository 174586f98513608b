"""Propensity models and the propensity TSV format."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Propensities
from .errors import DataFormatError, ParameterError


@dataclass(frozen=True)
class JainModelParams:
    """Constants of the empirical frequency-based propensity model.

    ``n`` is the number of examples in the dataset the label counts come from.
    """

    a: float
    b: float
    n: int

    def __post_init__(self):
        if not self.a > 0:
            raise ParameterError(f"a must be > 0, got {self.a}")
        if not self.b >= 0:
            raise ParameterError(f"b must be >= 0, got {self.b}")
        if self.n < 3:
            raise ParameterError(f"dataset size n must be >= 3 so that log(n) > 1, got {self.n}")

    @property
    def c(self) -> float:
        return (math.log(self.n) - 1.0) * (self.b + 1.0) ** self.a


def jain_propensity(params: JainModelParams, label_counts: Sequence[float]) -> Propensities:
    """``p_j = 1 / (1 + c * exp(-a * log(n_j + b)))`` with natural logarithms."""
    counts = np.asarray(label_counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ParameterError("label counts must be non-negative")
    shifted = counts + params.b
    if np.any(shifted <= 0):
        raise ParameterError(
            "n_j + b must be positive; labels with zero count need b > 0 "
            f"(first offending label {int(np.argmax(shifted <= 0))})"
        )
    return Propensities(1.0 / (1.0 + params.c * np.exp(-params.a * np.log(shifted))))


def linear_inverse_propensity(num_labels: int, top: float, bottom: float) -> Propensities:
    """Inverse propensity rising linearly from ``top`` (rank 0) to ``bottom`` (last rank).

    Labels are assumed to be indexed by frequency rank, most frequent first.
    """
    if num_labels < 2:
        raise ParameterError(f"num_labels must be >= 2, got {num_labels}")
    if not 1.0 <= top <= bottom:
        raise ParameterError(f"need 1 <= top <= bottom, got top={top}, bottom={bottom}")
    ranks = np.arange(num_labels, dtype=np.float64)
    inv = top + ranks * (bottom - top) / (num_labels - 1)
    return Propensities(1.0 / inv)


def inverse_propensity_weights(p: Propensities) -> np.ndarray:
    return p.inverse


def write_propensities(path, p: Propensities) -> None:
    lines = [f"{j}\t{float(v):.17g}\n" for j, v in enumerate(p.p)]
    Path(path).write_text("".join(lines))


def read_propensities(path, num_labels: int | None = None) -> Propensities:
    """Read ``label_index<TAB>propensity`` lines. Every index in ``[0, l)`` must appear once."""
    values: dict[int, float] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DataFormatError("expected 'label_index<TAB>propensity'", lineno)
            try:
                j, v = int(parts[0]), float(parts[1])
            except ValueError as exc:
                raise DataFormatError(str(exc), lineno) from None
            if j < 0 or j in values:
                raise DataFormatError(f"invalid or duplicate label index {j}", lineno)
            values[j] = v
    size = num_labels if num_labels is not None else (max(values) + 1 if values else 0)
    if sorted(values) != list(range(size)):
        raise DataFormatError(f"propensity file must list every label in [0, {size}) exactly once")
    return Propensities(np.array([values[j] for j in range(size)]))
