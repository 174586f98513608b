"""Label sets, propensities and the missing-label sampler."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence, Union

import numpy as np

from .errors import DimensionError, ParameterError

Seed = Union[None, int, np.random.Generator, np.random.SeedSequence]


def make_rng(seed: Seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class SparseLabels:
    """Positive labels of one example as a sorted tuple of 0-based indices."""

    indices: tuple[int, ...]
    num_labels: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        if self.num_labels < 0:
            raise ParameterError(f"num_labels must be >= 0, got {self.num_labels}")
        prev = -1
        for i in idx:
            if i <= prev:
                raise ParameterError(f"label indices must be strictly increasing: {idx}")
            prev = i
        if idx and (idx[0] < 0 or idx[-1] >= self.num_labels):
            raise ParameterError(f"label indices {idx} out of range [0, {self.num_labels})")

    @classmethod
    def _trusted(cls, indices: tuple[int, ...], num_labels: int) -> "SparseLabels":
        # skips validation; callers guarantee sorted in-range python ints
        obj = object.__new__(cls)
        object.__setattr__(obj, "indices", indices)
        object.__setattr__(obj, "num_labels", num_labels)
        return obj

    @classmethod
    def from_iterable(cls, indices: Iterable[int], num_labels: int) -> "SparseLabels":
        return cls(tuple(sorted(set(int(i) for i in indices))), num_labels)

    @classmethod
    def from_dense(cls, vector: Sequence[float]) -> "SparseLabels":
        v = np.asarray(vector)
        return cls(tuple(int(i) for i in np.flatnonzero(v)), int(v.shape[0]))

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self) -> Iterator[int]:
        return iter(self.indices)

    def __contains__(self, item: object) -> bool:
        return item in self.indices

    def to_dense(self) -> np.ndarray:
        return indicator_vector(self)


@dataclass(frozen=True, eq=False)
class Propensities:
    """Per-label probability that a true positive is observed, each in (0, 1]."""

    p: np.ndarray

    def __post_init__(self):
        arr = np.array(self.p, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(arr)) or np.any(arr <= 0.0) or np.any(arr > 1.0):
            bad = arr[~((arr > 0.0) & (arr <= 1.0))]
            raise ParameterError(f"propensities must lie in (0, 1]; offending values {bad[:5]}")
        arr.setflags(write=False)
        object.__setattr__(self, "p", arr)

    def __len__(self) -> int:
        return self.p.shape[0]

    def __getitem__(self, item):
        return self.p[item]

    def __eq__(self, other):
        return isinstance(other, Propensities) and np.array_equal(self.p, other.p)

    @property
    def inverse(self) -> np.ndarray:
        return 1.0 / self.p

    @classmethod
    def uniform(cls, value: float, num_labels: int) -> "Propensities":
        return cls(np.full(num_labels, float(value)))


PropensityLike = Union[Propensities, Sequence[float], np.ndarray]


def as_propensities(p: PropensityLike) -> Propensities:
    return p if isinstance(p, Propensities) else Propensities(np.asarray(p, dtype=np.float64))


def check_dims(labels: SparseLabels, p: Propensities) -> None:
    if labels.num_labels != len(p):
        raise DimensionError(
            f"label space has {labels.num_labels} labels but {len(p)} propensities were given"
        )


def indicator_vector(labels: SparseLabels) -> np.ndarray:
    out = np.zeros(labels.num_labels, dtype=np.int8)
    out[list(labels.indices)] = 1
    return out


def apply_mask(truth: SparseLabels, p: PropensityLike, rng: Seed = None) -> SparseLabels:
    """Drop each positive label independently, keeping label ``i`` with probability ``p[i]``.

    One uniform draw is consumed per positive label, so results are reproducible
    for a fixed generator state.
    """
    p = as_propensities(p)
    check_dims(truth, p)
    rng = make_rng(rng)
    if not truth.indices:
        return truth
    idx = np.asarray(truth.indices)
    keep = rng.random(idx.shape[0]) < p.p[idx]
    return SparseLabels._trusted(tuple(int(i) for i in idx[keep]), truth.num_labels)


def apply_mask_dense(truth: np.ndarray, p: PropensityLike, rng: Seed = None) -> np.ndarray:
    """Masked copy of a dense ``(n, l)`` 0/1 label matrix."""
    p = as_propensities(p)
    truth = np.asarray(truth)
    if truth.shape[-1] != len(p):
        raise DimensionError(f"label matrix has {truth.shape[-1]} columns, propensities {len(p)}")
    rng = make_rng(rng)
    keep = rng.random(truth.shape) < p.p
    return (truth.astype(bool) & keep).astype(truth.dtype)
