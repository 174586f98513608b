"""Sparse multilabel datasets: XMC repository text format, tf-idf, splitting.

Text format::

    num_examples num_features num_labels
    l1,l2,... f1:v1 f2:v2 ...

one line per example, 0-based indices, label field may be empty.

Binary cache (little-endian)::

    magic   4 bytes  b"PSXD"
    version u32      1
    n, d, l u64 x3
    nnz_x, nnz_y u64 x2
    x_indptr   int64[n + 1]
    x_indices  int64[nnz_x]
    x_data     float64[nnz_x]
    y_indptr   int64[n + 1]
    y_indices  int64[nnz_y]
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .core import Seed, SparseLabels, make_rng
from .errors import DataFormatError, ParameterError

CACHE_MAGIC = b"PSXD"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sI5Q")


@dataclass(frozen=True, eq=False)
class SparseDataset:
    """Feature matrix ``(n, d)`` and binary label matrix ``(n, l)``, both CSR."""

    features: sp.csr_matrix
    label_matrix: sp.csr_matrix

    def __post_init__(self):
        x = sp.csr_matrix(self.features, dtype=np.float64)
        y = sp.csr_matrix(self.label_matrix, dtype=np.int8)
        x.sort_indices()
        y.sort_indices()
        if x.shape[0] != y.shape[0]:
            raise ParameterError(f"{x.shape[0]} feature rows but {y.shape[0]} label rows")
        if not np.all(np.isfinite(x.data)):
            raise ParameterError("feature values must be finite")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "label_matrix", y)

    @property
    def num_examples(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_labels(self) -> int:
        return self.label_matrix.shape[1]

    def labels(self, i: int) -> SparseLabels:
        y = self.label_matrix
        row = y.indices[y.indptr[i] : y.indptr[i + 1]]
        return SparseLabels._trusted(tuple(int(j) for j in row), self.num_labels)

    def label_sets(self) -> list[SparseLabels]:
        return [self.labels(i) for i in range(self.num_examples)]

    def dense_labels(self) -> np.ndarray:
        return self.label_matrix.toarray()

    def label_counts(self) -> np.ndarray:
        return np.asarray(self.label_matrix.sum(axis=0)).reshape(-1)

    def subset(self, rows) -> "SparseDataset":
        rows = np.asarray(rows)
        return SparseDataset(self.features[rows], self.label_matrix[rows])

    def with_labels(self, label_matrix) -> "SparseDataset":
        return SparseDataset(self.features, sp.csr_matrix(label_matrix))


def _csr_from_rows(rows: list[list[int]], values: Optional[list[list[float]]], ncols: int) -> sp.csr_matrix:
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(r) for r in rows])
    indices = np.fromiter((i for r in rows for i in r), dtype=np.int64, count=int(indptr[-1]))
    if values is None:
        data = np.ones(indices.shape[0], dtype=np.int8)
    else:
        data = np.fromiter((v for r in values for v in r), dtype=np.float64, count=int(indptr[-1]))
    return sp.csr_matrix((data, indices, indptr), shape=(len(rows), ncols))


def load_xmc(path) -> SparseDataset:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise DataFormatError("header must be 'num_examples num_features num_labels'", 1)
        try:
            n, d, l = (int(v) for v in header)
        except ValueError:
            raise DataFormatError(f"non-integer header {header}", 1) from None
        label_rows, feat_rows, val_rows = [], [], []
        for lineno, raw in enumerate(fh, start=2):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if line[0].isspace():
                label_field, rest = "", line.split()
            else:
                parts = line.split()
                if ":" in parts[0]:
                    label_field, rest = "", parts
                else:
                    label_field, rest = parts[0], parts[1:]
            try:
                labels = sorted({int(t) for t in label_field.split(",") if t})
                feats, vals = [], []
                for tok in rest:
                    f, v = tok.split(":")
                    feats.append(int(f))
                    vals.append(float(v))
            except ValueError:
                raise DataFormatError(f"cannot parse {line!r}", lineno) from None
            if labels and (labels[0] < 0 or labels[-1] >= l):
                raise DataFormatError(f"label index out of range [0, {l})", lineno)
            if feats and (min(feats) < 0 or max(feats) >= d):
                raise DataFormatError(f"feature index out of range [0, {d})", lineno)
            if len(set(feats)) != len(feats):
                raise DataFormatError("duplicate feature index", lineno)
            if not all(math.isfinite(v) for v in vals):
                raise DataFormatError("non-finite feature value", lineno)
            order = np.argsort(feats)
            label_rows.append(labels)
            feat_rows.append([feats[i] for i in order])
            val_rows.append([vals[i] for i in order])
    if len(label_rows) != n:
        raise DataFormatError(f"header declares {n} examples, file has {len(label_rows)}")
    return SparseDataset(_csr_from_rows(feat_rows, val_rows, d), _csr_from_rows(label_rows, None, l))


def write_xmc(path, ds: SparseDataset) -> None:
    x, y = ds.features, ds.label_matrix
    lines = [f"{ds.num_examples} {ds.num_features} {ds.num_labels}\n"]
    for i in range(ds.num_examples):
        labels = ",".join(str(j) for j in y.indices[y.indptr[i] : y.indptr[i + 1]])
        lo, hi = x.indptr[i], x.indptr[i + 1]
        feats = " ".join(f"{f}:{v:.17g}" for f, v in zip(x.indices[lo:hi], x.data[lo:hi]))
        lines.append(f"{labels} {feats}".rstrip() + "\n")
    Path(path).write_text("".join(lines))


def save_cache(path, ds: SparseDataset) -> None:
    x, y = ds.features, ds.label_matrix
    with open(path, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, ds.num_examples, ds.num_features,
                                    ds.num_labels, x.nnz, y.nnz))
        for arr, dtype in ((x.indptr, "<i8"), (x.indices, "<i8"), (x.data, "<f8"),
                           (y.indptr, "<i8"), (y.indices, "<i8")):
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def load_cache(path) -> SparseDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _CACHE_HEADER.size:
        raise DataFormatError("truncated dataset cache")
    magic, version, n, d, l, nnz_x, nnz_y = _CACHE_HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC or version != CACHE_VERSION:
        raise DataFormatError(f"not a dataset cache (magic {magic!r}, version {version})")
    offset = _CACHE_HEADER.size
    arrays = []
    for count, dtype in ((n + 1, "<i8"), (nnz_x, "<i8"), (nnz_x, "<f8"), (n + 1, "<i8"), (nnz_y, "<i8")):
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
        offset += arr.nbytes
        arrays.append(arr.copy())
    x = sp.csr_matrix((arrays[2], arrays[1], arrays[0]), shape=(n, d))
    y = sp.csr_matrix((np.ones(nnz_y, dtype=np.int8), arrays[4], arrays[3]), shape=(n, l))
    return SparseDataset(x, y)


def tfidf(ds: SparseDataset, smooth: bool = False) -> SparseDataset:
    """tf = raw value, idf = ln(N / df); rows L2-normalized afterwards.

    With ``smooth`` the idf is ``ln(N / df) + 1``. Rows that end up all-zero
    stay zero.
    """
    x = ds.features.copy()
    if np.any(x.data < 0):
        raise ParameterError("tf-idf needs non-negative feature values")
    n = x.shape[0]
    df = np.bincount(x.indices, minlength=x.shape[1])
    with np.errstate(divide="ignore"):
        idf = np.log(n / np.maximum(df, 1))
    if smooth:
        idf = idf + 1.0
    x.data = x.data * idf[x.indices]
    x.eliminate_zeros()
    norms = np.sqrt(np.asarray(x.multiply(x).sum(axis=1)).reshape(-1))
    scale = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    x = sp.diags(scale) @ x
    return SparseDataset(sp.csr_matrix(x), ds.label_matrix)


def split(ds: SparseDataset, val_fraction: float, seed: Seed = None) -> tuple[SparseDataset, SparseDataset]:
    """Random disjoint split; the validation part gets ``floor(N * val_fraction)`` examples."""
    if not 0.0 < val_fraction < 1.0:
        raise ParameterError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = ds.num_examples
    n_val = int(math.floor(n * val_fraction + 1e-9))
    if n_val == 0 or n_val == n:
        raise ParameterError(f"split of {n} examples with fraction {val_fraction} leaves an empty part")
    perm = make_rng(seed).permutation(n)
    val_rows, train_rows = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    return ds.subset(train_rows), ds.subset(val_rows)


def split_indices(n: int, val_fraction: float, seed: Seed = None) -> tuple[np.ndarray, np.ndarray]:
    n_val = int(math.floor(n * val_fraction + 1e-9))
    perm = make_rng(seed).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def label_frequency_order(ds: SparseDataset) -> np.ndarray:
    """Label indices sorted by decreasing frequency, ties by lower index."""
    return np.argsort(-ds.label_counts(), kind="stable")


def top_n_labels(ds: SparseDataset, n: int, order: Optional[np.ndarray] = None) -> SparseDataset:
    """Keep the ``n`` most frequent labels, relabelled by frequency rank.

    ``order`` lets the ranking come from another split (e.g. training data).
    Examples left without labels are kept.
    """
    if n <= 0:
        raise ParameterError(f"n must be positive, got {n}")
    if n > ds.num_labels:
        raise ParameterError(f"cannot keep {n} of {ds.num_labels} labels")
    if order is None:
        order = label_frequency_order(ds)
    keep = np.asarray(order)[:n]
    return SparseDataset(ds.features, ds.label_matrix[:, keep])
