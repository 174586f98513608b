"""Linear multilabel classifiers trained with Adam under any reduction and variant.

Model checkpoint format (little-endian)::

    magic    4 bytes  b"PSLM"
    version  u32      1
    features u64
    labels   u64
    weights  float64[features * labels]   row-major (feature, label)
    bias     float64[labels]
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .binary import Variant
from .core import PropensityLike, SparseLabels, as_propensities
from .data import SparseDataset
from .errors import DataFormatError, DivergenceError, ParameterError
from .evaluation import subsampled_ps_recall, top_k
from .multilabel import Reduction, batch_label_weights, grad_from_weights, loss_from_weights, recall

log = logging.getLogger(__name__)

MODEL_MAGIC = b"PSLM"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sI2Q")
DIVERGENCE_LIMIT = 1e12


@dataclass
class LinearModel:
    weights: np.ndarray  # (num_features, num_labels)
    bias: np.ndarray  # (num_labels,)

    @property
    def num_features(self) -> int:
        return self.weights.shape[0]

    @property
    def num_labels(self) -> int:
        return self.weights.shape[1]

    def decision_function(self, x) -> np.ndarray:
        return np.asarray(x @ self.weights) + self.bias

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(_MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, self.num_features, self.num_labels))
            fh.write(np.ascontiguousarray(self.weights, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.bias, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "LinearModel":
        raw = Path(path).read_bytes()
        if len(raw) < _MODEL_HEADER.size:
            raise DataFormatError("truncated model file")
        magic, version, d, l = _MODEL_HEADER.unpack_from(raw)
        if magic != MODEL_MAGIC or version != MODEL_VERSION:
            raise DataFormatError(f"not a model file (magic {magic!r}, version {version})")
        expected = _MODEL_HEADER.size + 8 * (d * l + l)
        if len(raw) != expected:
            raise DataFormatError(f"model file has {len(raw)} bytes, expected {expected}")
        w = np.frombuffer(raw, dtype="<f8", count=d * l, offset=_MODEL_HEADER.size).reshape(d, l)
        b = np.frombuffer(raw, dtype="<f8", count=l, offset=_MODEL_HEADER.size + 8 * d * l)
        return cls(w.astype(np.float64), b.astype(np.float64))


@dataclass(frozen=True)
class TrainConfig:
    """Defaults follow the two-phase Adam schedule: 15 epochs at 1e-4, then 5 at 1e-5, batches of 512."""

    loss: Reduction
    l2: float = 0.0
    epochs_phase1: int = 15
    lr_phase1: float = 1e-4
    epochs_phase2: int = 5
    lr_phase2: float = 1e-5
    batch_size: int = 512
    seed: int = 0
    link: str = "auto"
    pretrain_epochs: int = 0

    def __post_init__(self):
        if self.l2 < 0:
            raise ParameterError(f"l2 must be >= 0, got {self.l2}")
        if not (self.lr_phase1 > 0 and self.lr_phase2 > 0):
            raise ParameterError("learning rates must be positive")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if min(self.epochs_phase1, self.epochs_phase2, self.pretrain_epochs) < 0:
            raise ParameterError("epoch counts must be >= 0")
        if self.link not in ("auto", "sigmoid", "identity"):
            raise ParameterError(f"link must be auto, sigmoid or identity, got {self.link!r}")
        if self.link == "sigmoid" and not self.loss.is_ova:
            raise ParameterError("PAL reductions consume raw scores; use link=identity")

    @property
    def resolved_link(self) -> str:
        if self.link != "auto":
            return self.link
        return "sigmoid" if self.loss.is_ova and self.loss.binary_loss.probability_scores else "identity"


class Adam:
    """Adam over a list of arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(q) for q in params]
        self.v = [np.zeros_like(q) for q in params]

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for q, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            q -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def raw_score_loss(r: Reduction, link: str, a: np.ndarray, b: np.ndarray, z: np.ndarray):
    """Per-example losses and ``d loss / d z`` for raw linear scores ``z``.

    BCE behind a sigmoid link is evaluated in logit form
    (``-log sigmoid(z) = softplus(-z)``), which is the same function without
    saturating at 0 or 1.
    """
    if r.is_ova and link == "sigmoid":
        base = r.binary_loss
        if base.name == "bce":
            pos, neg = _softplus(-z), _softplus(z)
            sig = _sigmoid(z)
            return np.sum(a * pos + b * neg, axis=-1), a * (sig - 1.0) + b * sig
        s = _sigmoid(z)
        ds = s * (1.0 - s)
        return loss_from_weights(r, a, b, s), grad_from_weights(r, a, b, s) * ds
    return loss_from_weights(r, a, b, z), grad_from_weights(r, a, b, z)


def init_model(num_features: int, num_labels: int, rng: np.random.Generator) -> LinearModel:
    bound = 1.0 / math.sqrt(num_features)
    return LinearModel(rng.uniform(-bound, bound, size=(num_features, num_labels)), np.zeros(num_labels))


def _describe(r: Reduction) -> str:
    return f"{r.kind}/{r.base}/{r.variant.value}"


def objective_and_grad(model: LinearModel, x, a, b, r: Reduction, link: str, l2: float):
    """Mean loss over rows plus ``l2 * ||W||^2`` and its gradients ``(dW, db)``."""
    z = model.decision_function(x)
    losses, gz = raw_score_loss(r, link, a, b, z)
    n = z.shape[0]
    obj = float(np.sum(losses)) / n + l2 * float(np.sum(model.weights**2))
    gz = gz / n
    gw = np.asarray(x.T @ gz) + 2.0 * l2 * model.weights
    gb = gz.sum(axis=0)
    return obj, gw, gb


def _run_epochs(model, x, a, b, r, link, l2, schedule, rng, history, epoch0=0):
    n = x.shape[0]
    opt = Adam([model.weights, model.bias])
    epoch = epoch0
    for epochs, lr, batch_size in schedule:
        opt.lr = lr
        for _ in range(epochs):
            epoch += 1
            perm = rng.permutation(n)
            total = 0.0
            for bi, start in enumerate(range(0, n, batch_size)):
                rows = perm[start : start + batch_size]
                obj, gw, gb = objective_and_grad(model, x[rows], a[rows], b[rows], r, link, l2)
                if not math.isfinite(obj) or abs(obj) > DIVERGENCE_LIMIT:
                    raise DivergenceError(
                        f"training with {_describe(r)} diverged in epoch {epoch}, batch {bi}: "
                        f"objective {obj:.6g}"
                    )
                opt.step([gw, gb])
                total += obj * rows.shape[0]
            if history is not None:
                history.append({"epoch": epoch, "lr": lr, "objective": total / n})
    return epoch


def train(
    data: SparseDataset,
    p: PropensityLike,
    cfg: TrainConfig,
    history: Optional[list] = None,
    init: Optional[LinearModel] = None,
) -> LinearModel:
    """Fit a linear model on ``data`` (labels as observed) with the configured loss.

    Deterministic for a fixed ``cfg.seed``. With ``pretrain_epochs`` the model
    is first trained with the vanilla variant of the same reduction.
    """
    p = as_propensities(p)
    if len(p) != data.num_labels:
        raise ParameterError(f"{len(p)} propensities for {data.num_labels} labels")
    rng = np.random.default_rng(cfg.seed)
    model = init if init is not None else init_model(data.num_features, data.num_labels, rng)
    model = LinearModel(model.weights.copy(), model.bias.copy())
    x = data.features
    labels = data.label_sets()
    link = cfg.resolved_link
    epoch = 0
    if cfg.pretrain_epochs:
        vr = cfg.loss.with_variant(Variant.VANILLA)
        a, b = batch_label_weights(vr, p, labels)
        epoch = _run_epochs(model, x, a, b, vr, link, cfg.l2,
                            [(cfg.pretrain_epochs, cfg.lr_phase1, cfg.batch_size)], rng, history)
    a, b = batch_label_weights(cfg.loss, p, labels)
    schedule = [(cfg.epochs_phase1, cfg.lr_phase1, cfg.batch_size), (cfg.epochs_phase2, cfg.lr_phase2, cfg.batch_size)]
    _run_epochs(model, x, a, b, cfg.loss, link, cfg.l2, schedule, rng, history, epoch0=epoch)
    log.debug("trained %s l2=%g", _describe(cfg.loss), cfg.l2)
    return model


# --- evaluation of trained models ----------------------------------------------


def mean_loss(model: LinearModel, data: SparseDataset, r: Reduction, p: PropensityLike, link: str) -> float:
    a, b = batch_label_weights(r, p, data.label_sets())
    losses, _ = raw_score_loss(r, link, a, b, model.decision_function(data.features))
    return math.fsum(losses) / data.num_examples


def ranking_metrics(model: LinearModel, data: SparseDataset, ks: Sequence[int],
                    p: Optional[PropensityLike] = None, rng=None) -> dict[str, float]:
    """Mean P@k and R@k, or PSP@k and PSR@k when ``p`` is given."""
    z = model.decision_function(data.features)
    labels = data.label_sets()
    if p is not None:
        p = as_propensities(p)
        rng = np.random.default_rng(rng)
    out = {}
    for k in ks:
        tops = [top_k(row, k) for row in z]
        if p is None:
            prec = [len(set(t.indices).intersection(y.indices)) / k for t, y in zip(tops, labels)]
            rec = [recall(y, t) for y, t in zip(labels, tops)]
        else:
            prec = [math.fsum(1.0 / p.p[i] for i in set(t.indices).intersection(y.indices)) / k
                    for t, y in zip(tops, labels)]
            rec = [subsampled_ps_recall(p, y, t, rng=rng) for y, t in zip(labels, tops)]
        prefix = "" if p is None else "PS"
        out[f"{prefix}P@{k}"] = math.fsum(prec) / len(prec)
        out[f"{prefix}R@{k}"] = math.fsum(rec) / len(rec)
    return out


@dataclass
class ExperimentSplits:
    """Clean and masked versions of train/validation data plus a clean test set.

    Noisy splits share features and example order with their clean partners.
    """

    clean_train: SparseDataset
    noisy_train: SparseDataset
    clean_val: SparseDataset
    noisy_val: SparseDataset
    clean_test: SparseDataset


def noise_pattern_gap(
    model: LinearModel,
    clean_train: SparseDataset,
    noisy_train: SparseDataset,
    clean_test: SparseDataset,
    loss: Reduction,
    p: PropensityLike,
    link: str = "auto",
) -> tuple[float, float]:
    """Split the generalization gap ``R(h) - R_noisy_hat(h)`` into two terms.

    ``finite_sample = test loss - clean training loss`` and
    ``noise_pattern = clean training loss - unbiased loss on noisy training labels``.
    The test loss stands in for the true risk.
    """
    if clean_train.num_examples != noisy_train.num_examples or (clean_train.features != noisy_train.features).nnz:
        raise ParameterError("clean and noisy training splits must cover the same examples")
    if link == "auto":
        link = TrainConfig(loss).resolved_link
    vanilla = loss.with_variant(Variant.VANILLA)
    true_risk = mean_loss(model, clean_test, vanilla, p, link)
    clean_emp = mean_loss(model, clean_train, vanilla, p, link)
    noisy_est = mean_loss(model, noisy_train, loss.with_variant(Variant.UNBIASED), p, link)
    return true_risk - clean_emp, clean_emp - noisy_est


@dataclass
class SweepResult:
    rows: list[dict]
    optimal_l2: float
    selection_split: str
    models: dict = field(default_factory=dict, repr=False)


SWEEP_SPLITS = ("noisy-train", "clean-train", "noisy-val", "clean-val", "clean-test")


def regularization_sweep(
    splits: ExperimentSplits,
    p: PropensityLike,
    base_cfg: TrainConfig,
    l2_grid: Sequence[float],
    train_on: str = "noisy",
    ks: Sequence[int] = (1, 3, 5),
    keep_models: bool = False,
) -> SweepResult:
    """Train one model per ``l2`` and evaluate it on every split.

    Noisy splits are scored with unbiased estimators (unbiased loss, PSP@k,
    PSR@k), clean splits with the plain ones. The optimum is the ``l2`` with
    the lowest validation loss on the data the model was trained from: the
    unbiased loss on noisy validation data when training on noisy labels, the
    plain loss on clean validation data otherwise.
    """
    if not l2_grid:
        raise ParameterError("l2 grid must not be empty")
    if train_on not in ("noisy", "clean"):
        raise ParameterError("train_on must be 'noisy' or 'clean'")
    p = as_propensities(p)
    train_data = splits.noisy_train if train_on == "noisy" else splits.clean_train
    selection = "noisy-val" if train_on == "noisy" else "clean-val"
    link = base_cfg.resolved_link
    unbiased = base_cfg.loss.with_variant(Variant.UNBIASED)
    vanilla = base_cfg.loss.with_variant(Variant.VANILLA)
    eval_sets = {
        "noisy-train": (splits.noisy_train, True),
        "clean-train": (splits.clean_train, False),
        "noisy-val": (splits.noisy_val, True),
        "clean-val": (splits.clean_val, False),
        "clean-test": (splits.clean_test, False),
    }
    rows, models = [], {}
    best = (math.inf, None)
    for l2 in l2_grid:
        cfg = replace(base_cfg, l2=float(l2))
        model = train(train_data, p, cfg)
        if keep_models:
            models[float(l2)] = model
        for name, (ds, noisy) in eval_sets.items():
            loss_val = mean_loss(model, ds, unbiased if noisy else vanilla, p, link)
            metrics = ranking_metrics(model, ds, ks, p if noisy else None, rng=cfg.seed)
            rows.append({"l2": float(l2), "split": name, "loss": loss_val, **metrics})
            if name == selection and loss_val < best[0]:
                best = (loss_val, float(l2))
    return SweepResult(rows=rows, optimal_l2=best[1], selection_split=selection, models=models)
