"""Unbiased and upper-bound loss estimators for multilabel learning with missing labels."""

from importlib.metadata import PackageNotFoundError, version as _version

from .binary import BINARY_LOSSES, BinaryLoss, Variant, binary_upper_bound, binary_variant_loss, ps_operator
from .core import Propensities, SparseLabels, apply_mask, apply_mask_dense
from .errors import (
    DataFormatError,
    DimensionError,
    DivergenceError,
    DomainError,
    ParameterError,
    PSLossError,
    TooManyLabelsError,
    UnsupportedGradientError,
)
from .multilabel import (
    Reduction,
    kendall_tau_unbiased,
    normalized_T,
    pairwise_unbiased,
    ps_recall,
    reduction_gradient,
    reduction_loss,
    t_tilde,
    unbiased_general,
)
from .propensity import JainModelParams, jain_propensity, linear_inverse_propensity

try:
    __version__ = _version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"

__all__ = [
    "BINARY_LOSSES", "BinaryLoss", "DataFormatError", "DimensionError", "DivergenceError", "DomainError",
    "JainModelParams", "ParameterError", "PSLossError", "Propensities", "Reduction", "SparseLabels",
    "TooManyLabelsError", "UnsupportedGradientError", "Variant", "apply_mask", "apply_mask_dense",
    "binary_upper_bound", "binary_variant_loss", "jain_propensity", "kendall_tau_unbiased",
    "linear_inverse_propensity", "normalized_T", "pairwise_unbiased", "ps_operator", "ps_recall",
    "reduction_gradient", "reduction_loss", "t_tilde", "unbiased_general", "__version__",
]
