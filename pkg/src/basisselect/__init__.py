"""Sparse basis-function selection for functional data with correlated errors.

The package fits noisy curves as sparse linear combinations of B-spline
or Fourier basis functions. A spike-and-slab prior on the coefficients
drives the selection; inference runs through a variational EM algorithm
that also estimates the exponential decay of the within-curve error
correlation, with a Gibbs sampler available as a baseline for the
independence case.
"""

__version__ = "0.1.0"

from .basis import BasisMatrix, BasisSystem, eval_basis, make_bspline_basis, make_fourier_basis
from .data import Curve, CurveSet, ingest_csv
from .errors import (
    BasisSelectError,
    ConfigurationError,
    DataError,
    DegeneracyError,
    DomainError,
    NumericError,
    ParseError,
    ShapeError,
)
from .estimators import FitReport, adjusted_r2, coefficient_estimates, credible_band, mean_curve
from .oukernel import IdentityKernel, OUKernel, ou_corr_matrix, ou_logdet, ou_solve
from .vem import InitSpec, Moments, PriorConfig, VariationalState, compute_elbo, fit, optimize_w

__all__ = [
    "__version__",
    "BasisMatrix",
    "BasisSystem",
    "eval_basis",
    "make_bspline_basis",
    "make_fourier_basis",
    "Curve",
    "CurveSet",
    "ingest_csv",
    "BasisSelectError",
    "ConfigurationError",
    "DataError",
    "DegeneracyError",
    "DomainError",
    "NumericError",
    "ParseError",
    "ShapeError",
    "FitReport",
    "adjusted_r2",
    "coefficient_estimates",
    "credible_band",
    "mean_curve",
    "IdentityKernel",
    "OUKernel",
    "ou_corr_matrix",
    "ou_logdet",
    "ou_solve",
    "InitSpec",
    "Moments",
    "PriorConfig",
    "VariationalState",
    "compute_elbo",
    "fit",
    "optimize_w",
]
