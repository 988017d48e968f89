"""B-spline and Fourier basis systems.

A :class:`BasisSystem` describes a family of K basis functions on an
interval; :func:`eval_basis` turns it into the n x K design matrix used
by the smoothing model. B-splines are clamped with equally spaced
interior knots and evaluated through the de Boor recursion (scipy's
implementation); Fourier bases are ordered (constant, sin 1w, cos 1w,
sin 2w, ...) and normalized to unit L2 norm over one period.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline

from .errors import ConfigurationError, DomainError

__all__ = [
    "BasisSystem",
    "BasisMatrix",
    "make_bspline_basis",
    "make_fourier_basis",
    "eval_basis",
]


@dataclass(frozen=True)
class BasisSystem:
    """A family of K basis functions on a closed interval.

    kind is "bspline" or "fourier". For B-splines, ``degree`` and the
    clamped ``knots`` vector (length K + degree + 1) are set; for
    Fourier, ``period`` is set.
    """

    kind: str
    K: int
    domain: tuple[float, float]
    degree: int | None = None
    knots: np.ndarray | None = field(default=None, repr=False)
    period: float | None = None

    def __post_init__(self):
        a, b = self.domain
        if self.K < 1:
            raise ConfigurationError(f"need at least one basis function, got K={self.K}")
        if not (b - a > 0):
            raise ConfigurationError(f"degenerate domain [{a}, {b}]")
        if self.kind == "bspline":
            if self.degree is None or self.degree < 1:
                raise ConfigurationError("bspline basis needs degree >= 1")
            if self.knots is None or len(self.knots) != self.K + self.degree + 1:
                raise ConfigurationError("bspline knot vector must have K + degree + 1 entries")
            if np.any(np.diff(self.knots) < 0):
                raise ConfigurationError("knot vector must be nondecreasing")
        elif self.kind == "fourier":
            if self.period is None or not self.period > 0:
                raise ConfigurationError("fourier basis needs period > 0")
        else:
            raise ConfigurationError(f"unknown basis kind {self.kind!r}")


@dataclass(frozen=True)
class BasisMatrix:
    """Evaluation of a basis system: values[j, k] = B_k(points[j])."""

    values: np.ndarray
    points: np.ndarray


def make_bspline_basis(K, degree, domain):
    """Clamped B-spline basis with K - degree - 1 equally spaced interior knots.

    Raises ConfigurationError when K < degree + 1 (no valid clamped
    knot vector exists).
    """
    if K < degree + 1:
        raise ConfigurationError(
            f"K={K} too small for degree {degree}; need K >= degree + 1"
        )
    a, b = float(domain[0]), float(domain[1])
    n_interior = K - degree - 1
    interior = np.linspace(a, b, n_interior + 2)[1:-1]
    knots = np.concatenate([np.full(degree + 1, a), interior, np.full(degree + 1, b)])
    return BasisSystem(kind="bspline", K=K, domain=(a, b), degree=degree, knots=knots)


def make_fourier_basis(K, period):
    """Fourier basis (constant, sin w, cos w, sin 2w, ...), unit L2 norm per period."""
    if not period > 0:
        raise ConfigurationError(f"period must be positive, got {period}")
    return BasisSystem(kind="fourier", K=K, domain=(0.0, float(period)), period=float(period))


def eval_basis(basis, points):
    """Evaluate all basis functions at the given points.

    Returns a BasisMatrix whose values are n x K. B-spline evaluation
    requires every point inside the basis domain (the right endpoint is
    handled as the limit from the left, so the last basis equals one
    there); Fourier bases accept any real point.
    """
    pts = np.ascontiguousarray(points, dtype=float)
    if pts.ndim != 1:
        pts = pts.ravel()
    if basis.kind == "bspline":
        a, b = basis.domain
        if pts.size and (pts.min() < a or pts.max() > b):
            bad = pts[(pts < a) | (pts > b)][0]
            raise DomainError(f"point {bad} outside basis domain [{a}, {b}]")
        values = BSpline.design_matrix(pts, basis.knots, basis.degree).toarray()
    else:
        omega = 2.0 * np.pi / basis.period
        values = np.empty((pts.size, basis.K))
        values[:, 0] = 1.0 / np.sqrt(basis.period)
        amp = np.sqrt(2.0 / basis.period)
        for k in range(1, basis.K):
            freq = (k + 1) // 2
            phase = freq * omega * pts
            values[:, k] = amp * (np.sin(phase) if k % 2 == 1 else np.cos(phase))
    return BasisMatrix(values=values, points=pts)
