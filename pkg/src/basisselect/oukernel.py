"""Exponentially decaying (Ornstein-Uhlenbeck) correlation kernels.

The correlation matrix Psi(t, s) = exp(-w |t - s|) over sorted points is
Markov, so its inverse is tridiagonal and both Psi^{-1} x and log|Psi|
have exact O(n) forms in terms of the neighbour correlations
rho_j = exp(-w (t_j - t_{j-1})). Every solve in the variational updates
goes through that representation; a dense Cholesky path is kept as a
cross-checkable fallback.
"""

from functools import cached_property

import numpy as np
import scipy.linalg

from .errors import DegeneracyError, DomainError, NumericError, ShapeError

__all__ = ["W_MIN", "W_MAX", "OUKernel", "IdentityKernel", "ou_corr_matrix", "ou_solve", "ou_logdet"]

# Decay parameter is clamped to this range everywhere: the upper end is
# the effectively-uncorrelated limit, the lower end keeps Psi away from
# the singular all-ones matrix.
W_MIN = 1e-3
W_MAX = 1e6


def _check_points(points):
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 1:
        raise ShapeError("evaluation points must be one-dimensional")
    if pts.size and not np.all(np.isfinite(pts)):
        raise DomainError("evaluation points must be finite")
    return pts


def ou_corr_matrix(points, w):
    """Dense correlation matrix with entries exp(-w |t_j - t_l|).

    Rows are built as running products of the neighbour correlations, so
    the Markov identity Psi(t1,t3) = Psi(t1,t2) Psi(t2,t3) holds exactly
    for adjacent triples. Duplicate points are rejected: they make Psi
    singular and callers are expected to jitter beforehand.
    """
    if not w > 0:
        raise DomainError(f"decay parameter must be positive, got {w}")
    pts = _check_points(points)
    order = np.argsort(pts, kind="stable")
    sorted_pts = pts[order]
    n = pts.size
    if n > 1 and np.any(np.diff(sorted_pts) == 0):
        raise DegeneracyError("duplicate evaluation points make the OU matrix singular")
    rho = np.exp(-w * np.diff(sorted_pts))
    psi = np.eye(n)
    for j in range(n - 1):
        psi[j, j + 1:] = np.cumprod(rho[j:])
        psi[j + 1:, j] = psi[j, j + 1:]
    # undo the sort so the matrix matches the caller's point order
    inv = np.empty(n, dtype=int)
    inv[order] = np.arange(n)
    return psi[np.ix_(inv, inv)]


class OUKernel:
    """Correlation kernel exp(-w |t - s|) over a fixed set of points.

    Immutable after construction; the tridiagonal representation of
    Psi^{-1} and the log-determinant are cached. Points may be passed in
    any order; solves are returned in the original order.
    """

    def __init__(self, points, w):
        if not w > 0:
            raise DomainError(f"decay parameter must be positive, got {w}")
        pts = _check_points(points)
        self.points = pts
        self.w = float(w)
        self._order = np.argsort(pts, kind="stable")
        self._rank = np.empty(pts.size, dtype=int)
        self._rank[self._order] = np.arange(pts.size)
        sorted_pts = pts[self._order]
        gaps = np.diff(sorted_pts)
        if np.any(gaps == 0):
            raise DegeneracyError("duplicate evaluation points make the OU matrix singular")
        self._sorted = sorted_pts
        # 1 - rho^2 via expm1 keeps precision when w * gap is tiny
        self._rho = np.exp(-self.w * gaps)
        self._one_minus_rho2 = -np.expm1(-2.0 * self.w * gaps)

    @property
    def n(self):
        return self.points.size

    @cached_property
    def _tridiag(self):
        """(diag, offdiag) of Psi^{-1} in sorted-point order.

        Follows from the factorisation of the Markov density: the
        coefficient pattern is 1/(1-rho_j^2) on the last point of each
        neighbour pair, rho_j^2/(1-rho_j^2) on the first, plus 1 on the
        very first point.
        """
        n = self.n
        if n == 1:
            return np.ones(1), np.zeros(0)
        r2 = self._rho**2
        inv1m = 1.0 / self._one_minus_rho2
        diag = np.zeros(n)
        diag[0] = 1.0
        diag[:-1] += r2 * inv1m
        diag[1:] += inv1m
        off = -self._rho * inv1m
        return diag, off

    @cached_property
    def logdet(self):
        """log det Psi = sum log(1 - rho_j^2), exact and O(n)."""
        if self.n <= 1:
            return 0.0
        return float(np.sum(np.log(self._one_minus_rho2)))

    def solve(self, rhs):
        """Return Psi^{-1} rhs by multiplying with the tridiagonal inverse."""
        x = np.asarray(rhs, dtype=float)
        if x.shape[0] != self.n:
            raise ShapeError(f"rhs has {x.shape[0]} rows, kernel has {self.n} points")
        squeeze = x.ndim == 1
        if squeeze:
            x = x[:, None]
        xs = x[self._order]
        diag, off = self._tridiag
        out = diag[:, None] * xs
        if self.n > 1:
            out[:-1] += off[:, None] * xs[1:]
            out[1:] += off[:, None] * xs[:-1]
        out = out[self._rank]
        return out[:, 0] if squeeze else out

    def matrix(self):
        """Dense Psi in the caller's point order."""
        return ou_corr_matrix(self.points, self.w)

    def solve_dense(self, rhs):
        """Dense Cholesky fallback; must agree with solve()."""
        x = np.asarray(rhs, dtype=float)
        try:
            cho = scipy.linalg.cho_factor(self.matrix(), lower=True)
        except scipy.linalg.LinAlgError as exc:
            raise NumericError(f"OU matrix not positive definite: {exc}") from exc
        return scipy.linalg.cho_solve(cho, x)

    def quad_form(self, vec):
        """vec' Psi^{-1} vec."""
        return float(vec @ self.solve(vec))

    def trace_solve_tridiag(self, vdiag, vsup):
        """trace(Psi^{-1} V) given V's main diagonal and first superdiagonal.

        Valid because Psi^{-1} is tridiagonal; vdiag/vsup must be in
        sorted-point order.
        """
        diag, off = self._tridiag
        total = float(diag @ vdiag)
        if self.n > 1:
            total += 2.0 * float(off @ vsup)
        return total


class IdentityKernel:
    """Independence case: Psi = I. Same interface as OUKernel."""

    def __init__(self, points):
        self.points = _check_points(points)
        self.w = None

    @property
    def n(self):
        return self.points.size

    @property
    def logdet(self):
        return 0.0

    def solve(self, rhs):
        x = np.asarray(rhs, dtype=float)
        if x.shape[0] != self.n:
            raise ShapeError(f"rhs has {x.shape[0]} rows, kernel has {self.n} points")
        return x.copy()

    def matrix(self):
        return np.eye(self.n)

    def solve_dense(self, rhs):
        return np.asarray(rhs, dtype=float).copy()

    def quad_form(self, vec):
        return float(vec @ vec)

    def trace_solve_tridiag(self, vdiag, vsup):
        return float(np.sum(vdiag))


def ou_solve(kernel, rhs, method="tridiagonal"):
    """Psi^{-1} rhs through either the O(n p) tridiagonal path or dense Cholesky."""
    if method == "tridiagonal":
        return kernel.solve(rhs)
    if method == "cholesky":
        return kernel.solve_dense(rhs)
    raise ValueError(f"unknown method {method!r}")


def ou_logdet(kernel):
    """log det Psi from the closed form over neighbour correlations."""
    return kernel.logdet
