"""Point estimates, credible bands, and fit statistics from a fitted state.

Coefficient estimates are the plug-in products of the posterior-mode
indicator (inclusion probability >= 0.5, ties included) and the
variational coefficient mean. Bands are pointwise empirical quantile
bands over draws from the variational distribution.
"""

import math
from dataclasses import dataclass

import numpy as np

from .basis import eval_basis
from .errors import DomainError, NumericError

__all__ = [
    "FitReport",
    "coefficient_estimates",
    "credible_band",
    "band_from_samples",
    "mean_curve",
    "adjusted_r2",
    "make_report",
]


@dataclass
class FitReport:
    """Everything a caller needs after a fit.

    selected holds per-curve 1-based indices of the basis functions kept
    in the representation. w_hat is None for independence fits;
    adjusted_r2 is the per-curve average (None when undefined, e.g. a
    constant curve).
    """

    xi_hat: np.ndarray
    xi_bar: np.ndarray
    selected: list[list[int]]
    mean_curves: list[np.ndarray]
    band_lower: list[np.ndarray]
    band_upper: list[np.ndarray]
    w_hat: float | None
    sigma2_hat: float
    adjusted_r2: float | None
    elbo_final: float
    iterations: int
    wall_time: float
    improper_priors: bool = False

    def to_dict(self):
        return {
            "xi_hat": self.xi_hat.tolist(),
            "xi_bar": self.xi_bar.tolist(),
            "selected": self.selected,
            "w_hat": self.w_hat,
            "sigma2_hat": self.sigma2_hat,
            "adjusted_r2": self.adjusted_r2,
            "elbo_final": self.elbo_final,
            "iterations": self.iterations,
            "wall_time": self.wall_time,
            "improper_priors": self.improper_priors,
        }


def coefficient_estimates(state):
    """(xi_hat, xi_bar, selected): plug-in estimates and the kept index sets.

    An indicator is switched on when its inclusion probability is at
    least one half (a tie keeps the basis function). selected uses
    1-based indices.
    """
    zhat = (state.p >= 0.5).astype(float)
    xi_hat = state.beta_mean * zhat
    xi_bar = xi_hat.mean(axis=0)
    selected = [sorted(int(k) + 1 for k in np.flatnonzero(zhat[i])) for i in range(state.m)]
    return xi_hat, xi_bar, selected


def band_from_samples(samples, level=0.95):
    """Pointwise equal-tailed band from an (n_draws, n_points) array.

    Uses the order-statistic rule: with tail mass alpha and N draws, the
    lower bound is the ceil(alpha N)-th smallest value and the upper
    bound the ceil(alpha N)-th largest, so 200 draws at the 95% level
    give the 5th and 196th order statistics.
    """
    n_draws = samples.shape[0]
    alpha = (1.0 - level) / 2.0
    j = max(int(math.ceil(alpha * n_draws)), 1)
    if 2 * j > n_draws:
        raise DomainError(f"too few draws ({n_draws}) for level {level}")
    ordered = np.sort(samples, axis=0)
    return ordered[j - 1], ordered[n_draws - j]


def credible_band(state, basis, points, level=0.95, draws=200, seed=0):
    """Per-curve pointwise credible bands from the variational distribution.

    For each draw, indicators are sampled from their Bernoulli factors
    and coefficients from the Gaussian factor; the resulting curves are
    evaluated at ``points`` (one shared vector, or a list with one
    vector per curve) and summarised by the order-statistic band.
    Deterministic given the seed. Returns (lower_list, upper_list).
    """
    m, K = state.m, state.K
    if isinstance(points, (list, tuple)):
        point_sets = [np.asarray(p, dtype=float) for p in points]
    else:
        point_sets = [np.asarray(points, dtype=float)] * m
    base = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    streams = base.spawn(m)
    lowers, uppers = [], []
    for i in range(m):
        B = eval_basis(basis, point_sets[i]).values
        rng = np.random.default_rng(streams[i])
        z = (rng.random((draws, K)) < state.p[i]).astype(float)
        try:
            chol = np.linalg.cholesky(state.beta_cov[i])
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"coefficient covariance for curve {i} not factorizable: {exc}") from exc
        beta = state.beta_mean[i] + rng.standard_normal((draws, K)) @ chol.T
        curves = (z * beta) @ B.T
        lo, hi = band_from_samples(curves, level=level)
        lowers.append(lo)
        uppers.append(hi)
    return lowers, uppers


def mean_curve(state, basis, points):
    """Fitted mean curves: g_i(t) = sum_k xi_hat[i, k] B_k(t); one row per curve."""
    xi_hat, _, _ = coefficient_estimates(state)
    B = eval_basis(basis, np.asarray(points, dtype=float)).values
    return xi_hat @ B.T


def adjusted_r2(y, fitted, p_effective):
    """Coefficient of determination penalised for the active basis count."""
    y = np.asarray(y, dtype=float)
    fitted = np.asarray(fitted, dtype=float)
    n = y.shape[0]
    if n <= p_effective + 1:
        raise DomainError(f"adjusted R^2 undefined: n={n} <= p_effective+1={p_effective + 1}")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise DomainError("adjusted R^2 undefined for a constant response")
    ss_res = float(np.sum((y - fitted) ** 2))
    r2 = 1.0 - ss_res / ss_tot
    return 1.0 - (1.0 - r2) * (n - 1) / (n - p_effective - 1)


def make_report(state, data, basis, *, band_draws=200, band_level=0.95, seed=0,
                wall_time=0.0, improper_priors=False):
    """Assemble the FitReport for a fitted state on its data."""
    xi_hat, xi_bar, selected = coefficient_estimates(state)
    points = [c.t for c in data.curves]
    mean_curves = [xi_hat[i] @ eval_basis(basis, points[i]).values.T for i in range(data.m)]
    lowers, uppers = credible_band(
        state, basis, points, level=band_level, draws=band_draws, seed=seed
    )
    r2_values = []
    for i, c in enumerate(data.curves):
        try:
            r2_values.append(adjusted_r2(c.y, mean_curves[i], len(selected[i])))
        except DomainError:
            r2_values.append(None)
    valid = [v for v in r2_values if v is not None]
    return FitReport(
        xi_hat=xi_hat,
        xi_bar=xi_bar,
        selected=selected,
        mean_curves=mean_curves,
        band_lower=lowers,
        band_upper=uppers,
        w_hat=state.w,
        sigma2_hat=state.sigma2_hat,
        adjusted_r2=float(np.mean(valid)) if valid else None,
        elbo_final=state.elbo_final,
        iterations=state.iterations,
        wall_time=wall_time,
        improper_priors=improper_priors,
    )
