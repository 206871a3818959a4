"""Augmented Dickey-Fuller test, asymmetric Laplace fit and KS distance."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import DegenerateSampleError, InsufficientDataError, NumericalError

# asymptotic Dickey-Fuller quantiles, regression with constant and no trend
DF_CRITICAL_CONSTANT = {"1%": -3.43, "5%": -2.86, "10%": -2.57}


@dataclass(frozen=True)
class AdfResult:
    statistic: float
    lags_used: int
    nobs: int
    critical_values: dict = field(default_factory=lambda: dict(DF_CRITICAL_CONSTANT))

    @property
    def reject_5pct(self) -> bool:
        return self.statistic < self.critical_values["5%"]

    def to_dict(self):
        return {"statistic": self.statistic, "lags_used": self.lags_used,
                "nobs": self.nobs, "reject_5pct": self.reject_5pct,
                "critical_values": dict(self.critical_values)}


@dataclass(frozen=True)
class SkewLaplaceParams:
    location: float
    scale: float
    asymmetry: float
    loglik: float = float("nan")

    def to_dict(self):
        return {"location": self.location, "scale": self.scale,
                "asymmetry": self.asymmetry, "loglik": self.loglik}


@dataclass(frozen=True)
class KsResult:
    statistic: float
    n: int

    def to_dict(self):
        return {"statistic": self.statistic, "n": self.n}


def default_max_lags(n: int) -> int:
    return int(math.floor(12.0 * (n / 100.0) ** 0.25))


def _adf_design(y: np.ndarray, lags: int, start: int):
    """Regressors [1, y_{t-1}, dy_{t-1}..dy_{t-lags}] for dy_t, t >= start."""
    dy = np.diff(y)
    rows = np.arange(start, len(dy))
    cols = [np.ones(len(rows)), y[rows]]
    for i in range(1, lags + 1):
        cols.append(dy[rows - i])
    return np.column_stack(cols), dy[rows]


def _ols(X: np.ndarray, z: np.ndarray):
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        raise NumericalError("singular ADF design matrix (constant or degenerate series)")
    beta, _, _, _ = np.linalg.lstsq(X, z, rcond=None)
    resid = z - X @ beta
    return beta, resid


def adf_test(series, max_lags: int | None = None) -> AdfResult:
    """ADF regression with a constant and AIC-chosen lag order.

    Candidate lag orders ``0..max_lags`` are compared on a common sample;
    the chosen order is then refitted on every usable observation.
    """
    y = np.asarray(series, dtype=float)
    n = len(y)
    if max_lags is None:
        max_lags = default_max_lags(n)
    if n <= max_lags + 10:
        raise InsufficientDataError(f"ADF with max_lags={max_lags} needs more than "
                                    f"{max_lags + 10} observations, got {n}")
    if np.ptp(y) == 0:
        raise NumericalError("singular ADF design matrix (constant series)")

    best = None
    for lags in range(max_lags + 1):
        X, z = _adf_design(y, lags, max_lags)
        _, resid = _ols(X, z)
        m = len(z)
        aic = m * math.log(resid @ resid / m) + 2 * X.shape[1]
        if best is None or aic < best[0] - 1e-12:
            best = (aic, lags)
    lags = best[1]
    X, z = _adf_design(y, lags, lags)
    beta, resid = _ols(X, z)
    m, k = X.shape
    s2 = resid @ resid / (m - k)
    xtx_inv = np.linalg.inv(X.T @ X)
    se = math.sqrt(s2 * xtx_inv[1, 1])
    if not se > 0:
        raise NumericalError("zero standard error in ADF regression")
    return AdfResult(statistic=float(beta[1] / se), lags_used=lags, nobs=m)


def skew_laplace_logpdf(x, params: SkewLaplaceParams) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    m, s, k = params.location, params.scale, params.asymmetry
    z = (x - m) / s
    tail = np.where(z >= 0, -z * k, z / k)
    return math.log(k / (s * (1.0 + k * k))) + tail


def skew_laplace_loglik(sample, params: SkewLaplaceParams) -> float:
    return float(skew_laplace_logpdf(sample, params).sum())


def skew_laplace_pdf(x, params: SkewLaplaceParams) -> np.ndarray:
    return np.exp(skew_laplace_logpdf(x, params))


def skew_laplace_cdf(x, params: SkewLaplaceParams) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    m, s, k = params.location, params.scale, params.asymmetry
    z = (x - m) / s
    k2 = k * k
    below = k2 / (1.0 + k2) * np.exp(np.minimum(z, 0.0) / k)
    above = 1.0 - np.exp(-np.maximum(z, 0.0) * k) / (1.0 + k2)
    return np.where(z < 0, below, above)


class _Profile:
    """Profile likelihood of the asymmetry with location and scale concentrated out."""

    def __init__(self, sample):
        self.x = np.sort(np.asarray(sample, dtype=float))
        self.n = len(self.x)
        csum = np.concatenate([[0.0], np.cumsum(self.x)])
        idx = np.arange(self.n)
        # sum of (x - x_j)^+ and (x_j - x)^+ with the location at order statistic j
        self.upper = (csum[-1] - csum[idx + 1]) - (self.n - idx - 1) * self.x
        self.lower = idx * self.x - csum[idx]

    def conditional(self, kappa: float):
        g = kappa * self.upper + self.lower / kappa
        j = int(np.argmin(g))
        return self.x[j], g[j] / self.n

    def loglik(self, log_kappa: float) -> float:
        kappa = math.exp(log_kappa)
        _, scale = self.conditional(kappa)
        if scale <= 0:
            return -math.inf
        n = self.n
        return n * (math.log(kappa) - math.log1p(kappa * kappa) - math.log(scale) - 1.0)


def fit_skew_laplace(sample) -> SkewLaplaceParams:
    """Maximum-likelihood asymmetric Laplace fit.

    For a fixed asymmetry the optimal location is an order statistic and the
    optimal scale is closed-form, so only the asymmetry is searched: a coarse
    grid in ``log kappa`` brackets the maximum, golden-section refines it.
    """
    x = np.asarray(sample, dtype=float)
    if len(x) < 10:
        raise InsufficientDataError(f"skew-Laplace fit needs >= 10 points, got {len(x)}")
    if not np.all(np.isfinite(x)):
        raise DegenerateSampleError("sample contains non-finite values")
    if np.ptp(x) == 0:
        raise DegenerateSampleError("zero-variance sample")

    prof = _Profile(x)
    grid = np.linspace(-6.0, 6.0, 121)
    vals = np.array([prof.loglik(g) for g in grid])
    i = int(np.argmax(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    if lo == hi:
        best = lo
    else:
        res = minimize_scalar(lambda u: -prof.loglik(u), bracket=(lo, grid[i], hi),
                              method="golden", tol=1e-12)
        best = res.x if -res.fun >= vals[i] else grid[i]
    kappa = math.exp(best)
    loc, scale = prof.conditional(kappa)
    params = SkewLaplaceParams(float(loc), float(scale), float(kappa))
    return SkewLaplaceParams(params.location, params.scale, params.asymmetry,
                             skew_laplace_loglik(x, params))


def ks_statistic(sample, cdf: Callable) -> KsResult:
    """Two-sided sup distance between the empirical CDF and ``cdf``."""
    x = np.sort(np.asarray(sample, dtype=float))
    n = len(x)
    if n < 1:
        raise InsufficientDataError("KS statistic needs at least one point")
    f = np.asarray(cdf(x), dtype=float)
    i = np.arange(1, n + 1)
    d_plus = np.max(i / n - f)
    d_minus = np.max(f - (i - 1) / n)
    return KsResult(float(min(max(d_plus, d_minus, 0.0), 1.0)), n)


def density_table(sample, params: SkewLaplaceParams, bins: int = 60):
    """Histogram density of ``sample`` beside the fitted density, per bin centre."""
    x = np.asarray(sample, dtype=float)
    counts, edges = np.histogram(x, bins=bins, density=True)
    centres = 0.5 * (edges[:-1] + edges[1:])
    return centres, counts, skew_laplace_pdf(centres, params)
