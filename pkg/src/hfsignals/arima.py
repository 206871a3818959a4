"""ARMA models on log returns: exact likelihood, AIC order choice, forecasts.

Prices enter only through their log returns, so an ARIMA(p, 0, q) on
returns is the price model. The likelihood is the exact Gaussian one,
evaluated by a Kalman filter on the Harvey state-space form

    state   a_{t+1} = T a_t + R e_{t+1},   e ~ N(0, sigma2)
    obs     x_t - mean = a_t[0]

with the state started from its stationary distribution.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.linalg import solve_discrete_lyapunov
from scipy.optimize import minimize

from .backtest import ForecastTable
from .errors import (ConfigError, ConvergenceError, DegenerateSampleError,
                     InsufficientDataError, NumericalError)
from .marketdata import PriceSeries, SplitSpec, log_returns

MAX_ITER = 500
GTOL = 1e-8


@dataclass(frozen=True)
class ArmaModel:
    p: int
    q: int
    ar: tuple
    ma: tuple
    mean: float
    sigma2: float
    loglik: float
    n_obs: int
    include_mean: bool = True
    notes: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.ar) != self.p or len(self.ma) != self.q:
            raise ConfigError("coefficient counts do not match the declared order")
        if not self.sigma2 > 0:
            raise DegenerateSampleError(f"innovation variance must be positive, got {self.sigma2}")

    @property
    def order(self):
        return (self.p, self.q)


def aic(model: ArmaModel) -> float:
    """``-loglik + 2 (p + q + k + 1)`` with ``k`` = 1 when a mean is fitted."""
    k = 1 if model.include_mean else 0
    return -model.loglik + 2.0 * (model.p + model.q + k + 1)


# ----------------------------------------------------------------------
# parameter transforms


def pacf_to_ar(r: np.ndarray) -> np.ndarray:
    """Durbin-Levinson map from partial autocorrelations in (-1, 1) to the
    coefficients of a stationary AR polynomial ``1 - sum phi_j z^j``."""
    phi = np.zeros(0)
    for k, rk in enumerate(r, start=1):
        phi = np.concatenate([phi - rk * phi[::-1], [rk]])
    return phi


def ar_to_pacf(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    r = np.zeros(len(phi))
    cur = phi.copy()
    for k in range(len(phi), 0, -1):
        rk = cur[-1]
        r[k - 1] = rk
        if abs(rk) >= 1:
            raise NumericalError("coefficients are not stationary")
        cur = (cur[:-1] + rk * cur[:-1][::-1]) / (1.0 - rk * rk)
    return r


def is_stationary(phi) -> bool:
    phi = np.asarray(phi, dtype=float)
    if len(phi) == 0:
        return True
    roots = np.roots(np.concatenate([-phi[::-1], [1.0]]))
    return bool(np.all(np.abs(roots) > 1.0 + 1e-8))


def _unpack(u: np.ndarray, p: int, q: int):
    ar = pacf_to_ar(np.tanh(u[:p]))
    ma = -pacf_to_ar(np.tanh(u[p:p + q]))
    return ar, ma


def _pack(ar, ma) -> np.ndarray:
    r_ar = np.clip(ar_to_pacf(ar), -0.999, 0.999)
    r_ma = np.clip(ar_to_pacf(-np.asarray(ma, dtype=float)), -0.999, 0.999)
    return np.arctanh(np.concatenate([r_ar, r_ma]))


# ----------------------------------------------------------------------
# state space and filter


def state_space(ar, ma):
    """Harvey matrices ``(T, RR', P0)`` for unit innovation variance."""
    ar = np.asarray(ar, dtype=float)
    ma = np.asarray(ma, dtype=float)
    m = max(len(ar), len(ma) + 1)
    T = np.zeros((m, m))
    T[: len(ar), 0] = ar
    T[np.arange(m - 1), np.arange(1, m)] = 1.0
    R = np.zeros(m)
    R[0] = 1.0
    R[1: len(ma) + 1] = ma
    RR = np.outer(R, R)
    P0 = solve_discrete_lyapunov(T, RR)
    P0 = 0.5 * (P0 + P0.T)
    return T, RR, P0


@njit(cache=True)
def _arma_filter(x, phi, RR, P0):
    """Innovations of ``x`` under unit variance; returns (v, F, a_next).

    ``phi`` is the first column of the companion transition matrix; the
    rest of the matrix is the shift, so ``T P T'`` costs O(m^2).
    """
    n = x.shape[0]
    m = phi.shape[0]
    a = np.zeros(m)
    P = P0.copy()
    v = np.empty(n)
    F = np.empty(n)
    au = np.empty(m)
    K = np.empty(m)
    Pu = np.empty((m, m))
    TP = np.empty((m, m))
    steady = False
    for t in range(n):
        f = P[0, 0]
        e = x[t] - a[0]
        v[t] = e
        F[t] = f
        if f <= 0.0:
            return v[: t + 1], F[: t + 1], a
        for i in range(m):
            K[i] = P[i, 0] / f
            au[i] = a[i] + K[i] * e
        for i in range(m):
            a[i] = phi[i] * au[0] + (au[i + 1] if i + 1 < m else 0.0)
        if steady:
            continue
        for i in range(m):
            for j in range(m):
                Pu[i, j] = P[i, j] - K[i] * P[0, j]
        for i in range(m):
            for j in range(m):
                TP[i, j] = phi[i] * Pu[0, j] + (Pu[i + 1, j] if i + 1 < m else 0.0)
        # once the covariance recursion reaches its fixed point it stays there
        change = 0.0
        for i in range(m):
            for j in range(m):
                new = TP[i, 0] * phi[j] + (TP[i, j + 1] if j + 1 < m else 0.0) + RR[i, j]
                d = abs(new - P[i, j])
                if d > change:
                    change = d
                P[i, j] = new
        if change <= 1e-15 * P[0, 0]:
            steady = True
    return v, F, a


def _innovations(x, ar, ma):
    T, RR, P0 = state_space(ar, ma)
    phi = np.ascontiguousarray(T[:, 0])
    v, F, a = _arma_filter(np.ascontiguousarray(x, dtype=float), phi, RR, P0)
    if len(v) < len(x) or not np.all(F > 0):
        raise NumericalError("non-positive innovation variance in ARMA filter")
    return v, F, a


def arma_loglik(series, ar, ma, mean: float, sigma2: float) -> float:
    """Exact Gaussian log-likelihood at the given parameters."""
    x = np.asarray(series, dtype=float) - mean
    v, F, _ = _innovations(x, ar, ma)
    s = sigma2 * F
    return float(-0.5 * np.sum(np.log(2 * np.pi * s) + v * v / s))


def _profile(x, ar, ma):
    """Log-likelihood with sigma2 concentrated out, and that sigma2."""
    v, F, _ = _innovations(x, ar, ma)
    n = len(x)
    s2 = float(np.sum(v * v / F) / n)
    if not s2 > 0:
        return -math.inf, 0.0
    ll = -0.5 * n * (math.log(2 * math.pi) + math.log(s2) + 1.0) - 0.5 * float(np.sum(np.log(F)))
    return ll, s2


# ----------------------------------------------------------------------
# estimation


def _lagmat(x: np.ndarray, lags: int, start: int) -> np.ndarray:
    return np.column_stack([x[start - i: len(x) - i] for i in range(1, lags + 1)])


def hannan_rissanen(x: np.ndarray, p: int, q: int):
    """Least-squares starting values from a long-AR residual regression."""
    n = len(x)
    if p == 0 and q == 0:
        return np.zeros(0), np.zeros(0)
    resid = None
    if q > 0:
        m = min(max(p, q) + int(math.ceil(10 * math.log10(n))), n // 4)
        X = _lagmat(x, m, m)
        coef, *_ = np.linalg.lstsq(X, x[m:], rcond=None)
        resid = np.zeros(n)
        resid[m:] = x[m:] - X @ coef
        start = m + q
    else:
        start = p
    cols = []
    if p:
        cols.append(_lagmat(x, p, start))
    if q:
        cols.append(_lagmat(resid, q, start))
    X = np.column_stack(cols)
    coef, *_ = np.linalg.lstsq(X, x[start:], rcond=None)
    return coef[:p], coef[p:]


def _stabilize(coefs, notes, what):
    """Shrink toward zero until stationary (``what`` names the polynomial)."""
    c = np.asarray(coefs, dtype=float)
    probe = c if what == "AR" else -c
    if is_stationary(probe):
        return c
    for _ in range(50):
        c = 0.9 * c
        probe = 0.9 * probe
        if is_stationary(probe):
            notes.append(f"explosive {what} starting values projected into the "
                         "stationary region")
            return c
    notes.append(f"{what} starting values replaced by zeros")
    return np.zeros_like(c)


def fit_arma(series, p: int, q: int, include_mean: bool = True,
             start: ArmaModel | None = None) -> ArmaModel:
    """Maximum-likelihood ARMA(p, q) fit.

    AR and MA coefficients are optimized through partial-autocorrelation
    transforms, so every iterate is stationary and invertible; the
    innovation variance is concentrated out. ``start`` warm-starts the
    optimizer from an earlier fit of the same order.
    """
    x = np.asarray(series, dtype=float)
    n = len(x)
    if p < 0 or q < 0:
        raise ConfigError("orders must be non-negative")
    if n < 10 * (p + q + 1):
        raise InsufficientDataError(f"ARMA({p},{q}) needs >= {10 * (p + q + 1)} points, got {n}")
    if not np.all(np.isfinite(x)):
        raise DegenerateSampleError("series contains non-finite values")
    center = float(x.mean()) if include_mean else 0.0
    scale = float(x.std())
    if include_mean and (scale == 0 or np.ptp(x) == 0):
        raise DegenerateSampleError("zero-variance series")
    if not include_mean and not np.any(x):
        raise DegenerateSampleError("all-zero series without a mean term")
    if scale == 0:
        scale = float(np.sqrt(np.mean(x * x)))
    notes: list[str] = []

    if p == 0 and q == 0:
        ll, s2 = _profile(x - center, np.zeros(0), np.zeros(0))
        return ArmaModel(0, 0, (), (), center, s2, ll, n, include_mean)

    if start is not None and start.order == (p, q):
        ar0, ma0 = np.array(start.ar), np.array(start.ma)
        mean0 = start.mean if include_mean else 0.0
    else:
        ar0, ma0 = hannan_rissanen(x - center, p, q)
        ar0 = _stabilize(ar0, notes, "AR")
        ma0 = _stabilize(ma0, notes, "MA")
        mean0 = center
    theta0 = _pack(ar0, ma0)
    if include_mean:
        theta0 = np.concatenate([theta0, [(mean0 - center) / scale]])

    def unpack(theta):
        ar, ma = _unpack(theta, p, q)
        mu = center + scale * theta[p + q] if include_mean else 0.0
        return ar, ma, mu

    def objective(theta):
        ar, ma, mu = unpack(theta)
        try:
            ll, _ = _profile(x - mu, ar, ma)
        except NumericalError:
            return 1e10
        return -ll / n if math.isfinite(ll) else 1e10

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = minimize(objective, theta0, method="BFGS",
                       options={"maxiter": MAX_ITER, "gtol": GTOL})
    theta = res.x if res.fun <= objective(theta0) else theta0
    ar, ma, mu = unpack(theta)
    ll, s2 = _profile(x - mu, ar, ma)
    model = ArmaModel(p, q, tuple(float(a) for a in ar), tuple(float(b) for b in ma),
                      float(mu), s2, ll, n, include_mean, tuple(notes))
    if res.nit >= MAX_ITER:
        raise ConvergenceError(f"ARMA({p},{q}) did not converge in {MAX_ITER} iterations",
                               best=model)
    return model


def _better(candidate, incumbent, tol=1e-9):
    a_c, a_i = aic(candidate), aic(incumbent)
    if a_c < a_i - tol:
        return True
    if abs(a_c - a_i) <= tol:
        key = lambda m: (m.p + m.q, m.q)
        return key(candidate) < key(incumbent)
    return False


def select_order(series, p_max: int = 5, q_max: int = 5, include_mean: bool = True) -> ArmaModel:
    """Fit every (p, q) in the grid and keep the smallest AIC.

    Ties go to the smaller ``p + q``, then the smaller ``q``.
    """
    if p_max > 6 or q_max > 6:
        raise ConfigError("order grid is limited to 6 in each direction")
    best = None
    errors = []
    degenerate = True
    for p in range(p_max + 1):
        for q in range(q_max + 1):
            try:
                model = fit_arma(series, p, q, include_mean)
            except ConvergenceError as exc:
                model = exc.best
            except (InsufficientDataError, NumericalError) as exc:
                errors.append(f"({p},{q}): {exc}")
                degenerate &= isinstance(exc, DegenerateSampleError)
                continue
            if best is None or _better(model, best):
                best = model
    if best is None and degenerate:
        raise DegenerateSampleError("every ARMA fit failed on degenerate data: "
                                    + "; ".join(errors))
    if best is None:
        raise ConvergenceError("every ARMA fit failed: " + "; ".join(errors))
    return best


# ----------------------------------------------------------------------
# forecasting


def forecast_one(model: ArmaModel, history) -> float:
    """Conditional mean of the next return given ``history``.

    The history is filtered through the model, which reconstructs the
    innovations needed by the MA part.
    """
    h = np.asarray(history, dtype=float)
    if len(h) < max(model.p, model.q, 1):
        raise InsufficientDataError(
            f"ARMA({model.p},{model.q}) forecast needs >= {max(model.p, model.q, 1)} returns")
    if model.p == 0 and model.q == 0:
        return model.mean
    _, _, a = _innovations(h - model.mean, np.array(model.ar), np.array(model.ma))
    return float(model.mean + a[0])


@dataclass(frozen=True)
class OnlineArimaResult:
    table: ForecastTable
    model: ArmaModel | None
    refits: int
    notes: tuple = ()


def online_forecast_prices(series: PriceSeries, split: SplitSpec, refit_every=30,
                           p_max: int = 5, q_max: int = 5) -> OnlineArimaResult:
    """Walk the cross-validation and test windows one minute at a time.

    The order is chosen by AIC on the training returns. Coefficients are
    re-estimated on all returns seen so far every ``refit_every`` minutes
    (``None`` or ``math.inf`` never refits) and the model is re-filtered on
    the full history at every step. Forecasts are emitted for test minutes;
    the cross-validation minutes only advance the walk.
    """
    prices = series.values
    n = len(prices)
    split.check(n)
    rets = log_returns(series).values
    first = n - split.test_len - split.cv_len
    if first < 2:
        raise InsufficientDataError("training window too short for log returns")
    emit_from = n - split.test_len
    notes = []

    def fit(upto, start=None):
        hist = rets[:upto]
        try:
            if start is None:
                return select_order(hist, p_max, q_max)
            return fit_arma(hist, start.p, start.q, start.include_mean, start=start)
        except DegenerateSampleError:
            notes.append(f"degenerate returns before minute {upto + 1}; constant-mean forecast")
            return None
        except ConvergenceError as exc:
            if exc.best is None:
                raise
            notes.append(str(exc))
            return exc.best

    model = fit(first - 1)
    refits = 0
    stamps, today, fc, tmw = [], [], [], []
    never = refit_every is None or refit_every == math.inf
    for step, t in enumerate(range(first, n)):
        if step and not never and step % int(refit_every) == 0:
            model = fit(t - 1, model) if model is not None else fit(t - 1)
            refits += 1
        hist = rets[: t - 1]
        if model is None:
            xhat = float(hist.mean()) if len(hist) else 0.0
        else:
            xhat = forecast_one(model, hist)
        if t >= emit_from:
            stamps.append(series.timestamps[t - 1])
            today.append(prices[t - 1])
            fc.append(prices[t - 1] * math.exp(xhat))
            tmw.append(prices[t])
    return OnlineArimaResult(ForecastTable(tuple(stamps), today, fc, tmw), model, refits,
                             tuple(notes))
