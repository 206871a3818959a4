"""Linear-Gaussian state-space models.

    x_t = Phi x_{t-1} + w_t,   w_t ~ N(0, Q)
    y_t = A x_t + v_t,         v_t ~ N(0, R)
    x_0 ~ N(mu0, Sigma0)

Kalman filter, RTS smoother with lag-one covariances, innovations
likelihood, and the EM iteration for (Phi, Q, R, mu0, Sigma0) with A held
fixed. Time runs 1..n; the filter arrays are indexed 0..n-1.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit

from .backtest import ForecastTable
from .errors import ConfigError, InsufficientDataError, NumericalError
from .marketdata import PriceSeries, SplitSpec

_SYM_TOL = 1e-10
# condition number of the predicted covariance above which the Joseph update is used
JOSEPH_COND = 1e8


def _mat(x, name):
    a = np.atleast_2d(np.asarray(x, dtype=float))
    if a.ndim != 2:
        raise ConfigError(f"{name} must be a matrix")
    return np.ascontiguousarray(a)


def _check_psd(m, name, strict=False):
    if m.shape[0] != m.shape[1]:
        raise ConfigError(f"{name} must be square, got {m.shape}")
    if not np.allclose(m, m.T, atol=_SYM_TOL, rtol=0):
        raise ConfigError(f"{name} must be symmetric")
    eig = np.linalg.eigvalsh(m)
    floor = 0.0 if strict else -1e-8 * max(1.0, float(np.max(np.abs(eig))))
    if strict and not np.all(eig > 0):
        raise ConfigError(f"{name} must be positive definite")
    if np.any(eig < floor):
        raise ConfigError(f"{name} must be positive semidefinite")


@dataclass(frozen=True)
class DlmParams:
    phi: np.ndarray
    q_cov: np.ndarray
    a_obs: np.ndarray
    r_cov: np.ndarray
    mu0: np.ndarray
    sigma0: np.ndarray

    def __post_init__(self):
        for name in ("phi", "q_cov", "a_obs", "r_cov", "sigma0"):
            object.__setattr__(self, name, _mat(getattr(self, name), name))
        object.__setattr__(self, "mu0",
                           np.ascontiguousarray(np.atleast_1d(np.asarray(self.mu0, dtype=float))))
        p = self.phi.shape[0]
        q = self.a_obs.shape[0]
        shapes = {"phi": (p, p), "q_cov": (p, p), "a_obs": (q, p), "r_cov": (q, q),
                  "sigma0": (p, p)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ConfigError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.mu0.shape != (p,):
            raise ConfigError(f"mu0 has shape {self.mu0.shape}, expected ({p},)")
        _check_psd(self.q_cov, "q_cov")
        _check_psd(self.r_cov, "r_cov")
        _check_psd(self.sigma0, "sigma0")

    @property
    def state_dim(self) -> int:
        return self.phi.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.a_obs.shape[0]

    @classmethod
    def scalar(cls, phi, q, r, mu0, sigma0, a=1.0) -> "DlmParams":
        return cls([[phi]], [[q]], [[a]], [[r]], [mu0], [[sigma0]])

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist()
                for k in ("phi", "q_cov", "a_obs", "r_cov", "mu0", "sigma0")}


@dataclass(frozen=True)
class FilterResult:
    x_pred: np.ndarray          # (n, p)  x_t^{t-1}
    p_pred: np.ndarray          # (n, p, p)
    x_filt: np.ndarray          # (n, p)  x_t^t
    p_filt: np.ndarray          # (n, p, p)
    gains: np.ndarray           # (n, p, q)
    innovations: np.ndarray     # (n, q)
    innovation_covs: np.ndarray  # (n, q, q)
    loglik: float

    def __len__(self):
        return self.x_filt.shape[0]


@dataclass(frozen=True)
class SmoothResult:
    x_smooth: np.ndarray   # (n, p)  x_t^n, t = 1..n
    p_smooth: np.ndarray   # (n, p, p)
    p_lag: np.ndarray      # (n, p, p)  P_{t,t-1}^n, t = 1..n
    x0_smooth: np.ndarray  # x_0^n
    p0_smooth: np.ndarray  # P_0^n


@dataclass(frozen=True)
class EmStats:
    f11: np.ndarray
    f10: np.ndarray
    f00: np.ndarray
    n: int


def as_observations(ys, obs_dim=None) -> np.ndarray:
    y = np.asarray(ys, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2:
        raise ConfigError("observations must be a sequence of vectors")
    if obs_dim is not None and y.shape[1] != obs_dim:
        raise ConfigError(f"observations have dimension {y.shape[1]}, model expects {obs_dim}")
    return np.ascontiguousarray(y)


@njit(cache=True)
def _sym(m):
    return 0.5 * (m + m.T)


@njit(cache=True)
def _filter_core(phi, Q, A, R, mu0, S0, Y, joseph_cond):
    n, q = Y.shape
    p = phi.shape[0]
    xp = np.empty((n, p))
    Pp = np.empty((n, p, p))
    xf = np.empty((n, p))
    Pf = np.empty((n, p, p))
    K = np.empty((n, p, q))
    eps = np.empty((n, q))
    S = np.empty((n, q, q))
    eye = np.eye(p)
    x = mu0.copy()
    P = S0.copy()
    ll = 0.0
    for t in range(n):
        xpt = phi @ x
        Ppt = _sym(phi @ P @ phi.T + Q)
        St = _sym(A @ Ppt @ A.T + R)
        det = np.linalg.det(St)
        if not det > 0.0:
            return xp, Pp, xf, Pf, K, eps, S, ll, t
        Si = np.linalg.inv(St)
        Kt = Ppt @ A.T @ Si
        e = Y[t] - A @ xpt
        x = xpt + Kt @ e
        IKA = eye - Kt @ A
        use_joseph = False
        if p > 1:
            ev = np.linalg.eigvalsh(Ppt)
            if ev[0] <= 0.0 or ev[-1] > joseph_cond * ev[0]:
                use_joseph = True
        if use_joseph:
            P = _sym(IKA @ Ppt @ IKA.T + Kt @ R @ Kt.T)
        else:
            P = _sym(IKA @ Ppt)
        xp[t] = xpt
        Pp[t] = Ppt
        xf[t] = x
        Pf[t] = P
        K[t] = Kt
        eps[t] = e
        S[t] = St
        ll += -0.5 * (q * math.log(2.0 * math.pi) + math.log(det) + e @ Si @ e)
    return xp, Pp, xf, Pf, K, eps, S, ll, -1


@njit(cache=True)
def _smooth_core(phi, A, mu0, S0, xp, Pp, xf, Pf, K):
    n, p = xf.shape
    xs = np.empty((n + 1, p))
    Ps = np.empty((n + 1, p, p))
    Plag = np.empty((n + 1, p, p))
    J = np.empty((n, p, p))
    # full-index views: slot 0 holds time 0
    xfa = np.empty((n + 1, p))
    Pfa = np.empty((n + 1, p, p))
    xfa[0] = mu0
    Pfa[0] = S0
    xfa[1:] = xf
    Pfa[1:] = Pf
    xs[n] = xfa[n]
    Ps[n] = Pfa[n]
    for t in range(n, 0, -1):
        Ppt = Pp[t - 1]
        if not np.linalg.det(Ppt) > 0.0:
            return xs, Ps, Plag, t
        Jt = Pfa[t - 1] @ phi.T @ np.linalg.inv(Ppt)
        J[t - 1] = Jt
        xs[t - 1] = xfa[t - 1] + Jt @ (xs[t] - xp[t - 1])
        Ps[t - 1] = _sym(Pfa[t - 1] + Jt @ (Ps[t] - Ppt) @ Jt.T)
    eye = np.eye(p)
    Plag[n] = (eye - K[n - 1] @ A) @ phi @ Pfa[n - 1]
    for t in range(n, 1, -1):
        Plag[t - 1] = (Pfa[t - 1] @ J[t - 2].T
                       + J[t - 1] @ (Plag[t] - phi @ Pfa[t - 1]) @ J[t - 2].T)
    return xs, Ps, Plag, -1


@njit(cache=True)
def _filter_scalar(phi, Q, A, R, mu0, S0, y):
    n = y.shape[0]
    xp = np.empty(n)
    Pp = np.empty(n)
    xf = np.empty(n)
    Pf = np.empty(n)
    K = np.empty(n)
    eps = np.empty(n)
    S = np.empty(n)
    x = mu0
    P = S0
    ll = 0.0
    c = math.log(2.0 * math.pi)
    for t in range(n):
        xpt = phi * x
        Ppt = phi * P * phi + Q
        St = A * Ppt * A + R
        if not St > 0.0:
            return xp, Pp, xf, Pf, K, eps, S, ll, t
        Kt = Ppt * A / St
        e = y[t] - A * xpt
        x = xpt + Kt * e
        P = (1.0 - Kt * A) * Ppt
        xp[t] = xpt
        Pp[t] = Ppt
        xf[t] = x
        Pf[t] = P
        K[t] = Kt
        eps[t] = e
        S[t] = St
        ll += -0.5 * (c + math.log(St) + e * e / St)
    return xp, Pp, xf, Pf, K, eps, S, ll, -1


@njit(cache=True)
def _smooth_scalar(phi, A, mu0, S0, xp, Pp, xf, Pf, K):
    n = xf.shape[0]
    xs = np.empty(n + 1)
    Ps = np.empty(n + 1)
    Plag = np.empty(n + 1)
    J = np.empty(n)
    xs[n] = xf[n - 1]
    Ps[n] = Pf[n - 1]
    for t in range(n, 0, -1):
        xprev = mu0 if t == 1 else xf[t - 2]
        Pprev = S0 if t == 1 else Pf[t - 2]
        if not Pp[t - 1] > 0.0:
            return xs, Ps, Plag, t
        Jt = Pprev * phi / Pp[t - 1]
        J[t - 1] = Jt
        xs[t - 1] = xprev + Jt * (xs[t] - xp[t - 1])
        Ps[t - 1] = Pprev + Jt * (Ps[t] - Pp[t - 1]) * Jt
    Pprev = S0 if n == 1 else Pf[n - 2]
    Plag[n] = (1.0 - K[n - 1] * A) * phi * Pprev
    for t in range(n, 1, -1):
        Pf1 = Pf[t - 2]
        Plag[t - 1] = Pf1 * J[t - 2] + J[t - 1] * (Plag[t] - phi * Pf1) * J[t - 2]
    return xs, Ps, Plag, -1


def _is_scalar(params: DlmParams) -> bool:
    return params.state_dim == 1 and params.obs_dim == 1


def kf_filter(params: DlmParams, ys, general: bool = False) -> FilterResult:
    """Run the Kalman filter and accumulate the innovations log-likelihood.

    Scalar models take a dedicated loop unless ``general`` is set.
    """
    Y = as_observations(ys, params.obs_dim)
    if len(Y) < 1:
        raise InsufficientDataError("filter needs at least one observation")
    if not np.all(np.isfinite(Y)):
        raise NumericalError("observations contain non-finite values")
    if _is_scalar(params) and not general:
        out = _filter_scalar(params.phi[0, 0], params.q_cov[0, 0], params.a_obs[0, 0],
                             params.r_cov[0, 0], params.mu0[0], params.sigma0[0, 0], Y[:, 0])
        xp, Pp, xf, Pf, K, eps, S, ll, bad = out
        xp, xf, eps = xp[:, None], xf[:, None], eps[:, None]
        Pp, Pf, K, S = (a[:, None, None] for a in (Pp, Pf, K, S))
    else:
        xp, Pp, xf, Pf, K, eps, S, ll, bad = _filter_core(
            params.phi, params.q_cov, params.a_obs, params.r_cov, params.mu0, params.sigma0,
            Y, JOSEPH_COND)
    if bad >= 0:
        raise NumericalError(f"singular innovation covariance at t={bad + 1}", step=bad + 1)
    return FilterResult(xp, Pp, xf, Pf, K, eps, S, float(ll))


def loglik(params: DlmParams, ys) -> float:
    return kf_filter(params, ys).loglik


def kf_smooth(params: DlmParams, filt: FilterResult, general: bool = False) -> SmoothResult:
    """Rauch-Tung-Striebel smoother plus lag-one covariances ``P_{t,t-1}^n``."""
    if _is_scalar(params) and not general:
        xs, Ps, Plag, bad = _smooth_scalar(
            params.phi[0, 0], params.a_obs[0, 0], params.mu0[0], params.sigma0[0, 0],
            filt.x_pred[:, 0], filt.p_pred[:, 0, 0], filt.x_filt[:, 0], filt.p_filt[:, 0, 0],
            filt.gains[:, 0, 0])
        xs, Ps, Plag = xs[:, None], Ps[:, None, None], Plag[:, None, None]
    else:
        xs, Ps, Plag, bad = _smooth_core(params.phi, params.a_obs, params.mu0, params.sigma0,
                                         filt.x_pred, filt.p_pred, filt.x_filt, filt.p_filt,
                                         filt.gains)
    if bad >= 0:
        raise NumericalError(f"singular predicted covariance at t={bad}", step=bad)
    return SmoothResult(xs[1:], Ps[1:], Plag[1:], xs[0], Ps[0])


def em_stats(sm: SmoothResult) -> EmStats:
    xs = sm.x_smooth
    prev = np.vstack([sm.x0_smooth[None, :], xs[:-1]])
    p_prev = np.concatenate([sm.p0_smooth[None], sm.p_smooth[:-1]])
    f11 = xs.T @ xs + sm.p_smooth.sum(axis=0)
    f10 = xs.T @ prev + sm.p_lag.sum(axis=0)
    f00 = prev.T @ prev + p_prev.sum(axis=0)
    return EmStats(0.5 * (f11 + f11.T), f10, 0.5 * (f00 + f00.T), len(xs))


def _inv_ridge(m):
    try:
        cond = np.linalg.cond(m)
    except np.linalg.LinAlgError:
        cond = math.inf
    if not cond < 1e14:
        warnings.warn("singular F00 in EM M-step; ridge-regularized", RuntimeWarning)
        m = m + 1e-10 * max(np.trace(m), 1e-300) * np.eye(len(m))
    return np.linalg.inv(m)


def em_step(params: DlmParams, ys) -> tuple[DlmParams, float]:
    """One EM iteration. The returned log-likelihood is that of ``params``."""
    Y = as_observations(ys, params.obs_dim)
    filt = kf_filter(params, Y)
    sm = kf_smooth(params, filt)
    st = em_stats(sm)
    n = st.n
    A = params.a_obs
    phi = st.f10 @ _inv_ridge(st.f00)
    Q = (st.f11 - phi @ st.f10.T) / n
    resid = Y - sm.x_smooth @ A.T
    R = (resid.T @ resid + np.einsum("ij,tjk,lk->il", A, sm.p_smooth, A)) / n
    new = DlmParams(
        phi=phi,
        q_cov=0.5 * (Q + Q.T),
        a_obs=A,
        r_cov=0.5 * (R + R.T),
        mu0=sm.x0_smooth,
        sigma0=0.5 * (sm.p0_smooth + sm.p0_smooth.T),
    )
    return new, filt.loglik


@dataclass(frozen=True)
class EmFit:
    params: DlmParams
    trace: tuple
    converged: bool

    @property
    def loglik(self) -> float:
        return self.trace[-1]


def em_fit(params0: DlmParams, ys, max_iter: int = 100, tol: float = 1e-6) -> EmFit:
    """Iterate EM until the relative log-likelihood gain drops below ``tol``.

    ``trace`` holds the log-likelihood of every visited parameter set,
    ending with the returned one.
    """
    Y = as_observations(ys, params0.obs_dim)
    params = params0
    trace: list[float] = []
    converged = False
    for _ in range(max_iter):
        new, ll = em_step(params, Y)
        if not math.isfinite(ll):
            raise NumericalError("non-finite log-likelihood in EM", trace=tuple(trace))
        if trace and (ll - trace[-1]) <= tol * abs(trace[-1]):
            trace.append(ll)
            converged = True
            break
        trace.append(ll)
        params = new
    else:
        final = loglik(params, Y)
        if not math.isfinite(final):
            raise NumericalError("non-finite log-likelihood in EM", trace=tuple(trace))
        trace.append(final)
    return EmFit(params, tuple(trace), converged)


def forecast_one(params: DlmParams, x_filt_last, p_filt_last):
    """Mean and covariance of the next observation given the last filtered state."""
    x = np.atleast_1d(np.asarray(x_filt_last, dtype=float))
    P = np.atleast_2d(np.asarray(p_filt_last, dtype=float))
    A, phi = params.a_obs, params.phi
    mean = A @ phi @ x
    var = A @ (phi @ P @ phi.T + params.q_cov) @ A.T + params.r_cov
    return mean, var


def local_level_init(prices) -> DlmParams:
    """Starting values for the scalar price model.

    Variances are floored so a constant price path still gives a
    non-singular model.
    """
    y = np.asarray(prices, dtype=float)
    if len(y) < 2:
        raise InsufficientDataError("local-level initialization needs two prices")
    dv = float(np.var(np.diff(y)))
    floor = 1e-10 * max(1.0, float(np.mean(y)) ** 2)
    dv = max(dv, floor)
    return DlmParams.scalar(phi=1.0, q=0.1 * dv, r=0.9 * dv, mu0=y[0],
                           sigma0=float(np.var(y)))


@dataclass(frozen=True)
class EmConfig:
    max_iter: int = 100
    tol: float = 1e-6
    refit_every: int | None = None


@dataclass(frozen=True)
class OnlineKalmanResult:
    table: ForecastTable
    params: DlmParams
    trace: tuple
    refits: int = 0


def online_forecast_prices(series: PriceSeries, split: SplitSpec,
                           em_config: EmConfig = EmConfig()) -> OnlineKalmanResult:
    """Fit by EM on the training prices, then filter forward minute by minute.

    The forecast for minute ``t`` is the filter's prediction of ``y_t``
    made from prices up to ``t - 1``. Cross-validation minutes advance the
    filter without emitting. With ``refit_every`` set, EM is re-run
    (warm-started) on every price seen so far at that cadence.
    """
    y = np.asarray(series.values, dtype=float)
    n = len(y)
    split.check(n)
    first = n - split.test_len - split.cv_len
    emit_from = n - split.test_len
    fit = em_fit(local_level_init(y[:first]), y[:first], em_config.max_iter, em_config.tol)
    params = fit.params
    trace = fit.trace
    cadence = em_config.refit_every
    refits = 0

    forecasts = np.empty(n)
    if not cadence:
        filt = kf_filter(params, y[: n - 1])
        # x_pred[t] is the state predicted for y[t] from y[:t]
        forecasts[: n - 1] = (filt.x_pred @ params.a_obs.T)[:, 0]
        forecasts[n - 1] = forecast_one(params, filt.x_filt[-1], filt.p_filt[-1])[0][0]
    else:
        for seg_start in range(first, n, cadence):
            if seg_start > first:
                refit = em_fit(params, y[:seg_start], em_config.max_iter, em_config.tol)
                params, trace = refit.params, trace + refit.trace
                refits += 1
            seg_end = min(seg_start + cadence, n)
            filt = kf_filter(params, y[: seg_end - 1])
            for t in range(seg_start, seg_end):
                forecasts[t] = forecast_one(params, filt.x_filt[t - 1], filt.p_filt[t - 1])[0][0]
    rows = range(emit_from, n)
    table = ForecastTable(
        timestamps=tuple(series.timestamps[t - 1] for t in rows),
        today=[y[t - 1] for t in rows],
        forecast=[forecasts[t] for t in rows],
        tmw=[y[t] for t in rows],
    )
    return OnlineKalmanResult(table, params, tuple(trace), refits)
