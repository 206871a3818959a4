"""Technical indicators and the per-minute feature matrix.

Rolling indicators return only their defined values: an indicator with
lookback ``L`` applied to ``m`` prices yields ``m - L`` outputs, the first
of which belongs to input index ``L``. ``build_feature_matrix`` re-aligns
everything on the bar index.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import lfilter

from .errors import ConfigError, DomainError, InsufficientDataError
from .marketdata import MinuteBar


@dataclass(frozen=True)
class IndicatorConfig:
    sma_windows: tuple = (10, 16, 22)
    ema_lambdas: tuple = (0.9, 0.84, 0.78)
    momentum_windows: tuple = (12, 18, 24)
    rsi_windows: tuple = (8, 14, 20)
    bollinger_windows: tuple = (20, 26, 32)
    bollinger_width: float = 2.0
    macd: tuple = (12, 26, 9)
    cci_window: int = 20
    stochastic: tuple = (14, 3)
    chaikin: tuple = (3, 10)
    return_lags: int = 30
    target: str = "close"

    def __post_init__(self):
        counts = (list(self.sma_windows) + list(self.momentum_windows)
                  + list(self.rsi_windows) + list(self.bollinger_windows)
                  + list(self.macd) + [self.cci_window] + list(self.stochastic)
                  + list(self.chaikin))
        if any(int(c) != c or c < 2 for c in counts):
            raise ConfigError(f"indicator windows must be integers >= 2, got {counts}")
        if any(not 0 < lam < 1 for lam in self.ema_lambdas):
            raise ConfigError("EMA decay factors must lie in (0, 1)")
        if not self.bollinger_width > 0:
            raise ConfigError("Bollinger width multiplier must be positive")
        if self.macd[0] >= self.macd[1] or self.chaikin[0] >= self.chaikin[1]:
            raise ConfigError("fast window must be shorter than slow window")
        if self.return_lags < 1:
            raise ConfigError("return_lags must be >= 1")
        if self.target not in ("close", "log_return"):
            raise ConfigError("target must be 'close' or 'log_return'")

    @property
    def max_lookback(self) -> int:
        k, d = self.stochastic
        return max(
            max(self.sma_windows) - 1,
            max(self.momentum_windows),
            max(self.rsi_windows),
            max(self.bollinger_windows) - 1,
            self.cci_window - 1,
            k + d - 2,
            self.return_lags,
            max(self.sma_windows),  # rolling return volatility
        )


@dataclass(frozen=True)
class FeatureMatrix:
    timestamps: tuple
    names: tuple
    values: np.ndarray  # rows x columns
    target: np.ndarray
    warmup: int = 0
    target_kind: str = "close"

    def __len__(self):
        return len(self.target)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    @property
    def columns(self) -> dict:
        return {n: self.values[:, j] for j, n in enumerate(self.names)}

    def rows(self, item: slice) -> "FeatureMatrix":
        return FeatureMatrix(self.timestamps[item], self.names, self.values[item],
                             self.target[item], self.warmup, self.target_kind)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("timestamp",) + self.names + ("target",))
        for ts, row, y in zip(self.timestamps, self.values, self.target):
            stamp = ts.isoformat() if hasattr(ts, "isoformat") else ts
            w.writerow([stamp] + [repr(float(v)) for v in row] + [repr(float(y))])
        return buf.getvalue()


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


def _need(length: int, required: int, what: str):
    if length < required:
        raise InsufficientDataError(f"{what} needs at least {required} values, got {length}")


def _window_mean(win: np.ndarray) -> np.ndarray:
    # centred on the first element so constant windows average exactly
    first = win[:, :1]
    return first[:, 0] + (win - first).mean(axis=1)


def sma(prices, n: int) -> np.ndarray:
    x = _as_array(prices)
    if n < 1:
        raise DomainError("window must be >= 1")
    _need(len(x), n, "sma")
    return _window_mean(sliding_window_view(x, n))


def ema(prices, lam: float) -> np.ndarray:
    """``out[t] = lam * out[t-1] + (1 - lam) * p[t]`` seeded with ``out[0] = p[0]``."""
    if not 0 < lam < 1:
        raise DomainError(f"EMA decay must lie in (0, 1), got {lam}")
    x = _as_array(prices)
    _need(len(x), 1, "ema")
    out, _ = lfilter([1.0 - lam], [1.0, -lam], x[1:], zi=[lam * x[0]])
    return np.concatenate([x[:1], out])


def ema_window(prices, w: int) -> np.ndarray:
    """EMA parameterized by a window length, ``lam = 1 - 2 / (w + 1)``."""
    return ema(prices, 1.0 - 2.0 / (w + 1))


def macd(prices, fast: int = 12, slow: int = 26, signal: int = 9):
    if fast >= slow:
        raise ConfigError(f"MACD fast window {fast} must be < slow window {slow}")
    if min(fast, slow, signal) < 1:
        raise ConfigError("MACD windows must be >= 1")
    line = ema_window(prices, fast) - ema_window(prices, slow)
    sig = ema_window(line, signal)
    return line, sig, line - sig


def momentum(prices, n: int) -> np.ndarray:
    x = _as_array(prices)
    if len(x) <= n:
        raise InsufficientDataError(f"momentum({n}) needs more than {n} values")
    return x[n:] - x[:-n]


def rsi(prices, n: int) -> np.ndarray:
    """Wilder RSI. Output ``k`` belongs to input index ``n + k``.

    Averages are seeded with the simple mean of the first ``n`` moves; a
    window with neither gains nor losses reads 50.
    """
    x = _as_array(prices)
    if len(x) <= n:
        raise InsufficientDataError(f"rsi({n}) needs more than {n} values")
    d = np.diff(x)
    gain = np.where(d > 0, d, 0.0)
    loss = np.where(d < 0, -d, 0.0)

    def wilder(v):
        seed = v[:n].mean()
        rest, _ = lfilter([1.0 / n], [1.0, -(n - 1.0) / n], v[n:], zi=[seed * (n - 1.0) / n])
        return np.concatenate([[seed], rest])

    ag, al = wilder(gain), wilder(loss)
    out = np.full(len(ag), 50.0)
    up = (al == 0) & (ag > 0)
    out[up] = 100.0
    both = (al > 0)
    out[both] = 100.0 - 100.0 / (1.0 + ag[both] / al[both])
    return out


def rolling_std(x, n: int) -> np.ndarray:
    """Population standard deviation over each length-``n`` window."""
    win = sliding_window_view(_as_array(x), n)
    dev = win - _window_mean(win)[:, None]
    return np.sqrt((dev * dev).mean(axis=1))


def bollinger(prices, n: int = 20, s: float = 2.0):
    if n < 2:
        raise DomainError("Bollinger window must be >= 2")
    x = _as_array(prices)
    _need(len(x), n, "bollinger")
    mid = sma(x, n)
    width = s * rolling_std(x, n)
    return mid + width, mid, mid - width


def typical_price(high, low, close) -> np.ndarray:
    return (_as_array(high) + _as_array(low) + _as_array(close)) / 3.0


def cci(high, low, close, n: int = 20) -> np.ndarray:
    if n < 2:
        raise DomainError("CCI window must be >= 2")
    tp = typical_price(high, low, close)
    _need(len(tp), n, "cci")
    win = sliding_window_view(tp, n)
    mean = _window_mean(win)
    mad = np.abs(win - mean[:, None]).mean(axis=1)
    num = tp[n - 1:] - mean
    out = np.zeros_like(num)
    ok = mad > 0
    out[ok] = num[ok] / (0.015 * mad[ok])
    return out


def stochastic(high, low, close, k_window: int = 14, d_window: int = 3):
    """%K and %D, each aligned so element ``j`` belongs to input index
    ``k_window - 1 + j``; %D is shorter by ``d_window - 1``."""
    if k_window < 1 or d_window < 1:
        raise DomainError("stochastic windows must be >= 1")
    h, lo, c = _as_array(high), _as_array(low), _as_array(close)
    _need(len(c), k_window + d_window - 1, "stochastic")
    hh = sliding_window_view(h, k_window).max(axis=1)
    ll = sliding_window_view(lo, k_window).min(axis=1)
    rng = hh - ll
    k = np.full(len(rng), 50.0)
    ok = rng > 0
    k[ok] = 100.0 * ((c[k_window - 1:][ok] - ll[ok]) / rng[ok])
    k = np.clip(k, 0.0, 100.0)
    return k, sma(k, d_window)


def accumulation_distribution(high, low, close, volume) -> np.ndarray:
    h, lo, c, v = map(_as_array, (high, low, close, volume))
    rng = h - lo
    m = np.zeros_like(c)
    ok = rng > 0
    m[ok] = ((c[ok] - lo[ok]) - (h[ok] - c[ok])) / rng[ok]
    return np.cumsum(m * v)


def chaikin(high, low, close, volume, fast: int = 3, slow: int = 10) -> np.ndarray:
    if fast >= slow:
        raise ConfigError(f"Chaikin fast window {fast} must be < slow window {slow}")
    ad = accumulation_distribution(high, low, close, volume)
    return ema_window(ad, fast) - ema_window(ad, slow)


def _pad(values: np.ndarray, total: int) -> np.ndarray:
    out = np.full(total, np.nan)
    out[total - len(values):] = values
    return out


def feature_columns(bars: Sequence[MinuteBar], config: IndicatorConfig = IndicatorConfig()):
    """All feature columns on the bar index, NaN where undefined."""
    n = len(bars)
    o = np.array([b.open for b in bars], dtype=float)
    h = np.array([b.high for b in bars], dtype=float)
    lo = np.array([b.low for b in bars], dtype=float)
    c = np.array([b.close for b in bars], dtype=float)
    v = np.array([b.volume for b in bars], dtype=float)
    ticks = np.array([b.num_ticks for b in bars], dtype=float)

    cols: dict[str, np.ndarray] = {
        "open": o, "high": h, "low": lo, "close": c, "volume": v, "num_ticks": ticks,
        "range": h - lo, "body": c - o,
    }
    for w in config.sma_windows:
        s = _pad(sma(c, w), n)
        cols[f"sma_{w}"] = s
        cols[f"close_minus_sma_{w}"] = c - s
    for lam in config.ema_lambdas:
        e = ema(c, lam)
        cols[f"ema_{lam:g}"] = e
        cols[f"close_minus_ema_{lam:g}"] = c - e
    line, sig, hist = macd(c, *config.macd)
    cols.update(macd=line, macd_signal=sig, macd_hist=hist)
    for w in config.momentum_windows:
        cols[f"momentum_{w}"] = _pad(momentum(c, w), n)
    for w in config.rsi_windows:
        cols[f"rsi_{w}"] = _pad(rsi(c, w), n)
    for w in config.bollinger_windows:
        up, mid, dn = (_pad(a, n) for a in bollinger(c, w, config.bollinger_width))
        cols[f"bb_upper_{w}"] = up
        cols[f"bb_middle_{w}"] = mid
        cols[f"bb_lower_{w}"] = dn
        cols[f"bb_width_{w}"] = up - dn
        pct = np.full(n, 0.5)
        band = up - dn
        ok = band > 0
        pct[ok] = (c[ok] - dn[ok]) / band[ok]
        pct[np.isnan(band)] = np.nan
        cols[f"bb_pctb_{w}"] = pct
    cols[f"cci_{config.cci_window}"] = _pad(cci(h, lo, c, config.cci_window), n)
    k, d = stochastic(h, lo, c, *config.stochastic)
    cols["stoch_k"] = _pad(k, n)
    cols["stoch_d"] = _pad(d, n)
    cols["chaikin"] = chaikin(h, lo, c, v, *config.chaikin)

    r = _pad(np.diff(np.log(c)), n)
    for lag in range(1, config.return_lags + 1):
        shifted = np.full(n, np.nan)
        shifted[lag - 1:] = r[: n - lag + 1]
        cols[f"return_lag_{lag}"] = shifted
    for w in config.sma_windows:
        cols[f"return_vol_{w}"] = _pad(rolling_std(r[1:], w), n)
        cols[f"volume_sma_{w}"] = _pad(sma(v, w), n)
    return cols


def build_feature_matrix(bars: Sequence[MinuteBar],
                         config: IndicatorConfig = IndicatorConfig()) -> FeatureMatrix:
    """Feature rows for minutes ``max_lookback .. n-2`` with next-minute targets.

    The final bar has no realized target and is not included.
    """
    lookback = config.max_lookback
    n = len(bars)
    if n < lookback + 2:
        raise InsufficientDataError(
            f"feature matrix needs more than {lookback + 1} bars, got {n}")
    cols = feature_columns(bars, config)
    names = tuple(cols)
    values = np.column_stack([cols[k] for k in names])
    c = cols["close"]
    if config.target == "close":
        target = c[1:]
    else:
        target = np.diff(np.log(c))
    rows = slice(lookback, n - 1)
    values = values[rows]
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise DomainError(f"non-finite feature {names[bad[1]]} at row {bad[0] + lookback}")
    return FeatureMatrix(
        timestamps=tuple(b.timestamp for b in bars[rows]),
        names=names,
        values=values,
        target=target[lookback:],
        warmup=lookback,
        target_kind=config.target,
    )

