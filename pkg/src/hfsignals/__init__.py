"""Minute-bar forecasting experts (ARIMA, Kalman/EM, random-forest ensemble)
with a friction-aware next-minute backtester."""

from .errors import (ConfigError, ConvergenceError, DegenerateSampleError, DomainError,
                     InsufficientDataError, NumericalError, ParseError, SignalError,
                     ValidationError)
from .marketdata import (MinuteBar, PriceSeries, ReturnSeries, SplitSpec, log_returns,
                         parse_bars, read_bars, synthetic_bars)
from .backtest import (BacktestReport, ForecastTable, Position, compare_experts, decide,
                       run_backtest, settle)

__version__ = "0.1.0"

__all__ = [
    "BacktestReport", "ConfigError", "ConvergenceError", "DegenerateSampleError",
    "DomainError", "ForecastTable", "InsufficientDataError", "MinuteBar", "NumericalError",
    "ParseError", "Position", "PriceSeries", "ReturnSeries", "SignalError", "SplitSpec",
    "ValidationError", "compare_experts", "decide", "log_returns", "parse_bars",
    "read_bars", "run_backtest", "settle", "synthetic_bars",
]
