"""Friction-aware trading decisions, next-minute settlement and reports."""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from datetime import datetime
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ParseError, ValidationError

DEFAULT_TAX = 0.001
# relative slack on the friction comparison; keeps exact decimal ties Flat
_TIE_RTOL = 1e-12


class Position(enum.Enum):
    LONG = "Long"
    SHORT = "Short"
    FLAT = "Flat"

    @classmethod
    def parse(cls, text: str) -> "Position":
        t = (text or "").strip().lower()
        if t in ("", "flat", "none", "do nothing"):
            return cls.FLAT
        if t in ("long", "buy"):
            return cls.LONG
        if t in ("short", "sell"):
            return cls.SHORT
        raise ParseError(f"unknown position label {text!r}")


@dataclass(frozen=True)
class ForecastTable:
    """One-step-ahead forecasts on a common window.

    Row ``i`` stands at minute ``timestamps[i]`` with price ``today[i]``,
    predicts ``forecast[i]`` for the next minute, whose realized price is
    ``tmw[i]``.
    """

    timestamps: tuple
    today: np.ndarray
    forecast: np.ndarray
    tmw: np.ndarray

    def __post_init__(self):
        for name in ("today", "forecast", "tmw"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        object.__setattr__(self, "timestamps", tuple(self.timestamps))
        n = len(self.timestamps)
        if not (len(self.today) == len(self.forecast) == len(self.tmw) == n):
            raise ValidationError("forecast table columns differ in length")

    def __len__(self):
        return len(self.timestamps)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["timestamp", "today", "forecast", "tmw"])
        for ts, a, b, c in zip(self.timestamps, self.today, self.forecast, self.tmw):
            w.writerow([_stamp(ts), repr(float(a)), repr(float(b)), repr(float(c))])
        return buf.getvalue()


def _stamp(ts):
    return ts.isoformat() if hasattr(ts, "isoformat") else str(ts)


@dataclass(frozen=True)
class TradeRecord:
    timestamp: object
    today: float
    forecast: float
    position: Position
    tmw: float
    pnl: float


@dataclass(frozen=True)
class BacktestReport:
    trades: tuple
    tax: float
    total_pnl: float
    return_pct: float
    n_long: int
    n_short: int
    n_flat: int
    hit_rate: float

    @property
    def n_executed(self) -> int:
        return self.n_long + self.n_short

    def summary(self) -> dict:
        return {
            "n_trades": len(self.trades),
            "n_long": self.n_long,
            "n_short": self.n_short,
            "n_flat": self.n_flat,
            "n_executed": self.n_executed,
            "tax": self.tax,
            "total_pnl": self.total_pnl,
            "return_pct": self.return_pct,
            "return_convention": "total_pnl / first today price * 100",
            "hit_rate": self.hit_rate,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"

    def ledger_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["timestamp", "today", "forecast", "position", "tmw", "profit_loss"])
        for t in self.trades:
            w.writerow([_stamp(t.timestamp), f"{t.today:.5f}", f"{t.forecast:.5f}",
                        t.position.value, f"{t.tmw:.5f}", f"{t.pnl:.5f}"])
        return buf.getvalue()


def decide(today: float, forecast: float, tax: float = DEFAULT_TAX) -> Position:
    """Long when the predicted move beats the friction, Short when it loses
    more than the friction, Flat otherwise (a move equal to ``tax`` is Flat)."""
    d = forecast - today
    slack = _TIE_RTOL * max(abs(today), abs(forecast))
    if abs(d) <= tax + slack:
        return Position.FLAT
    return Position.LONG if d > 0 else Position.SHORT


def settle(position: Position, today: float, tmw: float) -> float:
    if position is Position.LONG:
        return tmw - today
    if position is Position.SHORT:
        return today - tmw
    return 0.0


def _check_monotone(timestamps: Sequence):
    bad = [i for i in range(1, len(timestamps)) if not timestamps[i - 1] < timestamps[i]]
    if bad:
        raise ValidationError(f"timestamps not strictly increasing at rows {bad}", rows=bad)


def run_backtest(table: ForecastTable, tax: float = DEFAULT_TAX) -> BacktestReport:
    _check_monotone(table.timestamps)
    trades = []
    for ts, a, f, b in zip(table.timestamps, table.today, table.forecast, table.tmw):
        pos = decide(float(a), float(f), tax)
        trades.append(TradeRecord(ts, float(a), float(f), pos, float(b),
                                  settle(pos, float(a), float(b))))
    n_long = sum(t.position is Position.LONG for t in trades)
    n_short = sum(t.position is Position.SHORT for t in trades)
    executed = [t for t in trades if t.position is not Position.FLAT]
    total = math.fsum(t.pnl for t in trades)
    first = trades[0].today if trades else float("nan")
    return BacktestReport(
        trades=tuple(trades),
        tax=tax,
        total_pnl=total,
        return_pct=total / first * 100.0 if trades else 0.0,
        n_long=n_long,
        n_short=n_short,
        n_flat=len(trades) - n_long - n_short,
        hit_rate=(sum(t.pnl > 0 for t in executed) / len(executed)) if executed else 0.0,
    )


@dataclass(frozen=True)
class Ranking:
    order: tuple
    rows: tuple = field(default_factory=tuple)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["rank", "expert", "total_pnl", "return_pct", "hit_rate",
                "n_long", "n_short", "n_flat"]
        w.writerow(cols)
        for row in self.rows:
            w.writerow([row[c] for c in cols])
        return buf.getvalue()


def compare_experts(reports: Mapping[str, BacktestReport]) -> Ranking:
    """Rank experts by total P&L, ties broken by name."""
    if not reports:
        raise ValidationError("no reports to compare")
    stamps = {name: tuple(t.timestamp for t in r.trades) for name, r in reports.items()}
    ref = next(iter(stamps.values()))
    bad = [name for name, s in stamps.items() if s != ref]
    if bad:
        raise ValidationError(f"reports cover different windows: {sorted(bad)}")
    order = sorted(reports, key=lambda k: (-reports[k].total_pnl, k))
    rows = []
    for rank, name in enumerate(order, start=1):
        r = reports[name]
        rows.append({"rank": rank, "expert": name, "total_pnl": repr(r.total_pnl),
                     "return_pct": repr(r.return_pct), "hit_rate": repr(r.hit_rate),
                     "n_long": r.n_long, "n_short": r.n_short, "n_flat": r.n_flat})
    return Ranking(tuple(order), tuple(rows))


def parse_forecast_csv(text: str) -> tuple[ForecastTable, list]:
    """Read a forecast or trade-ledger CSV.

    Accepts the expert output columns (timestamp, today, forecast, tmw) and
    the ledger columns, which add position and profit_loss. Returns the table
    plus the recorded positions (``None`` where the file has none).
    """
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise ParseError("forecast file has no rows")
    aliases = {"today.price": "today", "forecast.tmw": "forecast", "signal": "position",
               "porfit_loss": "profit_loss", "profit.loss": "profit_loss", "row": "timestamp",
               "": "timestamp"}
    stamps, today, fc, tmw, pos = [], [], [], [], []
    for i, raw in enumerate(rows, start=1):
        rec = {aliases.get(k.strip().lower(), k.strip().lower()): (v or "").strip()
               for k, v in raw.items() if k is not None}
        try:
            ts = rec.get("timestamp", str(i))
            stamps.append(int(ts) if ts.isdigit() else _parse_stamp(ts))
            today.append(float(rec["today"]))
            fc.append(float(rec["forecast"]))
            tmw.append(float(rec["tmw"]))
        except (KeyError, ValueError) as exc:
            raise ParseError(f"bad forecast row: {exc}", row=i) from None
        pos.append(Position.parse(rec["position"]) if "position" in rec else None)
    return ForecastTable(tuple(stamps), today, fc, tmw), pos


def _parse_stamp(text: str):
    return datetime.fromisoformat(text)


def load_fixture(name: str) -> tuple[ForecastTable, list, list]:
    """Published trade table ``name`` (``"kf"``, ``"arima"`` or ``"rf"``).

    Returns the forecast table, the recorded positions and recorded P&L.
    """
    from importlib import resources
    text = resources.files("hfsignals").joinpath(f"data/{name}_trades.csv").read_text()
    table, positions = parse_forecast_csv(text)
    pnl = [float(r["profit_loss"]) for r in csv.DictReader(io.StringIO(text))]
    return table, positions, pnl
