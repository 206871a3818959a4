"""Minute-bar ingestion, log returns and chronological splits."""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass
from datetime import datetime, timedelta
from typing import Sequence

import numpy as np

from .errors import DomainError, InsufficientDataError, ParseError, ValidationError

BAR_FIELDS = ("open", "close", "low", "high", "value", "volume", "num_ticks")
CANONICAL_HEADER = ("timestamp",) + BAR_FIELDS

# header spellings seen in exported terminal files
_ALIASES = {
    "date": "timestamp",
    "datetime": "timestamp",
    "time": "timestamp",
    "timestamp": "timestamp",
    "open": "open",
    "close": "close",
    "low": "low",
    "high": "high",
    "value": "value",
    "volume": "volume",
    "number_ticks": "num_ticks",
    "numberticks": "num_ticks",
    "num_ticks": "num_ticks",
    "ticks": "num_ticks",
}
_DATE_TOKEN = re.compile(r"^\d{1,2}/\d{1,2}/\d{4}$")
_TIME_TOKEN = re.compile(r"^\d{1,2}:\d{2}(:\d{2})?$")


@dataclass(frozen=True)
class MinuteBar:
    timestamp: datetime
    open: float
    close: float
    low: float
    high: float
    value: float = 0.0
    volume: int = 0
    num_ticks: int = 0

    def check(self):
        """Return a description of the first violated invariant, or None."""
        prices = (self.open, self.close, self.low, self.high)
        if not all(math.isfinite(p) and p > 0 for p in prices):
            return "prices must be finite and strictly positive"
        if self.low > self.high:
            return f"low {self.low} > high {self.high}"
        if self.low > min(self.open, self.close):
            return f"low {self.low} above min(open, close)"
        if self.high < max(self.open, self.close):
            return f"high {self.high} below max(open, close)"
        if self.volume < 0 or self.num_ticks < 0:
            return "volume and num_ticks must be non-negative"
        return None


@dataclass(frozen=True)
class PriceSeries:
    timestamps: tuple
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "timestamps", tuple(self.timestamps))
        if len(self.timestamps) != len(values):
            raise ValidationError("timestamps and values differ in length")
        if len(values) < 1:
            raise InsufficientDataError("a price series needs at least one value")
        bad = [i for i in range(1, len(values))
               if not self.timestamps[i - 1] < self.timestamps[i]]
        if bad:
            raise ValidationError("timestamps must be strictly increasing", rows=bad)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, item):
        if isinstance(item, slice):
            return PriceSeries(self.timestamps[item], self.values[item])
        return self.values[item]

    @classmethod
    def from_bars(cls, bars: Sequence[MinuteBar], field: str = "close") -> "PriceSeries":
        return cls(tuple(b.timestamp for b in bars),
                   np.array([getattr(b, field) for b in bars], dtype=float))


@dataclass(frozen=True)
class ReturnSeries:
    values: np.ndarray
    base_timestamps: tuple

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class SplitSpec:
    test_len: int
    cv_len: int = 0

    def check(self, n: int):
        if self.test_len <= 0:
            raise ValidationError(f"test_len must be positive, got {self.test_len}")
        if self.cv_len < 0:
            raise ValidationError(f"cv_len must be non-negative, got {self.cv_len}")
        if self.test_len + self.cv_len >= n:
            raise InsufficientDataError(
                f"split test_len={self.test_len} cv_len={self.cv_len} leaves no "
                f"training data in a series of length {n}")


def parse_timestamp(text: str) -> datetime:
    text = text.strip()
    for fmt in ("%m/%d/%Y %H:%M", "%m/%d/%Y %H:%M:%S"):
        try:
            return datetime.strptime(text, fmt)
        except ValueError:
            pass
    return datetime.fromisoformat(text)


def _split_whitespace_row(line: str) -> list[str]:
    tokens = line.split()
    out = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if (_DATE_TOKEN.match(tok) and i + 1 < len(tokens)
                and _TIME_TOKEN.match(tokens[i + 1])):
            out.append(tok + " " + tokens[i + 1])
            i += 2
        else:
            out.append(tok)
            i += 1
    return out


def parse_bars(csv_text: str) -> list[MinuteBar]:
    """Parse minute bars from comma- or whitespace-delimited text.

    The header must name Date, Open, Close, Low, High, Value, Volume and
    Number_Ticks in any order. A leading unnamed row-number column, as in
    R-style exports, is tolerated. Rows are numbered from 1 (the first data
    row) in error messages.
    """
    lines = [ln for ln in csv_text.splitlines() if ln.strip()]
    if not lines:
        raise ParseError("no header row")
    comma = "," in lines[0]
    if comma:
        rows = list(csv.reader(io.StringIO("\n".join(lines)), skipinitialspace=True))
    else:
        rows = [_split_whitespace_row(ln) for ln in lines]
    header = [h.strip().lower().replace(" ", "_") for h in rows[0]]
    if header and header[0] == "":
        header = header[1:]
    try:
        names = [_ALIASES[h] for h in header]
    except KeyError as exc:
        raise ParseError(f"unknown column {exc.args[0]!r} in header") from None
    missing = set(CANONICAL_HEADER) - set(names)
    if missing:
        raise ParseError(f"header lacks columns {sorted(missing)}")
    if len(set(names)) != len(names):
        raise ParseError("duplicate columns in header")

    bars = []
    for rowno, fields in enumerate(rows[1:], start=1):
        fields = [f.strip() for f in fields]
        if len(fields) == len(names) + 1:
            fields = fields[1:]
        if len(fields) != len(names):
            raise ParseError(f"expected {len(names)} fields, found {len(fields)}", row=rowno)
        rec = dict(zip(names, fields))
        try:
            ts = parse_timestamp(rec["timestamp"])
            bar = MinuteBar(
                timestamp=ts,
                open=float(rec["open"]),
                close=float(rec["close"]),
                low=float(rec["low"]),
                high=float(rec["high"]),
                value=float(rec["value"]),
                volume=int(float(rec["volume"])),
                num_ticks=int(float(rec["num_ticks"])),
            )
        except ValueError as exc:
            raise ParseError(str(exc), row=rowno) from None
        problem = bar.check()
        if problem:
            raise ValidationError(f"row {rowno} ({ts.isoformat()}): {problem}", rows=[rowno])
        bars.append(bar)
    validate_order(bars)
    return bars


def validate_order(bars: Sequence[MinuteBar]):
    bad = [i + 1 for i in range(1, len(bars))
           if not bars[i - 1].timestamp < bars[i].timestamp]
    if bad:
        raise ValidationError(
            "timestamps not strictly increasing at rows " + ", ".join(map(str, bad)),
            rows=bad)


def read_bars(path) -> list[MinuteBar]:
    with open(path, newline="") as fh:
        return parse_bars(fh.read())


def format_bars(bars: Sequence[MinuteBar]) -> str:
    """Serialize bars in canonical column order with ISO-8601 timestamps."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CANONICAL_HEADER)
    for b in bars:
        writer.writerow([b.timestamp.isoformat(), repr(b.open), repr(b.close),
                         repr(b.low), repr(b.high), repr(b.value), b.volume, b.num_ticks])
    return buf.getvalue()


def log_returns(prices) -> ReturnSeries:
    """Log returns ``ln(p[t+1] / p[t])`` of a price series (or plain sequence)."""
    if isinstance(prices, PriceSeries):
        values, stamps = prices.values, prices.timestamps
    else:
        values = np.asarray(prices, dtype=float)
        stamps = tuple(range(len(values)))
    if len(values) < 2:
        raise InsufficientDataError("log returns need at least two prices")
    if not np.all(values > 0):
        raise DomainError("log returns need strictly positive prices")
    return ReturnSeries(np.diff(np.log(values)), tuple(stamps[1:]))


def split(series, spec: SplitSpec):
    """Chronological (train, cv, test) split of any sliceable series."""
    n = len(series)
    spec.check(n)
    a = n - spec.test_len - spec.cv_len
    b = n - spec.test_len
    return series[:a], series[a:b], series[b:]


def synthetic_bars(n: int, seed: int = 0, start: float = 60.0, vol: float = 2e-4,
                   tick: float = 0.005) -> list[MinuteBar]:
    """Seeded geometric random-walk bars, used by demos and tests."""
    rng = np.random.default_rng(seed)
    close = start * np.exp(np.cumsum(rng.normal(0.0, vol, n)))
    close = np.round(close / tick) * tick
    open_ = np.concatenate([[close[0]], close[:-1]])
    spread = np.abs(rng.normal(0.0, vol, n)) * close
    high = np.maximum(open_, close) + np.round(spread / tick) * tick
    low = np.minimum(open_, close) - np.round(rng.uniform(0, 1, n) * spread / tick) * tick
    volume = rng.integers(5_000, 50_000, n)
    ticks = rng.integers(50, 300, n)
    t0 = datetime(2018, 1, 2, 9, 30)
    bars = []
    for i in range(n):
        bars.append(MinuteBar(
            timestamp=t0 + timedelta(minutes=i),
            open=float(round(open_[i], 6)), close=float(round(close[i], 6)),
            low=float(round(low[i], 6)), high=float(round(high[i], 6)),
            value=float(round(volume[i] * close[i], 2)),
            volume=int(volume[i]), num_ticks=int(ticks[i])))
    return bars
