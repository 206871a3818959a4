import math
from datetime import datetime

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hfsignals.errors import (DomainError, InsufficientDataError, ParseError,
                              ValidationError)
from hfsignals.marketdata import (MinuteBar, PriceSeries, SplitSpec, format_bars,
                                  log_returns, parse_bars, split, synthetic_bars)

HEADER = "Date,Open,Close,Low,High,Value,Volume,Number_Ticks\n"
ROW1 = "12/1/2017 16:31, 170.01, 170.40, 170.01, 170.71, 8119385.00, 47651, 291\n"


def test_parse_table_row():
    (bar,) = parse_bars(HEADER + ROW1)
    assert bar == MinuteBar(datetime(2017, 12, 1, 16, 31), 170.01, 170.40, 170.01, 170.71,
                            8119385.0, 47651, 291)


def test_parse_whitespace_with_row_numbers():
    text = ("Date Open Close Low High Value Volume Number_Ticks\n"
            "1 12/1/2017 16:31 170.01 170.40 170.01 170.71 8119385.00 47651 291\n"
            "2 12/1/2017 16:32 170.40 170.67 170.35 170.70 5000000.00 30000 200\n")
    bars = parse_bars(text)
    assert [b.close for b in bars] == [170.40, 170.67]
    assert bars[1].timestamp == datetime(2017, 12, 1, 16, 32)


def test_parse_any_column_order():
    text = ("Volume,Close,Date,Open,High,Low,Number_Ticks,Value\n"
            "47651,170.40,12/1/2017 16:31,170.01,170.71,170.01,291,8119385.00\n")
    assert parse_bars(text)[0] == parse_bars(HEADER + ROW1)[0]


def test_empty_body_gives_no_bars():
    assert parse_bars(HEADER) == []


def test_empty_text_is_parse_error():
    with pytest.raises(ParseError):
        parse_bars("")


def test_low_above_high_rejected():
    bad = "12/1/2017 16:31, 170.45, 170.40, 170.50, 170.40, 1.0, 1, 1\n"
    with pytest.raises(ValidationError) as info:
        parse_bars(HEADER + bad)
    assert info.value.rows == (1,)


def test_malformed_row_reports_row_number():
    with pytest.raises(ParseError) as info:
        parse_bars(HEADER + ROW1 + "12/1/2017 16:32, abc, 1, 1, 1, 1, 1, 1\n")
    assert info.value.row == 2


def test_out_of_order_timestamps_listed():
    rows = ROW1 + ROW1.replace("16:31", "16:30")
    with pytest.raises(ValidationError) as info:
        parse_bars(HEADER + rows)
    assert info.value.rows == (2,)


def test_duplicate_timestamps_rejected():
    with pytest.raises(ValidationError):
        parse_bars(HEADER + ROW1 + ROW1)


def test_round_trip_through_canonical_csv():
    bars = synthetic_bars(50, seed=1)
    text = format_bars(bars)
    assert text.splitlines()[0] == "timestamp,open,close,low,high,value,volume,num_ticks"
    assert parse_bars(text) == bars


def test_synthetic_bars_are_valid_and_seeded():
    bars = synthetic_bars(500, seed=4)
    assert all(b.check() is None for b in bars)
    assert bars == synthetic_bars(500, seed=4)
    assert bars != synthetic_bars(500, seed=5)


@pytest.mark.parametrize("prices,expected", [
    ([100.0, 100.0], [0.0]),
    ([100.0, 100.0 * math.exp(0.01)], [0.01]),
    ([170.40, 170.67, 170.39], [math.log(170.67 / 170.40), math.log(170.39 / 170.67)]),
])
def test_log_returns_examples(prices, expected):
    np.testing.assert_allclose(log_returns(prices).values, expected, rtol=0, atol=1e-15)


def test_log_returns_errors():
    with pytest.raises(InsufficientDataError):
        log_returns([100.0])
    with pytest.raises(DomainError):
        log_returns([100.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 1e4), min_size=2, max_size=200))
def test_returns_reconstruct_prices(prices):
    r = log_returns(prices).values
    rebuilt = prices[0] * np.exp(np.concatenate([[0.0], np.cumsum(r)]))
    np.testing.assert_allclose(rebuilt, prices, rtol=1e-10)


def test_return_series_timestamps():
    series = PriceSeries.from_bars(synthetic_bars(5, seed=0))
    rets = log_returns(series)
    assert len(rets) == 4
    assert rets.base_timestamps == series.timestamps[1:]


def test_split_examples():
    train, cv, test = split(list(range(10)), SplitSpec(2, 2))
    assert (train, cv, test) == (list(range(6)), [6, 7], [8, 9])
    train, _, _ = split(list(range(20277)), SplitSpec(120, 120))
    assert len(train) == 20037
    with pytest.raises(ValidationError):
        split(list(range(10)), SplitSpec(0, 2))
    with pytest.raises(InsufficientDataError):
        split(list(range(10)), SplitSpec(5, 5))


@given(st.integers(2, 60), st.data())
def test_split_preserves_elements(n, data):
    test_len = data.draw(st.integers(1, n - 1))
    cv_len = data.draw(st.integers(0, n - 1 - test_len))
    parts = split(list(range(n)), SplitSpec(test_len, cv_len))
    assert sum(parts, []) == list(range(n))
    assert len(parts[2]) == test_len and len(parts[1]) == cv_len


def test_price_series_slices_and_is_read_only():
    series = PriceSeries.from_bars(synthetic_bars(10, seed=0))
    assert len(series[2:5]) == 3
    with pytest.raises(ValueError):
        series.values[0] = 1.0
    with pytest.raises(ValidationError):
        PriceSeries((2, 1), [1.0, 2.0])
