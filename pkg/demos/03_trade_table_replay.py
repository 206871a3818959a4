"""Replay the bundled published trade tables through the trading rule.

Each bundled table lists today's price, the forecast and the next price,
along with the position that was recorded. Re-deciding every row at a
friction of 0.001 per share should give back the recorded positions.
"""

from hfsignals.backtest import load_fixture, run_backtest

for name in ("kf", "arima", "rf"):
    table, recorded, pnl = load_fixture(name)
    report = run_backtest(table, tax=0.001)
    mismatches = [i + 1 for i, (t, r) in enumerate(zip(report.trades, recorded))
                  if t.position is not r]
    print(f"{name:5s} {len(table):3d} rows, total P&L {report.total_pnl:+.4f}, "
          f"mismatched rows: {mismatches or 'none'}")

# The forest table does not replay cleanly: some of its rows sit on the
# wrong side of any single friction level, so it is kept for reference only.
