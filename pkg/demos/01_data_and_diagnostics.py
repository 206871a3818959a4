"""Walk through the data layer and the return diagnostics.

Run with ``python demos/01_data_and_diagnostics.py``. Everything is seeded,
so the printed numbers are stable from run to run.
"""

import numpy as np

from hfsignals import stattests
from hfsignals.indicators import build_feature_matrix
from hfsignals.marketdata import PriceSeries, SplitSpec, log_returns, split, synthetic_bars

# A trading day of one-minute bars from the seeded generator.
bars = synthetic_bars(390, seed=1)
prices = PriceSeries.from_bars(bars)
print(f"{len(bars)} bars, first close {prices.values[0]:.2f}, last {prices.values[-1]:.2f}")

# Prices wander, returns do not: the unit-root test should only reject on returns.
rets = log_returns(prices).values
for label, x in (("log prices", np.log(prices.values)), ("returns", rets)):
    res = stattests.adf_test(x)
    print(f"ADF on {label:10s}: stat {res.statistic:7.3f}, reject at 5%: {res.reject_5pct}")

# Heavy tails: fit the skewed Laplace density and measure the fit with KS.
fit = stattests.fit_skew_laplace(rets)
ks = stattests.ks_statistic(rets, lambda v: stattests.skew_laplace_cdf(v, fit))
print(f"skew Laplace: location {fit.location:.2e}, scale {fit.scale:.2e}, "
      f"asymmetry {fit.asymmetry:.3f}; KS {ks.statistic:.4f}")

# The feature matrix used by the forest expert.
fm = build_feature_matrix(bars)
print(f"feature matrix: {fm.values.shape[0]} rows x {fm.values.shape[1]} columns, "
      f"warm-up {fm.warmup} bars")
print("first columns:", ", ".join(fm.names[:6]))

# How a series is carved into training, cross-validation and test segments.
train, cv, test = split(prices, SplitSpec(test_len=60, cv_len=60))
print(f"split: train {len(train)}, cv {len(cv)}, test {len(test)}")
