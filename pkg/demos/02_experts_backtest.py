"""Run the three forecasting experts on one seeded day and trade on them.

Run with ``python demos/02_experts_backtest.py``; it takes a few seconds,
most of it growing the forest ensemble.
"""

from hfsignals import arima, forest, statespace
from hfsignals.backtest import compare_experts, run_backtest
from hfsignals.indicators import build_feature_matrix
from hfsignals.marketdata import PriceSeries, SplitSpec, synthetic_bars

bars = synthetic_bars(1200, seed=7)
series = PriceSeries.from_bars(bars)
spec = SplitSpec(test_len=120, cv_len=120)

# ARIMA on log returns: order picked by AIC on the training segment.
ar = arima.online_forecast_prices(series, spec, refit_every=None, p_max=3, q_max=2)
print(f"arima order {ar.model.order}, mean return {ar.model.mean:.2e}")

# Local-level state-space model: parameters by EM, then one-step filtering.
kf = statespace.online_forecast_prices(series, spec)
print(f"kalman: {len(kf.trace)} EM log-likelihoods, final {kf.trace[-1]:.2f}")

# Forest ensemble on indicator features, weights adapted online.
fm = build_feature_matrix(bars)
cfg = forest.ForestConfig(n_experts=3, n_trees=40)
rf = forest.online_forecast_prices(fm, series.timestamps, series.values,
                                   spec.test_len, spec.cv_len, cfg)
print("forest weights at the first test minute:",
      " ".join(f"{w:.3f}" for w in rf.walk.weights[spec.cv_len]))

# Same test window, same trading rule: go long or short only when the
# forecast move clears the round-trip friction.
reports = {name: run_backtest(res.table, tax=0.001)
           for name, res in (("arima", ar), ("kalman", kf), ("forest", rf))}
for name, rep in reports.items():
    print(f"{name:7s} P&L {rep.total_pnl:+.4f}  long {rep.n_long:3d}  "
          f"short {rep.n_short:3d}  flat {rep.n_flat:3d}")
print("ranking:", " > ".join(compare_experts(reports).order))
