import numpy as np
import pytest

from hfsignals import forest as rf
from hfsignals.errors import ConfigError, InsufficientDataError, ValidationError
from hfsignals.indicators import build_feature_matrix
from hfsignals.marketdata import synthetic_bars


def _linear(seed, n=300, p=5, noise=0.5):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    y = X @ np.arange(1.0, p + 1) + rng.normal(0, noise, n)
    return X, y


class _Fixed:
    """Stand-in expert that returns a precomputed column."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=float)

    def predict(self, X):
        return self.values[: len(X)]


def test_constant_target_is_exact():
    X = np.random.default_rng(0).normal(size=(60, 4))
    y = np.full(60, 59.11)
    tree = rf.fit_tree(X, y)
    assert tree.n_nodes == 1 and np.all(tree.predict(X) == 59.11)
    forest = rf.fit_forest(X, y, n_trees=10)
    assert np.all(forest.predict(X) == 59.11) and forest.oob_error == 0.0


def test_min_leaf_one_interpolates_training_data():
    X, y = _linear(1, n=80)
    tree = rf.fit_tree(X, y, rf.TreeConfig(min_leaf=1, mtry=5))
    np.testing.assert_array_equal(tree.predict(X), y)


def test_min_leaf_and_depth_respected():
    X, y = _linear(2, n=200)
    tree = rf.fit_tree(X, y, rf.TreeConfig(min_leaf=7, max_depth=3))
    assert tree.n_leaves <= 8
    _, counts = np.unique(tree.predict(X), return_counts=True)
    assert counts.min() >= 7


def test_identical_seeds_identical_forests():
    X, y = _linear(3)
    a = rf.fit_forest(X, y, 8, rf.TreeConfig(seed=5))
    b = rf.fit_forest(X, y, 8, rf.TreeConfig(seed=5), n_jobs=3)
    for s, t in zip(a.trees, b.trees):
        np.testing.assert_array_equal(s.feature, t.feature)
        np.testing.assert_array_equal(s.threshold, t.threshold)
        np.testing.assert_array_equal(s.value, t.value)
    assert a.oob_error == b.oob_error
    c = rf.fit_forest(X, y, 8, rf.TreeConfig(seed=6))
    assert not np.array_equal(a.predict(X), c.predict(X))


def test_single_tree_forest_and_zero_trees():
    X, y = _linear(4)
    forest = rf.fit_forest(X, y, 1)
    np.testing.assert_array_equal(forest.predict(X), forest.trees[0].predict(X))
    with pytest.raises(ConfigError):
        rf.fit_forest(X, y, 0)


def test_tree_order_does_not_matter():
    X, y = _linear(5)
    forest = rf.fit_forest(X, y, 12)
    shuffled = rf.Forest(forest.trees[::-1], forest.config, 12, forest.oob_error)
    np.testing.assert_allclose(shuffled.predict(X), forest.predict(X), atol=1e-12)


def test_fit_errors():
    X, y = _linear(6, n=20)
    with pytest.raises(ValidationError):
        rf.fit_forest(X, y[:-1])
    with pytest.raises(InsufficientDataError):
        rf.fit_tree(X[:9], y[:9], rf.TreeConfig(min_leaf=5))
    with pytest.raises(ConfigError):
        rf.fit_tree(X, y, rf.TreeConfig(mtry=6))
    with pytest.raises(ConfigError):
        rf.TreeConfig(min_leaf=0)
    tree = rf.fit_tree(X, y)
    with pytest.raises(ValidationError):
        tree.predict(X[:, :3])


@pytest.mark.slow
def test_forest_beats_single_tree_out_of_sample():
    wins = 0
    for seed in range(50):
        X, y = _linear(seed, n=400)
        cfg = rf.TreeConfig(seed=seed)
        forest = rf.fit_forest(X[:300], y[:300], 30, cfg)
        tree = rf.fit_tree(X[:300], y[:300], cfg, rng=np.random.default_rng(seed))
        f_mae = np.mean(np.abs(forest.predict(X[300:]) - y[300:]))
        t_mae = np.mean(np.abs(tree.predict(X[300:]) - y[300:]))
        wins += f_mae <= t_mae
    assert wins >= 40


def test_intervals_cover_training_range():
    for n, k, ov in [(900, 5, 0.5), (100, 3, 0.0), (57, 1, 0.5), (1000, 4, 0.25)]:
        iv = rf.expert_intervals(n, k, overlap=ov)
        assert len(iv) == k and iv[0][0] == 0 and iv[-1][1] == n
        lens = {b - a for a, b in iv}
        assert len(lens) == 1
        for (a0, b0), (a1, _) in zip(iv, iv[1:]):
            assert a0 < a1 <= b0
    iv = rf.expert_intervals(1000, 3, window_len=200, overlap=0.5)
    assert iv == [(600, 800), (700, 900), (800, 1000)]
    with pytest.raises(InsufficientDataError):
        rf.expert_intervals(100, 3, window_len=80)


def test_train_ensemble_uniform_and_predict_is_dot():
    X, y = _linear(7, n=240)
    ens = rf.train_ensemble(X, y, n_experts=3, n_trees=5)
    np.testing.assert_array_equal(ens.weights, np.full(3, 1 / 3))
    row = X[-1]
    each = np.array([e.predict(row)[0] for e in ens.experts])
    assert rf.ensemble_predict(ens, row) == pytest.approx(ens.weights @ each, abs=1e-12)
    assert [e.config.seed for e in ens.experts] == [0, 1, 2]


def test_update_weights_examples():
    ens = rf.Ensemble.uniform([_Fixed([0]), _Fixed([0])], [(0, 1), (0, 1)], beta=0.0,
                              eps=1e-15)
    new = rf.update_weights(ens, 1.0, [0.0, 0.5])
    np.testing.assert_allclose(new.weights, [1 / 3, 2 / 3], atol=1e-12)
    np.testing.assert_array_equal(new.error_ema, [1.0, 0.5])
    same = rf.update_weights(ens, 1.0, [2.0, 0.0])
    np.testing.assert_allclose(same.weights, [0.5, 0.5], atol=1e-12)
    with pytest.raises(ValidationError):
        rf.update_weights(ens, 1.0, [1.0])


def test_single_expert_walk_is_that_expert():
    y = np.linspace(1, 2, 30)
    fc = y + 0.1
    walk = rf.online_walk(rf.Ensemble.uniform([_Fixed(fc)], [(0, 1)]), np.zeros((30, 1)), y)
    np.testing.assert_array_equal(walk.forecasts, fc)
    assert np.all(walk.weights == 1.0)


def test_exact_expert_gains_weight_monotonically():
    rng = np.random.default_rng(8)
    y = rng.normal(size=60)
    ens = rf.Ensemble.uniform([_Fixed(y), _Fixed(y + 1.0)], [(0, 1), (0, 1)])
    walk = rf.online_walk(ens, np.zeros((60, 1)), y)
    w = walk.weights[:, 0]
    assert w[0] == 0.5 and np.all(np.diff(w) >= 0) and w[-1] > 0.99
    np.testing.assert_allclose(walk.weights.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(walk.weights >= 0)


def test_walk_forecasts_are_convex_combinations():
    rng = np.random.default_rng(9)
    cols = rng.normal(size=(3, 50))
    ens = rf.Ensemble.uniform([_Fixed(c) for c in cols], [(0, 1)] * 3, beta=0.7)
    walk = rf.online_walk(ens, np.zeros((50, 1)), rng.normal(size=50))
    assert np.all(walk.forecasts >= cols.min(axis=0) - 1e-12)
    assert np.all(walk.forecasts <= cols.max(axis=0) + 1e-12)


def test_walk_is_causal():
    rng = np.random.default_rng(10)
    cols = rng.normal(size=(2, 40))
    y = rng.normal(size=40)
    ens = rf.Ensemble.uniform([_Fixed(c) for c in cols], [(0, 1)] * 2)
    full = rf.online_walk(ens, np.zeros((40, 1)), y)
    changed = y.copy()
    changed[25:] += 100.0
    other = rf.online_walk(ens, np.zeros((40, 1)), changed)
    np.testing.assert_array_equal(full.forecasts[:26], other.forecasts[:26])


def test_ensemble_validation():
    with pytest.raises(ValidationError):
        rf.Ensemble([_Fixed([0])], [(0, 1)], np.array([0.9]), np.zeros(1))
    with pytest.raises(ConfigError):
        rf.Ensemble.uniform([], [])


def test_online_forecast_prices_alignment():
    bars = synthetic_bars(400, seed=11)
    fm = build_feature_matrix(bars)
    closes = np.array([b.close for b in bars])
    stamps = [b.timestamp for b in bars]
    cfg = rf.ForestConfig(n_experts=2, n_trees=5)
    res = rf.online_forecast_prices(fm, stamps, closes, test_len=30, cv_len=20, config=cfg)
    t = res.table
    assert len(t) == 30
    assert t.timestamps == tuple(stamps[369:399])
    np.testing.assert_array_equal(t.today, closes[369:399])
    np.testing.assert_array_equal(t.tmw, closes[370:])
    assert res.test_timestamps[20:] == t.timestamps
    # no training row may target a price at or after the first cross-validation bar
    last_row = max(b for _, b in res.ensemble.intervals) - 1
    assert last_row + fm.warmup + 1 < 400 - 50
    again = rf.online_forecast_prices(fm, stamps, closes, 30, 20, cfg)
    np.testing.assert_array_equal(again.table.forecast, t.forecast)
