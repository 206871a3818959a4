"""Regression trees, bagged forests and an inverse-error weighted ensemble.

Trees are grown greedily on variance reduction with per-node feature
subsampling. Every tree draws from its own ``SeedSequence`` child, so a
forest is bit-identical whatever order (or thread) its trees are grown in.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .backtest import ForecastTable
from .errors import ConfigError, InsufficientDataError, ValidationError
from .indicators import FeatureMatrix

LEAF = -1


@dataclass(frozen=True)
class TreeConfig:
    """Growth controls for one regression tree.

    ``max_depth=None`` grows until leaves reach ``min_leaf`` or are pure.
    ``mtry=None`` samples ``ceil(sqrt(n_features))`` features per split.
    """

    max_depth: int | None = None
    min_leaf: int = 5
    mtry: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.max_depth is not None and self.max_depth < 1:
            raise ConfigError(f"max_depth must be >= 1, got {self.max_depth}")
        if self.min_leaf < 1:
            raise ConfigError(f"min_leaf must be >= 1, got {self.min_leaf}")
        if self.mtry is not None and self.mtry < 1:
            raise ConfigError(f"mtry must be >= 1, got {self.mtry}")

    def resolve_mtry(self, n_features: int) -> int:
        m = self.mtry if self.mtry is not None else math.ceil(math.sqrt(n_features))
        if m > n_features:
            raise ConfigError(f"mtry={m} exceeds the feature count {n_features}")
        return m


@dataclass(frozen=True)
class RegressionTree:
    """Array-encoded binary tree; ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_features: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature == LEAF))

    def predict(self, X) -> np.ndarray:
        X = _as_rows(X, self.n_features)
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = self.feature[node] != LEAF
        while active.any():
            r, nd = rows[active], node[active]
            go_left = X[r, self.feature[nd]] <= self.threshold[nd]
            node[r] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] != LEAF
        return self.value[node]


def _as_rows(X, n_features: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != n_features:
        raise ValidationError(f"expected rows of {n_features} features, got shape {X.shape}")
    return X


def _exact_mean(a: np.ndarray, axis: int = 0) -> np.ndarray:
    """Mean centred on the first entry, exact when all entries are equal."""
    ref = np.take(a, [0], axis=axis)
    return np.squeeze(ref, axis=axis) + np.mean(a - ref, axis=axis)


def _best_split(X: np.ndarray, y: np.ndarray, feats: np.ndarray, min_leaf: int):
    """Best (gain, feature, threshold) over ``feats``; ``None`` if no valid cut."""
    n = len(y)
    sub = X[:, feats]
    order = np.argsort(sub, axis=0, kind="stable")
    xs = np.take_along_axis(sub, order, axis=0)
    # centre targets so the cumulative sums stay well conditioned
    yc = y - y.mean()
    ys = yc[order]
    csum = np.cumsum(ys, axis=0)
    total = csum[-1]
    k = np.arange(1, n)[:, None]  # left-child sizes
    left = csum[:-1]
    # SSE reduction of a cut after sorted position k-1
    gain = left * left / k + (total - left) ** 2 / (n - k)
    valid = xs[1:] > xs[:-1]
    if min_leaf > 1:
        valid[: min_leaf - 1] = False
        valid[n - min_leaf:] = False
    if not valid.any():
        return None
    gain = np.where(valid, gain, -np.inf)
    flat = int(np.argmax(gain))
    i, j = divmod(flat, len(feats))
    if not gain[i, j] > 1e-12 * max(float(yc @ yc), 1e-300):
        return None
    lo, hi = xs[i, j], xs[i + 1, j]
    thr = lo + 0.5 * (hi - lo)
    if not thr < hi:
        thr = lo
    return gain[i, j], int(feats[j]), float(thr)


def fit_tree(features, targets, config: TreeConfig = TreeConfig(),
             rng: np.random.Generator | None = None) -> RegressionTree:
    """Grow one tree by greedy variance reduction.

    Nodes are expanded depth first, left child before right, and each
    expansion draws ``mtry`` features without replacement from ``rng``
    (seeded from ``config.seed`` when not given).
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if X.ndim != 2 or len(X) != len(y):
        raise ValidationError(f"features {X.shape} and targets {y.shape} do not align")
    if len(y) < 2 * config.min_leaf:
        raise InsufficientDataError(
            f"tree with min_leaf={config.min_leaf} needs >= {2 * config.min_leaf} rows, "
            f"got {len(y)}")
    p = X.shape[1]
    mtry = config.resolve_mtry(p)
    if rng is None:
        rng = np.random.default_rng(config.seed)

    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(float(_exact_mean(y[idx])))
        return len(feature) - 1

    stack = [(new_node(np.arange(len(y))), np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if len(idx) < 2 * config.min_leaf:
            continue
        if config.max_depth is not None and depth >= config.max_depth:
            continue
        yi = y[idx]
        if yi[0] == yi[-1] and np.all(yi == yi[0]):
            continue
        feats = rng.choice(p, size=mtry, replace=False)
        found = _best_split(X[idx], yi, feats, config.min_leaf)
        if found is None:
            continue
        _, f, thr = found
        mask = X[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        a, b = new_node(li), new_node(ri)
        feature[node], threshold[node], left[node], right[node] = f, thr, a, b
        # right pushed first so the left subtree is expanded first
        stack.append((b, ri, depth + 1))
        stack.append((a, li, depth + 1))

    return RegressionTree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        value=np.array(value),
        n_features=p,
    )


@dataclass(frozen=True)
class Forest:
    trees: tuple
    config: TreeConfig
    n_trees: int
    oob_error: float

    def predict(self, X) -> np.ndarray:
        return _exact_mean(np.stack([t.predict(X) for t in self.trees]))


def _grow_bagged(X, y, config, seq: np.random.SeedSequence):
    rng = np.random.default_rng(seq)
    n = len(y)
    boot = rng.integers(0, n, n)
    tree = fit_tree(X[boot], y[boot], config, rng=rng)
    oob = np.ones(n, dtype=bool)
    oob[boot] = False
    return tree, oob


def fit_forest(features, targets, n_trees: int = 100, config: TreeConfig = TreeConfig(),
               n_jobs: int = 1) -> Forest:
    """Bagged forest; ``oob_error`` is the mean absolute out-of-bag error.

    Rows never left out of any bootstrap do not enter ``oob_error``; if no row
    is ever out of bag it is 0.
    """
    if n_trees < 1:
        raise ConfigError(f"n_trees must be >= 1, got {n_trees}")
    X = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if X.ndim != 2 or len(X) != len(y):
        raise ValidationError(f"features {X.shape} and targets {y.shape} do not align")
    if len(y) < 2 * config.min_leaf:
        raise InsufficientDataError(
            f"forest with min_leaf={config.min_leaf} needs >= {2 * config.min_leaf} rows, "
            f"got {len(y)}")
    config.resolve_mtry(X.shape[1])
    seqs = np.random.SeedSequence(config.seed).spawn(n_trees)
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            grown = list(pool.map(lambda s: _grow_bagged(X, y, config, s), seqs))
    else:
        grown = [_grow_bagged(X, y, config, s) for s in seqs]

    return Forest(tuple(t for t, _ in grown), config, n_trees, _oob_error(grown, X, y))


def _oob_error(grown, X, y) -> float:
    preds = np.full((len(grown), len(y)), np.nan)
    for k, (tree, oob) in enumerate(grown):
        if oob.any():
            preds[k, oob] = tree.predict(X[oob])
    seen = ~np.all(np.isnan(preds), axis=0)
    if not seen.any():
        return 0.0
    p = preds[:, seen]
    # centre each row's votes on its first available vote so constants stay exact
    ref = p[np.argmax(~np.isnan(p), axis=0), np.arange(p.shape[1])]
    avg = ref + np.nanmean(p - ref, axis=0)
    return float(np.mean(np.abs(avg - y[seen])))


@dataclass(frozen=True)
class Ensemble:
    """Experts with their training intervals ``[start, stop)`` and weights."""

    experts: tuple
    intervals: tuple
    weights: np.ndarray
    error_ema: np.ndarray
    beta: float = 0.9
    eps: float = 1e-8

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        e = np.asarray(self.error_ema, dtype=float)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "error_ema", e)
        object.__setattr__(self, "experts", tuple(self.experts))
        object.__setattr__(self, "intervals", tuple(tuple(iv) for iv in self.intervals))
        k = len(self.experts)
        if k == 0:
            raise ConfigError("ensemble needs at least one expert")
        if not (len(w) == len(e) == len(self.intervals) == k):
            raise ValidationError("experts, intervals, weights and error_ema differ in length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValidationError(f"weights are not a probability vector: {w}")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError(f"beta must lie in [0, 1), got {self.beta}")
        if not self.eps > 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")

    @classmethod
    def uniform(cls, experts: Sequence, intervals: Sequence, beta: float = 0.9,
                eps: float = 1e-8) -> "Ensemble":
        k = len(experts)
        if k == 0:
            raise ConfigError("ensemble needs at least one expert")
        return cls(tuple(experts), tuple(intervals), np.full(k, 1.0 / k), np.zeros(k),
                   beta, eps)


def expert_intervals(n_rows: int, n_experts: int, window_len: int | None = None,
                     overlap: float = 0.5) -> list[tuple[int, int]]:
    """Contiguous ``[start, stop)`` windows over ``n_rows`` training rows.

    Without ``window_len`` the window is sized so that ``n_experts`` windows,
    consecutive ones sharing ``overlap`` of their length, exactly cover the
    range. With an explicit ``window_len`` the windows keep that overlap and
    end on the most recent row.
    """
    if n_experts < 1:
        raise ConfigError(f"n_experts must be >= 1, got {n_experts}")
    if not 0.0 <= overlap < 1.0:
        raise ConfigError(f"overlap must lie in [0, 1), got {overlap}")
    if window_len is None:
        # rounding up keeps consecutive windows touching when overlap is 0
        window_len = math.ceil(n_rows / (1 + (n_experts - 1) * (1 - overlap)))
        if n_experts == 1:
            window_len = n_rows
        starts = [round(i * (n_rows - window_len) / max(n_experts - 1, 1))
                  for i in range(n_experts)]
    else:
        step = max(1, int(round(window_len * (1 - overlap)))) if n_experts > 1 else 0
        span = window_len + (n_experts - 1) * step
        if span > n_rows:
            raise InsufficientDataError(
                f"{n_experts} windows of {window_len} rows need {span} rows, got {n_rows}")
        starts = [n_rows - span + i * step for i in range(n_experts)]
    if window_len < 1:
        raise InsufficientDataError(f"{n_rows} rows cannot hold {n_experts} windows")
    return [(s, s + window_len) for s in starts]


def train_ensemble(features, targets, n_experts: int = 5, window_len: int | None = None,
                   n_trees: int = 100, config: TreeConfig = TreeConfig(),
                   overlap: float = 0.5, beta: float = 0.9, eps: float = 1e-8,
                   n_jobs: int = 1) -> Ensemble:
    """One forest per training interval, uniform initial weights.

    ``features`` may be a :class:`FeatureMatrix` (its targets are used) or a
    plain matrix paired with ``targets``. Expert ``i`` gets seed
    ``config.seed + i`` and bootstraps only within its own interval.
    """
    if isinstance(features, FeatureMatrix):
        X, y = features.values, features.target
    else:
        X, y = np.asarray(features, dtype=float), np.asarray(targets, dtype=float)
    intervals = expert_intervals(len(y), n_experts, window_len, overlap)
    experts = []
    for i, (a, b) in enumerate(intervals):
        cfg = replace(config, seed=config.seed + i)
        experts.append(fit_forest(X[a:b], y[a:b], n_trees, cfg, n_jobs=n_jobs))
    return Ensemble.uniform(experts, intervals, beta, eps)


def ensemble_predict(ensemble: Ensemble, feature_row) -> float:
    preds = np.array([float(np.asarray(e.predict(feature_row)).reshape(-1)[0])
                      for e in ensemble.experts])
    return float(ensemble.weights @ preds)


def update_weights(ensemble: Ensemble, realized: float, per_expert_forecasts) -> Ensemble:
    """Fold one realized value into the error EMAs and renormalize inverse errors."""
    f = np.asarray(per_expert_forecasts, dtype=float)
    if len(f) != len(ensemble.experts):
        raise ValidationError(f"{len(f)} forecasts for {len(ensemble.experts)} experts")
    b = ensemble.beta
    ema = b * ensemble.error_ema + (1.0 - b) * np.abs(f - realized)
    raw = 1.0 / (ema + ensemble.eps)
    return replace(ensemble, weights=raw / raw.sum(), error_ema=ema)


@dataclass(frozen=True)
class WalkResult:
    forecasts: np.ndarray
    expert_forecasts: np.ndarray
    weights: np.ndarray  # weights used for each forecast, one row per step
    ensemble: Ensemble

    def weights_csv(self, timestamps: Sequence | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        k = self.weights.shape[1]
        w.writerow(["step"] + [f"w{i}" for i in range(k)])
        for i, row in enumerate(self.weights):
            label = timestamps[i].isoformat() if timestamps is not None else i
            w.writerow([label] + [repr(float(v)) for v in row])
        return buf.getvalue()


def online_walk(ensemble: Ensemble, features, realized) -> WalkResult:
    """Forecast each row, then learn from its realized value.

    Row ``i``'s forecast uses weights updated with realized values of rows
    ``< i`` only. Experts need only a ``predict(rows)`` method.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(realized, dtype=float)
    if X.ndim != 2 or len(X) != len(y):
        raise ValidationError(f"features {X.shape} and realized {y.shape} do not align")
    # trees are frozen, so per-row expert predictions can be made up front
    preds = np.column_stack([np.asarray(e.predict(X), dtype=float).reshape(len(X))
                             for e in ensemble.experts]) if len(X) else \
        np.empty((0, len(ensemble.experts)))
    out = np.empty(len(X))
    traj = np.empty((len(X), len(ensemble.experts)))
    for i in range(len(X)):
        traj[i] = ensemble.weights
        out[i] = float(ensemble.weights @ preds[i])
        ensemble = update_weights(ensemble, y[i], preds[i])
    return WalkResult(out, preds, traj, ensemble)


@dataclass(frozen=True)
class ForestConfig:
    n_experts: int = 5
    window_len: int | None = None
    overlap: float = 0.5
    n_trees: int = 100
    tree: TreeConfig = field(default_factory=TreeConfig)
    beta: float = 0.9
    eps: float = 1e-8
    n_jobs: int = 1


@dataclass(frozen=True)
class OnlineForestResult:
    table: ForecastTable
    ensemble: Ensemble
    walk: WalkResult
    test_timestamps: tuple


def online_forecast_prices(fm: FeatureMatrix, bar_timestamps: Sequence, closes,
                           test_len: int, cv_len: int = 0,
                           config: ForestConfig = ForestConfig()) -> OnlineForestResult:
    """Forest-ensemble expert on the same test window as the other experts.

    ``fm`` must be built from the full bar sequence with next-close targets;
    ``closes`` and ``bar_timestamps`` are that sequence's closes and stamps.
    Experts train on rows whose target falls in the training prices, the
    cross-validation rows only adapt the weights, and test rows are emitted.
    """
    if fm.target_kind != "close":
        raise ConfigError("the forest expert forecasts prices; build features with target='close'")
    closes = np.asarray(closes, dtype=float)
    n = len(closes)
    first = n - test_len - cv_len
    emit_from = n - test_len
    # feature row r sits at bar r + warmup and targets bar r + warmup + 1
    w = fm.warmup
    train_stop = first - 1 - w
    walk_start = emit_from - 1 - w - cv_len
    if walk_start < 0 or train_stop < 1:
        raise InsufficientDataError(
            f"{n} bars leave no training rows after a {w}-bar warm-up and the split")
    ens = train_ensemble(fm.values[:train_stop], fm.target[:train_stop], config.n_experts,
                         config.window_len, config.n_trees, config.tree, config.overlap,
                         config.beta, config.eps, config.n_jobs)
    rows = slice(walk_start, emit_from - 1 - w + test_len)
    walk = online_walk(ens, fm.values[rows], fm.target[rows])
    fc = walk.forecasts[cv_len:]
    idx = range(emit_from, n)
    table = ForecastTable(
        timestamps=tuple(bar_timestamps[t - 1] for t in idx),
        today=[closes[t - 1] for t in idx],
        forecast=fc,
        tmw=[closes[t] for t in idx],
    )
    return OnlineForestResult(table, walk.ensemble, walk, tuple(fm.timestamps[rows]))
