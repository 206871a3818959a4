"""Command-line entry point: ``hfsignals <command> [options]``.

Every command writes its artifacts into ``--out`` atomically and lists
them, with SHA-256 hashes, in ``MANIFEST.json``. Exit codes: 0 success,
1 usage or configuration error, 2 data or validation error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import arima, backtest, forest, indicators, statespace, stattests
from .errors import ConfigError, DegenerateSampleError, NumericalError, SignalError
from .marketdata import (PriceSeries, SplitSpec, format_bars, log_returns, read_bars,
                         synthetic_bars)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
EXPERTS = ("arima", "kalman", "forest")


@dataclass(frozen=True)
class RunConfig:
    data: str | None = None
    expert: str = "all"
    tax: float = backtest.DEFAULT_TAX
    test_len: int = 120
    cv_len: int = 120
    seed: int = 0
    out: str = "out"
    refit_every: int | None = None
    p_max: int = 5
    q_max: int = 5
    em_max_iter: int = 100
    em_tol: float = 1e-6
    n_experts: int = 5
    n_trees: int = 100
    overlap: float = 0.5
    min_leaf: int = 5
    max_depth: int | None = None
    mtry: int | None = None

    def __post_init__(self):
        if self.expert not in EXPERTS + ("all",):
            raise ConfigError(f"unknown expert {self.expert!r}")
        if not self.tax >= 0:
            raise ConfigError(f"tax must be non-negative, got {self.tax}")
        if self.refit_every is not None and self.refit_every < 1:
            raise ConfigError(f"refit_every must be >= 1, got {self.refit_every}")

    @property
    def split(self) -> SplitSpec:
        return SplitSpec(self.test_len, self.cv_len)

    def experts(self) -> tuple:
        return EXPERTS if self.expert == "all" else (self.expert,)

    def forest_config(self) -> forest.ForestConfig:
        tree = forest.TreeConfig(self.max_depth, self.min_leaf, self.mtry, self.seed)
        return forest.ForestConfig(n_experts=self.n_experts, overlap=self.overlap,
                                   n_trees=self.n_trees, tree=tree)


# config-file keys: section -> {key: RunConfig field}
_FILE_KEYS = {
    "run": {"data": "data", "expert": "expert", "tax": "tax", "test_len": "test_len",
            "cv_len": "cv_len", "seed": "seed", "out": "out", "refit_every": "refit_every"},
    "arima": {"p_max": "p_max", "q_max": "q_max"},
    "kalman": {"max_iter": "em_max_iter", "tol": "em_tol"},
    "forest": {"n_experts": "n_experts", "n_trees": "n_trees", "overlap": "overlap",
               "min_leaf": "min_leaf", "max_depth": "max_depth", "mtry": "mtry"},
}
_FLAG_KEYS = ("data", "expert", "tax", "test_len", "cv_len", "seed", "out", "refit_every")


def _coerce(name: str, text: str):
    default = RunConfig.__dataclass_fields__[name].default
    if text.strip().lower() in ("", "none"):
        return None
    if name in ("data", "expert", "out"):
        return text.strip()
    if isinstance(default, float):
        return float(text)
    return int(text)


def load_config(path: str | None, overrides: dict) -> RunConfig:
    """Defaults, then the INI file, then non-``None`` command-line values."""
    values = {}
    if path:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from None
        for section in parser.sections():
            keys = _FILE_KEYS.get(section)
            if keys is None:
                raise ConfigError(f"unknown config section [{section}]")
            for key, text in parser.items(section):
                if key not in keys:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                try:
                    values[keys[key]] = _coerce(keys[key], text)
                except ValueError:
                    raise ConfigError(f"bad value {text!r} for {key} in [{section}]") from None
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


class Artifacts:
    """Atomic writer for one output directory plus its manifest."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files = {}
        self.errors = []

    def write(self, name: str, text: str):
        data = text.encode()
        fd, tmp = tempfile.mkstemp(dir=self.dir, prefix=f".{name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, self.dir / name)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self.files[name] = hashlib.sha256(data).hexdigest()

    def finish(self, command: str):
        manifest = {
            "command": command,
            "complete": not self.errors,
            "errors": list(self.errors),
            "files": dict(sorted(self.files.items())),
        }
        self.write("MANIFEST.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_bars(cfg: RunConfig):
    if not cfg.data:
        raise ConfigError("no input data: pass --data PATH or --data synthetic:N")
    if cfg.data.startswith("synthetic:"):
        try:
            n = int(cfg.data.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad synthetic spec {cfg.data!r}") from None
        return synthetic_bars(n, seed=cfg.seed)
    try:
        return read_bars(cfg.data)
    except OSError as exc:
        raise ConfigError(f"cannot read {cfg.data}: {exc.strerror}") from None


def cmd_ingest(cfg: RunConfig, art: Artifacts):
    bars = _load_bars(cfg)
    if not bars:
        raise SignalError("input has a header but no bars")
    art.write("bars.csv", format_bars(bars))
    summary = {"n_bars": len(bars), "first": bars[0].timestamp.isoformat(),
               "last": bars[-1].timestamp.isoformat(), "violations": []}
    art.write("ingest.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"{len(bars)} bars from {summary['first']} to {summary['last']}; "
          f"0 invariant violations")


def cmd_diagnose(cfg: RunConfig, art: Artifacts):
    bars = _load_bars(cfg)
    prices = PriceSeries.from_bars(bars)
    rets = log_returns(prices).values
    if np.ptp(prices.values) == 0:
        raise DegenerateSampleError("constant prices: nothing to diagnose")
    levels = stattests.adf_test(np.log(prices.values))
    on_returns = stattests.adf_test(rets)
    sl = stattests.fit_skew_laplace(rets)
    ks = stattests.ks_statistic(rets, lambda x: stattests.skew_laplace_cdf(x, sl))
    report = {"n_returns": len(rets), "adf_log_prices": levels.to_dict(),
              "adf_returns": on_returns.to_dict(), "skew_laplace": sl.to_dict(),
              "ks": ks.to_dict()}
    art.write("diagnose.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    centres, emp, fitted = stattests.density_table(rets, sl)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_centre", "empirical_density", "fitted_density"])
    for row in zip(centres, emp, fitted):
        w.writerow([repr(float(v)) for v in row])
    art.write("density.csv", buf.getvalue())
    print(f"ADF log prices {levels.statistic:.3f} (reject={levels.reject_5pct}), "
          f"returns {on_returns.statistic:.3f} (reject={on_returns.reject_5pct}); "
          f"KS {ks.statistic:.4f}")


def cmd_features(cfg: RunConfig, art: Artifacts):
    fm = indicators.build_feature_matrix(_load_bars(cfg))
    art.write("features.csv", fm.to_csv())
    print(f"{len(fm.target)} feature rows x {len(fm.names)} columns "
          f"(warm-up {fm.warmup} bars)")


def run_expert(name: str, bars, cfg: RunConfig) -> tuple[backtest.ForecastTable, dict]:
    """Run one expert end to end; returns its forecast table and extra artifacts."""
    series = PriceSeries.from_bars(bars)
    extra = {}
    if name == "arima":
        res = arima.online_forecast_prices(series, cfg.split,
                                           cfg.refit_every if cfg.refit_every else None,
                                           cfg.p_max, cfg.q_max)
        info = {"order": list(res.model.order) if res.model else None,
                "ar": list(res.model.ar) if res.model else None,
                "ma": list(res.model.ma) if res.model else None,
                "mean": res.model.mean if res.model else None,
                "refits": res.refits, "notes": list(res.notes)}
        extra["arima_model.json"] = json.dumps(info, indent=2, sort_keys=True) + "\n"
        return res.table, extra
    if name == "kalman":
        em = statespace.EmConfig(cfg.em_max_iter, cfg.em_tol, cfg.refit_every)
        res = statespace.online_forecast_prices(series, cfg.split, em)
        info = {"params": res.params.to_dict(), "refits": res.refits,
                "em_trace": list(res.trace)}
        extra["kalman_model.json"] = json.dumps(info, indent=2, sort_keys=True) + "\n"
        return res.table, extra
    if name == "forest":
        fm = indicators.build_feature_matrix(bars)
        res = forest.online_forecast_prices(fm, series.timestamps, series.values,
                                            cfg.test_len, cfg.cv_len, cfg.forest_config())
        extra["forest_weights.csv"] = res.walk.weights_csv(res.test_timestamps)
        return res.table, extra
    raise ConfigError(f"unknown expert {name!r}")


def _write_report(art: Artifacts, name: str, report: backtest.BacktestReport):
    art.write(f"{name}_ledger.csv", report.ledger_csv())
    art.write(f"{name}_summary.json", report.to_json())


def cmd_backtest(cfg: RunConfig, art: Artifacts, replay: str | None = None):
    if replay:
        return cmd_replay(cfg, art, replay)
    bars = _load_bars(cfg)
    names = cfg.experts()
    workers = len(names) if len(names) > 1 else 1
    with ThreadPoolExecutor(workers) as pool:
        futures = {n: pool.submit(run_expert, n, bars, cfg) for n in names}
    reports, failure = {}, None
    for name in names:
        try:
            table, extra = futures[name].result()
        except SignalError as exc:
            art.errors.append(f"{name}: {type(exc).__name__}: {exc}")
            failure = failure or exc
            continue
        art.write(f"{name}_forecast.csv", table.to_csv())
        for fname, text in extra.items():
            art.write(fname, text)
        report = backtest.run_backtest(table, cfg.tax)
        _write_report(art, name, report)
        reports[name] = report
        print(f"{name}: total P&L {report.total_pnl:+.5f} "
              f"({report.n_long} long, {report.n_short} short, {report.n_flat} flat)")
    if failure is not None:
        raise failure
    if len(names) > 1:
        ranking = backtest.compare_experts(reports)
        art.write("ranking.csv", ranking.to_csv())
        print("ranking: " + " > ".join(ranking.order))


def cmd_replay(cfg: RunConfig, art: Artifacts, source: str | None = None,
               fixture: str | None = None):
    """Re-decide a recorded ledger at ``cfg.tax`` and report label mismatches."""
    if fixture:
        table, recorded, _ = backtest.load_fixture(fixture)
        name = fixture
    else:
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {source}: {exc.strerror}") from None
        table, recorded = backtest.parse_forecast_csv(text)
        name = Path(source).stem
    report = backtest.run_backtest(table, cfg.tax)
    mismatches = [i + 1 for i, (t, r) in enumerate(zip(report.trades, recorded))
                  if r is not None and t.position is not r]
    _write_report(art, f"replay_{name}", report)
    summary = dict(report.summary(), mismatched_rows=mismatches)
    art.write(f"replay_{name}_check.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"replayed {len(report.trades)} rows at tax {cfg.tax}: "
          f"{len(mismatches)} position mismatches, total P&L {report.total_pnl:+.5f}")


def cmd_compare(cfg: RunConfig, art: Artifacts, sources: list[str]):
    """Rank forecast or ledger CSVs given as ``NAME=PATH``."""
    reports = {}
    for item in sources:
        name, sep, path = item.partition("=")
        if not sep:
            path, name = item, Path(item).stem
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
        table, _ = backtest.parse_forecast_csv(text)
        reports[name] = backtest.run_backtest(table, cfg.tax)
    ranking = backtest.compare_experts(reports)
    art.write("ranking.csv", ranking.to_csv())
    print("ranking: " + " > ".join(ranking.order))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", help="bar file, or synthetic:N for a seeded random walk")
    common.add_argument("--expert", choices=EXPERTS + ("all",))
    common.add_argument("--tax", type=float, help="round-trip friction per share")
    common.add_argument("--test-len", dest="test_len", type=int)
    common.add_argument("--cv-len", dest="cv_len", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--config", help="INI file; flags override it")
    common.add_argument("--refit-every", dest="refit_every", type=int,
                        help="re-estimate experts every N minutes")

    parser = _Parser(prog="hfsignals", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("ingest", parents=[common], help="normalize a bar file")
    sub.add_parser("diagnose", parents=[common], help="stationarity and return density")
    sub.add_parser("features", parents=[common], help="emit the indicator feature matrix")
    p = sub.add_parser("backtest", parents=[common], help="run experts and the trading rule")
    p.add_argument("--replay", metavar="LEDGER", help="re-decide a recorded ledger instead")
    p = sub.add_parser("replay", parents=[common], help="re-decide a recorded ledger")
    p.add_argument("ledger", nargs="?")
    p.add_argument("--fixture", choices=("kf", "arima", "rf"),
                   help="bundled published trade table")
    p = sub.add_parser("compare", parents=[common], help="rank forecast files")
    p.add_argument("sources", nargs="+", metavar="NAME=PATH")
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_USAGE
    if isinstance(exc, NumericalError):
        return EXIT_NUMERIC
    return EXIT_DATA


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    art = None
    try:
        cfg = load_config(args.config, {k: getattr(args, k) for k in _FLAG_KEYS})
        if args.command == "replay" and not (args.ledger or args.fixture):
            raise ConfigError("replay needs a ledger file or --fixture")
        art = Artifacts(cfg.out)
        if args.command == "ingest":
            cmd_ingest(cfg, art)
        elif args.command == "diagnose":
            cmd_diagnose(cfg, art)
        elif args.command == "features":
            cmd_features(cfg, art)
        elif args.command == "backtest":
            cmd_backtest(cfg, art, args.replay)
        elif args.command == "replay":
            cmd_replay(cfg, art, args.ledger, args.fixture)
        else:
            cmd_compare(cfg, art, args.sources)
    except SignalError as exc:
        if art is not None:
            if not art.errors:
                art.errors.append(f"{type(exc).__name__}: {exc}")
            art.finish(args.command)
        print(f"hfsignals {args.command}: error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    art.finish(args.command)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
