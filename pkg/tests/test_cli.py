import hashlib
import json
from datetime import datetime, timedelta

import pytest

from hfsignals import cli
from hfsignals.errors import ConfigError
from hfsignals.marketdata import MinuteBar, format_bars, synthetic_bars


def _run(tmp_path, *args):
    return cli.main(list(args) + ["--out", str(tmp_path / "out")])


def _manifest(tmp_path):
    return json.loads((tmp_path / "out" / "MANIFEST.json").read_text())


def _write_bars(path, bars):
    path.write_text(format_bars(bars))
    return str(path)


def test_ingest_reports_bar_count(tmp_path, capsys):
    data = _write_bars(tmp_path / "six.csv", synthetic_bars(6, seed=1))
    assert _run(tmp_path, "ingest", "--data", data) == 0
    assert capsys.readouterr().out.startswith("6 bars from ")
    summary = json.loads((tmp_path / "out" / "ingest.json").read_text())
    assert summary["n_bars"] == 6
    assert (tmp_path / "out" / "bars.csv").read_text() == (tmp_path / "six.csv").read_text()


def test_ingest_data_errors(tmp_path):
    text = format_bars(synthetic_bars(6, seed=1))
    header, *rows = text.splitlines()
    empty = tmp_path / "empty.csv"
    empty.write_text(header + "\n")
    assert _run(tmp_path, "ingest", "--data", str(empty)) == 2
    swapped = tmp_path / "swapped.csv"
    swapped.write_text("\n".join([header, rows[1], rows[0]] + rows[2:]) + "\n")
    assert _run(tmp_path, "ingest", "--data", str(swapped)) == 2
    assert not _manifest(tmp_path)["complete"]


def test_usage_errors_exit_1(tmp_path):
    assert cli.main(["frobnicate"]) == 1
    assert _run(tmp_path, "ingest") == 1
    assert _run(tmp_path, "ingest", "--data", str(tmp_path / "missing.csv")) == 1
    assert _run(tmp_path, "backtest", "--data", "synthetic:50", "--tax", "-1") == 1
    assert _run(tmp_path, "replay") == 1


def test_diagnose_schema(tmp_path):
    assert _run(tmp_path, "diagnose", "--data", "synthetic:800", "--seed", "2") == 0
    report = json.loads((tmp_path / "out" / "diagnose.json").read_text())
    assert set(report) == {"n_returns", "adf_log_prices", "adf_returns", "skew_laplace", "ks"}
    assert report["n_returns"] == 799
    assert {"location", "scale", "asymmetry"} <= set(report["skew_laplace"])
    assert report["adf_returns"]["reject_5pct"] is True
    lines = (tmp_path / "out" / "density.csv").read_text().splitlines()
    assert lines[0] == "bin_centre,empirical_density,fitted_density" and len(lines) > 10


def test_diagnose_constant_prices_exit_3(tmp_path):
    t0 = datetime(2018, 1, 2, 9, 30)
    bars = [MinuteBar(t0 + timedelta(minutes=i), 60.0, 60.0, 60.0, 60.0, 1.0, 100, 5)
            for i in range(300)]
    data = _write_bars(tmp_path / "flat.csv", bars)
    assert _run(tmp_path, "diagnose", "--data", data) == 3
    manifest = _manifest(tmp_path)
    assert not manifest["complete"] and "DegenerateSampleError" in manifest["errors"][0]


def test_features(tmp_path):
    assert _run(tmp_path, "features", "--data", "synthetic:120") == 0
    lines = (tmp_path / "out" / "features.csv").read_text().splitlines()
    assert len(lines) == 1 + 120 - 31 - 1
    assert len(lines[0].split(",")) == 84 + 2


def test_replay_fixture_has_no_mismatches(tmp_path):
    assert _run(tmp_path, "replay", "--fixture", "kf") == 0
    check = json.loads((tmp_path / "out" / "replay_kf_check.json").read_text())
    assert check["mismatched_rows"] == []


def test_kalman_backtest_deterministic_with_valid_manifest(tmp_path):
    args = ["backtest", "--data", "synthetic:700", "--expert", "kalman", "--seed", "3",
            "--test-len", "60", "--cv-len", "40"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    manifest = json.loads((tmp_path / "a" / "MANIFEST.json").read_text())
    assert manifest["complete"] and manifest["command"] == "backtest"
    for name, digest in manifest["files"].items():
        a = (tmp_path / "a" / name).read_bytes()
        assert hashlib.sha256(a).hexdigest() == digest
        assert a == (tmp_path / "b" / name).read_bytes()
    assert {"kalman_forecast.csv", "kalman_ledger.csv", "kalman_summary.json",
            "kalman_model.json"} <= set(manifest["files"])
    assert len((tmp_path / "a" / "kalman_forecast.csv").read_text().splitlines()) == 61

    ledger = str(tmp_path / "a" / "kalman_ledger.csv")
    assert cli.main(["replay", ledger, "--out", str(tmp_path / "r")]) == 0
    check = json.loads((tmp_path / "r" / "replay_kalman_ledger_check.json").read_text())
    assert check["mismatched_rows"] == []

    fc = str(tmp_path / "a" / "kalman_forecast.csv")
    assert cli.main(["compare", f"k={fc}", f"k2={fc}", "--out", str(tmp_path / "c")]) == 0
    ranking = (tmp_path / "c" / "ranking.csv").read_text()
    assert "k" in ranking and "k2" in ranking


def test_failed_expert_leaves_incomplete_manifest(tmp_path):
    code = _run(tmp_path, "backtest", "--data", "synthetic:150", "--expert", "kalman")
    assert code == 2
    manifest = _manifest(tmp_path)
    assert not manifest["complete"]
    assert manifest["errors"] and manifest["errors"][0].startswith("kalman:")
    assert "kalman_forecast.csv" not in manifest["files"]


def test_config_precedence(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[run]\ntax = 0.002\nseed = 9\n\n[forest]\nn_trees = 7\n"
                   "\n[kalman]\nmax_iter = 12\n")
    cfg = cli.load_config(str(ini), {"tax": 0.005, "seed": None})
    assert cfg.tax == 0.005 and cfg.seed == 9 and cfg.n_trees == 7 and cfg.em_max_iter == 12
    assert cli.load_config(None, {}).tax == 0.001
    bad = tmp_path / "bad.ini"
    bad.write_text("[forest]\nn_tres = 7\n")
    with pytest.raises(ConfigError):
        cli.load_config(str(bad), {})
    bad.write_text("[nope]\nx = 1\n")
    with pytest.raises(ConfigError):
        cli.load_config(str(bad), {})
    bad.write_text("[run]\nseed = seven\n")
    with pytest.raises(ConfigError):
        cli.load_config(str(bad), {})
