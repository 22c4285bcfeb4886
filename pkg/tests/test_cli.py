import csv
import importlib
import json

import numpy as np
import pytest

from discretepolicy.cli import (
    CURVE_COLUMNS,
    EXIT_CONFIG,
    EXIT_NUMERIC,
    EXIT_OK,
    OutputDir,
    UsageError,
    main,
    parse_seeds,
)
from discretepolicy.errors import NumericError

FAST = ["--steps", "64", "--batch-size", "32"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def header(path):
    with open(path, newline="") as fh:
        return next(csv.reader(fh))


def test_parse_seeds():
    assert parse_seeds("0..4") == [0, 1, 2, 3, 4]
    assert parse_seeds("3,1") == [3, 1]
    assert parse_seeds("0..1,5") == [0, 1, 5]
    for bad in ("", "a", "2..1", "1,1", "-1"):
        with pytest.raises(UsageError):
            parse_seeds(bad)


def test_train_writes_one_csv_and_manifest_per_seed(tmp_path):
    out = tmp_path / "run"
    argv = ["train", "--env", "bimodal-bandit", "--algo", "ppo", "--head", "discrete", "--bins", "11"]
    assert main(argv + FAST + ["--seeds", "0..4", "--out", str(out)]) == EXIT_OK
    assert sorted(p.name for p in out.glob("*.csv")) == [f"seed_{s}.csv" for s in range(5)]
    assert sorted(p.name for p in out.glob("*.json")) == [f"seed_{s}.json" for s in range(5)]
    assert header(out / "seed_0.csv") == list(CURVE_COLUMNS)
    rows = read_csv(out / "seed_0.csv")
    assert [int(r["steps"]) for r in rows] == [32, 64]
    assert all(r["wall_ms"] == "" for r in rows)
    info = json.loads((out / "seed_3.json").read_text())
    assert info["seed"] == 3 and info["config"]["bins"] == 11 and info["terminated_early"] is False
    assert info["config"]["algo"]["batch_size"] == 32


def test_rerun_is_bitwise_identical(tmp_path):
    argv = ["train", "--env", "pointmass-reacher", "--head", "gaussian", *FAST, "--seeds", "0,1"]
    assert main(argv + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(argv + ["--out", str(tmp_path / "b")]) == EXIT_OK
    for s in (0, 1):
        assert (tmp_path / "a" / f"seed_{s}.csv").read_bytes() == (tmp_path / "b" / f"seed_{s}.csv").read_bytes()


def test_rerun_from_manifest_is_bitwise_identical(tmp_path):
    argv = ["train", "--env", "pendulum-swingup", "--algo", "trpo", "--delta", "0.01", "--head", "ordinal"]
    assert main(argv + ["--bins", "5", *FAST, "--seeds", "2", "--out", str(tmp_path / "a")]) == EXIT_OK
    manifest = tmp_path / "a" / "seed_2.json"
    assert main(["train", "--manifest", str(manifest), "--out", str(tmp_path / "b")]) == EXIT_OK
    assert (tmp_path / "a" / "seed_2.csv").read_bytes() == (tmp_path / "b" / "seed_2.csv").read_bytes()


def test_parallel_workers_match_serial(tmp_path):
    argv = ["train", "--env", "bimodal-bandit", "--head", "discrete", "--bins", "5", *FAST, "--seeds", "0..2"]
    assert main(argv + ["--out", str(tmp_path / "serial")]) == EXIT_OK
    assert main(argv + ["--out", str(tmp_path / "pool"), "--parallelism", "2"]) == EXIT_OK
    for s in range(3):
        name = f"seed_{s}.csv"
        assert (tmp_path / "serial" / name).read_bytes() == (tmp_path / "pool" / name).read_bytes()


def test_missing_bins_is_a_config_error(tmp_path, capsys):
    code = main(["train", "--env", "bimodal-bandit", "--head", "discrete", "--out", str(tmp_path)])
    assert code == EXIT_CONFIG
    assert "--bins" in capsys.readouterr().err


@pytest.mark.parametrize(
    "extra",
    [
        ["--algo", "trpo", "--lr", "1e-3"],
        ["--algo", "ppo", "--delta", "0.01"],
        ["--seeds", "x"],
        ["--parallelism", "0"],
        ["--clip", "2"],
    ],
)
def test_invalid_flags_exit_2(tmp_path, extra):
    base = ["train", "--env", "bimodal-bandit", "--head", "gaussian", "--out", str(tmp_path)]
    assert main(base + extra) == EXIT_CONFIG


def test_unknown_subcommand_or_env(tmp_path):
    assert main(["fly", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["train", "--env", "cartpole", "--head", "gaussian", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_all_seeds_failing_exits_3_and_keeps_partial_curve(tmp_path, monkeypatch):
    mod = importlib.import_module("discretepolicy.onpolicy.train")
    real = mod.ppo_update
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] % 2 == 0:
            raise NumericError("forced", head="beta")
        return real(*args, **kwargs)

    monkeypatch.setattr(mod, "ppo_update", flaky)
    argv = ["train", "--env", "pendulum-swingup", "--head", "beta", "--steps", "128", "--batch-size", "32"]
    assert main(argv + ["--seeds", "0,1", "--out", str(tmp_path)]) == EXIT_NUMERIC
    for s in (0, 1):
        info = json.loads((tmp_path / f"seed_{s}.json").read_text())
        assert info["terminated_early"] is True and "forced" in info["error"]
        assert len(read_csv(tmp_path / f"seed_{s}.csv")) == 1


def test_some_seeds_failing_still_exits_0(tmp_path, monkeypatch):
    mod = importlib.import_module("discretepolicy.onpolicy.train")
    real = mod.train

    def fail_seed_one(config, seed, on_record=None):
        result = real(config, seed, on_record=on_record)
        if seed == 1:
            result.terminated_early, result.error = True, "forced"
        return result

    cli = importlib.import_module("discretepolicy.cli")
    monkeypatch.setattr(cli, "train", fail_seed_one)
    argv = ["train", "--env", "bimodal-bandit", "--head", "gaussian", *FAST, "--seeds", "0,1"]
    assert main(argv + ["--out", str(tmp_path)]) == EXIT_OK
    assert json.loads((tmp_path / "seed_0.json").read_text())["terminated_early"] is False
    assert json.loads((tmp_path / "seed_1.json").read_text())["terminated_early"] is True


def test_output_dir_refuses_escapes(tmp_path):
    out = OutputDir(tmp_path / "x")
    for bad in ("../y.csv", "sub/y.csv", "/etc/passwd"):
        with pytest.raises(UsageError):
            out.write_text(bad, "")
    out.write_text("ok.csv", "a\n")
    assert sorted(p.name for p in tmp_path.rglob("*")) == ["ok.csv", "x"]


def test_bandit_demo_outputs(tmp_path):
    assert main(["bandit-demo", *FAST, "--out", str(tmp_path)]) == EXIT_OK
    curves = sorted(tmp_path.glob("curve_*.csv"))
    densities = sorted(tmp_path.glob("density_*.csv"))
    assert len(curves) == 10 and len(densities) == 10
    assert {p.name.split("_")[1] for p in curves} == {"discrete11", "gaussian"}
    for path in densities:
        rows = read_csv(path)
        assert len(rows) == 1001
        x = np.array([float(r["action"]) for r in rows])
        p = np.array([float(r["density"]) for r in rows])
        assert x[0] == -1.0 and x[-1] == 1.0
        if "discrete" in path.name:
            assert abs(p.sum() * (x[1] - x[0]) - 1.0) < 1e-2


def test_variance_scan_csv(tmp_path):
    argv = ["variance-scan", "--env", "bimodal-bandit", "--ks", "2,5,50", "--n-inits", "2", "--n-grad-samples", "100"]
    assert main(argv + ["--out", str(tmp_path)]) == EXIT_OK
    assert header(tmp_path / "variance.csv") == ["K", "empirical_norm", "theoretical_norm", "raw_variance"]
    rows = read_csv(tmp_path / "variance.csv")
    assert [int(r["K"]) for r in rows] == [2, 5, 50]
    assert float(rows[-1]["empirical_norm"]) == 1.0


def test_capacity_scan_csv(tmp_path):
    argv = ["capacity-scan", "--env", "bimodal-bandit", "--ks", "2,3", "--seeds", "0,1", *FAST]
    assert main(argv + ["--out", str(tmp_path)]) == EXIT_OK
    rows = read_csv(tmp_path / "capacity.csv")
    assert [(r["K"], r["seed"]) for r in rows] == [("2", "0"), ("2", "1"), ("3", "0"), ("3", "1")]


def test_cost_scan_csv(tmp_path):
    argv = ["cost-scan", "--env", "bimodal-bandit", "--ks", "2,5", "--repeats", "1", *FAST]
    assert main(argv + ["--out", str(tmp_path)]) == EXIT_OK
    rows = read_csv(tmp_path / "cost.csv")
    assert rows[0]["head"] == "gaussian" and float(rows[0]["percent"]) == 100.0
    assert len(rows) == 3


def test_sensitivity_csv(tmp_path):
    argv = ["sensitivity", "--env", "bimodal-bandit", "--heads", "gaussian,discrete", "--n-draws", "2", *FAST]
    assert main(argv + ["--out", str(tmp_path)]) == EXIT_OK
    for head in ("gaussian", "discrete"):
        assert len(read_csv(tmp_path / f"sensitivity_{head}.csv")) == 2
        q = read_csv(tmp_path / f"sensitivity_{head}_quantiles.csv")
        assert [float(r["quantile"]) for r in q] == [0.0, 0.25, 0.5, 0.75, 1.0]


def test_timing_flag_fills_wall_ms(tmp_path):
    argv = ["train", "--env", "bimodal-bandit", "--head", "gaussian", *FAST, "--timing", "--out", str(tmp_path)]
    assert main(argv) == EXIT_OK
    assert all(float(r["wall_ms"]) >= 0 for r in read_csv(tmp_path / "seed_0.csv"))
    assert json.loads((tmp_path / "seed_0.json").read_text())["timing"] is True
