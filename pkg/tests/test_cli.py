import csv
import json

import numpy as np
import pytest

from restless_lab.cli import (
    Config,
    ConfigError,
    main,
    parse_config,
    parse_seeds,
    validate,
)
from restless_lab.core import write_features_csv, write_trajectories_csv
from restless_lab.synthgen import generate_historical_dataset

SMALL = """\
# tiny synthetic run
instance.n_arms = 9
instance.budget = 2
instance.horizon = 10
synthetic.history_per_kind = 10
synthetic.history_length = 20
forecast.h = 3
"""


def write_cfg(tmp_path, text, name="exp.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# --- parsing and validation ------------------------------------------------------


def test_parse_config_values_and_origins():
    cfg = parse_config("mode = replay  # trailing\n\n instance.budget=3\n", "x.cfg")
    assert cfg.mode == "replay"
    assert cfg.get_int("instance.budget") == 3
    assert cfg.where("instance.budget") == "x.cfg:3"
    assert cfg.get_int("instance.n_arms") == 90


@pytest.mark.parametrize("text,line", [("mode = synthetic\nbogus = 1\n", 2), ("\n\nno equals sign\n", 3), ("= 4\n", 1)])
def test_parse_errors_name_the_line(text, line):
    with pytest.raises(ConfigError, match=f"x.cfg:{line}:"):
        parse_config(text, "x.cfg")


def test_typed_getters_report_location():
    cfg = parse_config("instance.budget = lots\nforecast.exclude_random = maybe\n", "x.cfg")
    with pytest.raises(ConfigError, match="x.cfg:1"):
        cfg.get_int("instance.budget")
    with pytest.raises(ConfigError, match="x.cfg:2"):
        cfg.get_bool("forecast.exclude_random")


def test_parse_seeds():
    assert parse_seeds("0, 1,2") == [0, 1, 2]
    with pytest.raises(ConfigError):
        parse_seeds("a,b")
    with pytest.raises(ConfigError):
        parse_seeds(" , ")


def test_default_config_is_clean():
    assert validate(Config()) == []


def test_budget_above_arms_is_an_error():
    cfg = parse_config("instance.n_arms = 9\ninstance.budget = 10\n", "x.cfg")
    diags = validate(cfg)
    assert any(d.level == "error" and "ProblemInstance invariant violated" in d.message and d.where == "x.cfg:2"
               for d in diags)


def test_long_window_is_a_warning():
    cfg = parse_config("forecast.h = 60\n", "x.cfg")
    diags = validate(cfg)
    assert [d.level for d in diags] == ["warning"]
    assert "window sets will be empty" in diags[0].message


def test_assorted_errors():
    cfg = parse_config("mode = fly\npolicies = tari,psychic\nwhittle.gamma = 1.5\ninstance.n_arms = 10\n"
                       "data.features = /nonexistent/f.csv\n", "x.cfg")
    wheres = {d.where for d in validate(cfg) if d.level == "error"}
    assert {"x.cfg:1", "x.cfg:2", "x.cfg:3", "x.cfg:5"} <= wheres
    cfg = parse_config("mode = replay\n")
    assert any("trajectory CSV" in d.message for d in validate(cfg))


def test_dry_run_exit_codes(tmp_path, capsys):
    ok = write_cfg(tmp_path, SMALL)
    assert main(["--config", str(ok), "--dry-run"]) == 0
    assert capsys.readouterr().out.strip() == "ok"
    bad = write_cfg(tmp_path, "instance.budget = 0\n", "bad.cfg")
    assert main(["--config", str(bad), "--dry-run"]) == 2
    assert main(["--config", str(tmp_path / "missing.cfg"), "--dry-run"]) == 2
    assert main(["--config", str(ok), "--seeds", "x", "--dry-run"]) == 2
    assert not (tmp_path / "runs").exists()


def test_invalid_config_runs_nothing(tmp_path):
    bad = write_cfg(tmp_path, "instance.budget = 0\n")
    out = tmp_path / "out"
    assert main(["--config", str(bad), "--out", str(out)]) == 2
    assert not out.exists()


# --- runs ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def synthetic_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("syn")
    cfg = write_cfg(root, SMALL)
    assert main(["--config", str(cfg), "--out", str(root / "a"), "--seeds", "0,1"]) == 0
    return root, cfg


def test_synthetic_layout(synthetic_run):
    root, _ = synthetic_run
    for pol in ("tari", "whittle", "round_robin", "random", "control"):
        for seed in (0, 1):
            d = root / "a" / pol / str(seed)
            rows = read_csv(d / "episode.csv")
            assert len(rows) == 9 * 10
            rep = json.loads((d / "metrics.json").read_text())
            assert rep["policy"] == pol and rep["seed"] == seed
            if pol != "control":
                acted = sum(int(r["action"]) for r in rows)
                assert acted == 2 * 10


def test_synthetic_is_deterministic(synthetic_run, monkeypatch):
    root, cfg = synthetic_run
    monkeypatch.setenv("RESTLESS_LAB_THREADS", "2")
    assert main(["--config", str(cfg), "--out", str(root / "b"), "--seeds", "0,1"]) == 0
    assert tree(root / "a") == tree(root / "b")


def test_aggregate_matches_seed_metrics(synthetic_run):
    root, _ = synthetic_run
    agg = read_csv(root / "a" / "aggregate.csv")
    for row in agg:
        if row["metric"] != "mean_engaged_fraction":
            continue
        vals = [json.loads((root / "a" / row["policy"] / s / "metrics.json").read_text())["mean_engaged_fraction"]
                for s in ("0", "1")]
        assert abs(float(row["mean"]) - np.mean(vals)) <= 1e-12
        assert abs(float(row["std"]) - np.std(vals, ddof=1)) <= 1e-12
        assert row["n_seeds"] == "2"
    assert {r["policy"] for r in agg} == {"tari", "whittle", "round_robin", "random", "control"}


def test_markov_order_mode(tmp_path):
    cfg = write_cfg(tmp_path, SMALL + "mode = markov_order\n")
    assert main(["--config", str(cfg), "--out", str(tmp_path / "m")]) == 0
    rows = read_csv(tmp_path / "m" / "0" / "markov_order.csv")
    assert [int(r["h"]) for r in rows] == list(range(1, 8))
    assert float(rows[0]["relative_improvement_pct"]) == 0.0


def test_forecast_eval_mode(tmp_path):
    cfg = write_cfg(tmp_path, SMALL + "mode = forecast_eval\nforecast.max_steps = 2\n")
    assert main(["--config", str(cfg), "--out", str(tmp_path / "f")]) == 0
    rows = read_csv(tmp_path / "f" / "forecast_eval.csv")
    assert [int(r["steps_ahead"]) for r in rows] == [1, 2]
    assert all(0 <= float(r["mae"]) <= 1 for r in rows)
    saved = tmp_path / "f" / "0" / "model.txt"
    assert saved.exists()
    # a saved model can be reused
    cfg2 = write_cfg(tmp_path, SMALL + f"mode = forecast_eval\nforecast.max_steps = 2\nforecast.model = {saved}\n", "b.cfg")
    assert main(["--config", str(cfg2), "--out", str(tmp_path / "g")]) == 0
    assert read_csv(tmp_path / "g" / "forecast_eval.csv") == rows


def test_replay_mode(tmp_path):
    data = generate_historical_dataset(4, 16, "train", 5)
    write_trajectories_csv(tmp_path / "t.csv", data)
    write_features_csv(tmp_path / "f.csv", data)
    cfg = write_cfg(tmp_path, f"""\
mode = replay
data.trajectories = {tmp_path / 't.csv'}
data.features = {tmp_path / 'f.csv'}
forecast.h = 3
replay.method = remove_on_deviation
replay.budget_fraction = 0.2
policies = tari,whittle,control
""")
    assert main(["--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    rep = json.loads((tmp_path / "r" / "tari" / "0" / "metrics.json").read_text())
    assert len(rep["engaged_fraction"]) == 16
    assert rep["critical_reached_pct"] is not None
