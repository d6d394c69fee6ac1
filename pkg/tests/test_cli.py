import json
import math

import numpy as np
import pytest
import yaml

from roughspde.cli import (
    EXIT_CONFIG,
    EXIT_FAIL,
    EXIT_PASS,
    EXIT_RUNTIME,
    SCHEMA_VERSION,
    derive_seed,
    emit_report,
    load_config,
    main,
    read_csv_report,
    run_experiment,
    seed_rng,
    validate_config,
)
from roughspde.errors import ConfigError

SMALL_CONV = {
    "experiment": "small_conv",
    "suite": "convergence",
    "seed": 5,
    "grid": {"t_end": 1.0, "level": 6, "fine_depth": 10},
    "probe": {"levels": [4, 5, 6], "reference_level": 8},
}

SMALL_IDENT = {
    "experiment": "small_ident",
    "suite": "identities",
    "seed": 7,
    "grid": {"t_end": 1.0, "level": 7, "fine_depth": 11},
    "probe": {"test_modes": [0, 1, 2]},
    "thresholds": {"weak_residual_max": 1.0, "ito_residual_max": 1.0},
}


def _write(tmp_path, cfg, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(cfg))
    return p


def test_seed_rng_streams():
    a = seed_rng(123, 0).standard_normal(10_000)
    b = seed_rng(123, 0).standard_normal(10_000)
    assert np.array_equal(a, b)
    assert not np.array_equal(a[:100], seed_rng(123, 1).standard_normal(100))
    x = seed_rng(9, 3).standard_normal(100_000)
    assert abs(x.mean()) < 4 / math.sqrt(x.size)
    assert derive_seed(1, 2) == derive_seed(1, 2) != derive_seed(1, 3)


def test_emit_csv_round_trip(tmp_path):
    rows = [{"level": 4, "error": 0.1234567890123456789, "tag": "a"}, {"level": 5, "error": math.nan, "tag": "b"}]
    p = emit_report(rows, "csv", tmp_path / "r.csv")
    back = read_csv_report(p)
    assert [r["level"] for r in back] == [4.0, 5.0]
    assert back[0]["error"] == rows[0]["error"]
    assert math.isnan(back[1]["error"])
    assert [r["nan_flag"] for r in back] == [0.0, 1.0]
    assert "nan" in p.read_text().splitlines()[2]
    empty = emit_report([], "csv", tmp_path / "e.csv", columns=["level", "error"])
    assert empty.read_text() == "level,error,nan_flag\n"


def test_emit_json(tmp_path):
    p = emit_report({"a": 1.5, "b": [1, 2], "ok": True}, "json", tmp_path / "r.json")
    doc = json.loads(p.read_text())
    assert doc["schema_version"] == SCHEMA_VERSION and doc["a"] == 1.5 and "nan_fields" not in doc
    p = emit_report({"a": math.nan, "nested": {"b": math.inf}, "passed": True}, "json", tmp_path / "n.json")
    doc = json.loads(p.read_text())
    assert doc["passed"] is False and doc["a"] == "nan"
    assert set(doc["nan_fields"]) == {"/a", "/nested/b"}
    with pytest.raises(ConfigError):
        emit_report({}, "xml", tmp_path / "x.xml")


@pytest.mark.parametrize("bad", [
    {"experiment": "x", "seed": 1, "bogus": 2},
    {"experiment": "x", "suite": "identities"},
    {"experiment": "x", "seed": 1, "grid": {"level": 8, "fine_depth": 10}},
    {"experiment": "x", "seed": 1, "driver": {"gamma": 0.6}},
    {"experiment": "x", "seed": 1, "driver": {"type": "canonical"}},
    {"experiment": "x", "seed": 1, "driver": {"dimension": 3}},
    {"experiment": "x", "seed": 1, "probe": {"levels": [4, 6], "reference_level": 6}},
    {"seed": 1},
    [1, 2],
])
def test_validate_config_rejects(bad):
    with pytest.raises(ConfigError):
        validate_config(bad)


def test_validate_config_defaults():
    cfg = validate_config({"experiment": "x", "seed": 3})
    assert cfg.basis["K_max"] == 4 and cfg.grid["fine_depth"] == cfg.grid["level"] + 4 and cfg.stochastic
    canon = validate_config({"experiment": "y", "driver": {"type": "canonical", "path": [{"sin": [1.0]}, {"poly": [0, 1]}]}})
    assert canon.seed is None and not canon.stochastic


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "broken.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "broken.json")
    assert load_config(_write(tmp_path, SMALL_CONV)).experiment == "small_conv"


def test_convergence_suite_is_deterministic(tmp_path):
    r1 = run_experiment(SMALL_CONV, out_dir=tmp_path / "a")
    r2 = run_experiment(SMALL_CONV, out_dir=tmp_path / "b")
    assert r1.csv_path.read_bytes() == r2.csv_path.read_bytes()
    assert r1.summary == r2.summary
    rows = read_csv_report(r1.csv_path)
    assert [r["level"] for r in rows] == [4.0, 5.0, 6.0]
    assert all(r["error"] > 0 for r in rows)
    assert np.isfinite(r1.summary["fitted_slope"])
    doc = json.loads(r1.json_path.read_text())
    assert doc["seed"] == 5 and doc["suite"] == "convergence"
    # thread count does not change the numbers
    r3 = run_experiment(SMALL_CONV, out_dir=tmp_path / "c", threads=3)
    assert r3.csv_path.read_bytes() == r1.csv_path.read_bytes()


def test_identities_suite_report(tmp_path):
    res = run_experiment(SMALL_IDENT, out_dir=tmp_path)
    doc = json.loads(res.json_path.read_text())
    assert {"weak_residual_max", "ito_residual_max"} <= set(doc["summary"])
    assert doc["checks"] == {"weak_residual_max": True, "ito_residual_max": True}
    assert res.status == EXIT_PASS
    assert res.csv_path == tmp_path / "small_ident" / "identities.csv"


def test_main_exit_codes(tmp_path, capsys):
    out = str(tmp_path / "out")
    assert main(["run", str(_write(tmp_path, SMALL_IDENT)), "--out", out]) == EXIT_PASS
    assert capsys.readouterr().out.startswith("PASS ")
    strict = dict(SMALL_IDENT, thresholds={"weak_residual_max": 1e-30})
    assert main(["run", str(_write(tmp_path, strict, "strict.yaml")), "--out", out]) == EXIT_FAIL
    assert capsys.readouterr().out.startswith("FAIL ")
    assert main(["run", str(tmp_path / "nope.yaml"), "--out", out]) == EXIT_CONFIG
    assert main(["run", str(_write(tmp_path, {"experiment": "x", "bad": 1}, "bad.yaml"))]) == EXIT_CONFIG
    assert main(["run", str(_write(tmp_path, SMALL_IDENT)), "--suite", "unknown"]) == EXIT_CONFIG
    assert main(["run", str(_write(tmp_path, SMALL_IDENT)), "--threads", "0"]) == EXIT_CONFIG
    wrong_key = dict(SMALL_IDENT, thresholds={"not_a_field": 1.0})
    assert main(["run", str(_write(tmp_path, wrong_key, "wk.yaml")), "--out", out]) == EXIT_CONFIG
    assert main([]) == EXIT_CONFIG


def test_main_blow_up(tmp_path):
    cfg = {
        "experiment": "boom",
        "suite": "identities",
        "grid": {"level": 5, "fine_depth": 8},
        "driver": {"type": "canonical", "dimension": 1, "path": [{"poly": [0, 1]}]},
        "problem": {"model": "custom", "nonlinearity": {"poly": [0.0, 0.0, 0.0, 10.0]},
                    "fields": [{"poly": [0.0]}], "initial": 50.0},
        "probe": {"test_modes": [0]},
    }
    with np.errstate(all="ignore"):
        assert main(["run", str(_write(tmp_path, cfg)), "--out", str(tmp_path)]) == EXIT_RUNTIME


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("ROUGHSPDE_OUT", str(tmp_path / "env"))
    res = run_experiment(SMALL_IDENT)
    assert res.json_path.parent == tmp_path / "env" / "small_ident"
