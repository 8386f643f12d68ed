"""CLI surface: configs, artifacts, determinism, exit codes, verbs."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from mcot.cli import (
    EXIT_CONFIG,
    EXIT_INIT,
    ConfigError,
    load_config,
    main,
    run_experiment,
    run_suite,
    validate_config,
)


def minimal_config(**overrides):
    config = {
        "label": "mini",
        "law": {"kind": "uniform", "support": [-1, 1]},
        "basis": {"type": "legendre", "N": 5},
        "cost": {"epsilon": 0.1},
        "particles": {"K": 50, "M": 2},
        "langevin": {"n_max": 100, "dt0": 1e-3, "tau0": 1e-2},
        "seed": 1,
    }
    config.update(overrides)
    return config


def test_minimal_run_artifacts(tmp_path):
    code, out_dir, summary = run_experiment(minimal_config(), str(tmp_path))
    assert code == 0
    assert summary["status"] == "ok"
    for name in ("config_echo.json", "init_report.json", "runlog.csv",
                 "best_state.csv", "best_state.csv.json", "summary.json",
                 "pair_coupling.csv", "radial_coupling.csv", "transport_map.csv"):
        assert (out_dir / name).exists(), name
    loaded = json.loads((out_dir / "summary.json").read_text())
    assert loaded["oracle"] is not None
    assert loaded["accepted_iterations"] == 100


def test_runlog_byte_determinism(tmp_path):
    blobs = []
    for rep in range(2):
        _, out_dir, _ = run_experiment(minimal_config(), str(tmp_path / f"rep{rep}"))
        blobs.append((out_dir / "runlog.csv").read_bytes())
    assert blobs[0] == blobs[1]


def test_seed_override_changes_run(tmp_path):
    _, dir_a, sum_a = run_experiment(minimal_config(), str(tmp_path / "a"), seed_override=7)
    _, dir_b, sum_b = run_experiment(minimal_config(), str(tmp_path / "b"))
    assert sum_a["seed_used"] == 7 and sum_b["seed_used"] == 1
    assert (dir_a / "runlog.csv").read_bytes() != (dir_b / "runlog.csv").read_bytes()


def test_config_validation_messages():
    with pytest.raises(ConfigError, match="config: unknown key"):
        validate_config(minimal_config(typo=1))
    with pytest.raises(ConfigError, match="missing required"):
        validate_config({"law": {"kind": "uniform"}})
    with pytest.raises(ConfigError, match="law.kind"):
        validate_config(minimal_config(law={"kind": "pareto"}))
    with pytest.raises(ConfigError, match="langevin: unknown key"):
        validate_config(minimal_config(langevin={"dt": 1e-3}))
    with pytest.raises(ConfigError, match="weights"):
        validate_config(minimal_config(mode={"weights": "frozen"}))


def test_config_json_syntax_diagnostics(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"law": {,}}')
    with pytest.raises(ConfigError, match=r"bad\.json:1:"):
        load_config(bad)


def test_cli_main_run_and_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "mini.json"
    cfg.write_text(json.dumps(minimal_config()))
    code = main(["run", str(cfg), "--output-root", str(tmp_path / "out")])
    assert code == 0
    out = capsys.readouterr().out
    assert "best_cost" in out

    missing = main(["run", str(tmp_path / "nope.json")])
    assert missing == EXIT_CONFIG


def test_init_failure_exit_code(tmp_path):
    config = minimal_config(init={"max_iters": 1, "tol": 1e-14})
    code, out_dir, summary = run_experiment(config, str(tmp_path))
    assert code == EXIT_INIT
    assert summary["status"] == "init_not_converged"
    assert (out_dir / "summary.json").exists()


def test_adaptive_mode_run(tmp_path):
    config = minimal_config(
        mode={"weights": "adaptive", "weight_function": "squared"},
        particles={"K": 30, "M": 2},
    )
    code, out_dir, summary = run_experiment(config, str(tmp_path))
    assert code == 0
    sidecar = json.loads((out_dir / "best_state.csv.json").read_text())
    assert sidecar["mode"] == "adaptive"


def test_basis_dump_option(tmp_path):
    config = minimal_config(output={"dump_basis": True})
    code, out_dir, _ = run_experiment(config, str(tmp_path))
    assert code == 0
    rows = list(csv.DictReader((out_dir / "basis.csv").open()))
    assert len(rows) == 5


def test_pair_coupling_weights_sum(tmp_path):
    code, out_dir, _ = run_experiment(minimal_config(), str(tmp_path))
    rows = list(csv.DictReader((out_dir / "pair_coupling.csv").open()))
    K, M = 50, 2
    assert len(rows) == K * M * (M - 1)
    total = sum(float(r["weight"]) for r in rows)
    assert total == pytest.approx(1.0, abs=1e-9)


def test_suite_runs_and_aggregates(tmp_path):
    suite = {
        "label": "pair",
        "runs": [
            minimal_config(label="one"),
            minimal_config(label="two", seed=2),
        ],
    }
    code, table = run_suite(suite, tmp_path, str(tmp_path))
    assert code == 0
    rows = list(csv.DictReader(Path(table).open()))
    assert [r["label"] for r in rows] == ["one", "two"]
    assert all(r["status"] == "ok" for r in rows)
    assert float(rows[0]["best_cost"]) > 0


def test_suite_partial_failure_marks_row(tmp_path):
    suite = {
        "runs": [
            minimal_config(label="good"),
            minimal_config(label="bad", init={"max_iters": 1, "tol": 1e-14}),
        ],
    }
    code, table = run_suite(suite, tmp_path, str(tmp_path))
    assert code == EXIT_INIT
    rows = list(csv.DictReader(Path(table).open()))
    statuses = {r["label"]: r["status"] for r in rows}
    assert statuses == {"good": "ok", "bad": "init_not_converged"}


def test_oracle_verb(tmp_path, capsys):
    law = tmp_path / "law.json"
    law.write_text(json.dumps({"kind": "uniform", "support": [-1, 1]}))
    code = main(["oracle1d", str(law), "2", "0.1"])
    assert code == 0
    record = json.loads(capsys.readouterr().out)
    assert record["oracle_cost"] == pytest.approx(2 / 1.1, abs=1e-8)


def test_path_check_verb(tmp_path, capsys):
    config = minimal_config(particles={"K": 16, "M": 2}, langevin={"n_max": 150,
                            "dt0": 1e-3, "tau0": 1e-2})
    states = []
    for seed in (1, 2):
        code, out_dir, _ = run_experiment(config, str(tmp_path / f"s{seed}"),
                                          seed_override=seed)
        assert code == 0
        states.append(out_dir / "best_state.csv")
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(config))
    out_csv = tmp_path / "path.csv"
    code = main(["path-check", str(states[0]), str(states[1]), str(cfg),
                 "--out", str(out_csv)])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["feasible"] and report["monotone"]
    rows = list(csv.DictReader(out_csv.open()))
    assert len(rows) >= 101


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("MCOT_OUTPUT_ROOT", str(tmp_path / "envroot"))
    code, out_dir, _ = run_experiment(minimal_config())
    assert code == 0
    assert str(out_dir).startswith(str(tmp_path / "envroot"))
