"""Tests for the command-line interface: dispatch, outputs, exit codes."""

import json
from pathlib import Path

import pytest

from phibe.cli import main

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def write_config(tmp_path, **overrides) -> Path:
    d = {
        "schema_version": 1,
        "name": "cli-case",
        "kind": "lqr",
        "environment": {"A": 1.0, "B": 1.0, "Q": -1.0, "R": -1.0,
                        "sigma": 0.0, "beta": 0.0},
        "dt": 2.0,
        "algorithm": "phibe_pi",
        "order": 1,
        "batch": {"q_num_traj": 16, "q_steps": 5,
                  "pi_num_traj": 16, "pi_steps": 5},
        "pi0": {"K": [[-1.25]]},
        "iterations": 5,
        "repetitions": 2,
        "seed": 0,
    }
    for key, value in overrides.items():
        if value is None:
            d.pop(key, None)
        else:
            d[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(d))
    return path


class TestRunCaseCommand:
    def test_writes_outputs_and_exits_zero(self, tmp_path, capsys):
        config = write_config(tmp_path)
        out = tmp_path / "out"
        assert main(["run-case", str(config), "--out", str(out)]) == 0
        for name in ("results.csv", "config.echo.json", "summary.json"):
            assert (out / name).exists()
        assert "run_case 'cli-case' wrote" in capsys.readouterr().out

    def test_rerun_is_byte_identical(self, tmp_path):
        config = write_config(tmp_path)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["run-case", str(config), "--out", str(out_a)]) == 0
        assert main(["run-case", str(config), "--out", str(out_b)]) == 0
        assert ((out_a / "results.csv").read_bytes()
                == (out_b / "results.csv").read_bytes())

    def test_rerun_from_echoed_config(self, tmp_path):
        config = write_config(tmp_path)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        main(["run-case", str(config), "--out", str(out_a)])
        main(["run-case", str(out_a / "config.echo.json"), "--out", str(out_b)])
        assert ((out_a / "results.csv").read_bytes()
                == (out_b / "results.csv").read_bytes())

    def test_seed_override_reflected_in_echo(self, tmp_path):
        config = write_config(tmp_path)
        out = tmp_path / "out"
        main(["run-case", str(config), "--out", str(out), "--seed", "9"])
        echoed = json.loads((out / "config.echo.json").read_text())
        assert echoed["seed"] == 9

    def test_default_out_from_config(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        config = write_config(tmp_path, out="from-config")
        assert main(["run-case", str(config)]) == 0
        assert (tmp_path / "from-config" / "results.csv").exists()


class TestExitCodes:
    def test_unknown_key_exits_two(self, tmp_path, capsys):
        config = write_config(tmp_path, bogus=1)
        assert main(["run-case", str(config), "--out", str(tmp_path / "o")]) == 2
        assert "config error" in capsys.readouterr().err

    def test_missing_file_exits_two(self, tmp_path, capsys):
        assert main(["run-case", str(tmp_path / "nope.json")]) == 2
        assert "cannot read config" in capsys.readouterr().err

    def test_numerical_failure_exits_three(self, tmp_path, capsys):
        config = write_config(tmp_path, algorithm="be_pi",
                              pi0={"K": [[-1.5]]}, order=None)
        assert main(["run-case", str(config), "--out", str(tmp_path / "o")]) == 3
        assert "numerical failure" in capsys.readouterr().err


class TestSweepCommands:
    def test_dt_sweep_oracle(self, tmp_path, capsys):
        out = tmp_path / "sweep"
        code = main(["dt-sweep", str(CONFIG_DIR / "dt_sweep_1d.json"),
                     "--out", str(out)])
        assert code == 0
        summary = json.loads((out / "summary.json").read_text())
        assert abs(summary["aggregates"]["slopes"]["gain_error_phibe2"] - 2.0) <= 0.3

    def test_mode_override(self, tmp_path):
        config = write_config(
            tmp_path, name="sweep-sampled",
            environment={"A": -1.0, "B": 0.5, "Q": -1.0, "R": -1.0,
                         "sigma": 0.0, "beta": 1.0},
            dt=0.1, dts=[0.05, 0.1], mode="oracle", iterations=6)
        out = tmp_path / "out"
        assert main(["dt-sweep", str(config), "--out", str(out),
                     "--mode", "sampled", "--reps", "1"]) == 0
        echoed = json.loads((out / "config.echo.json").read_text())
        assert echoed["mode"] == "sampled"
        header = (out / "results.csv").read_text().splitlines()[0]
        assert header == "dt,repetition,metric,value,seed,config_hash"

    def test_batch_sweep(self, tmp_path):
        config = write_config(
            tmp_path, name="batch-small",
            environment={"A": -1.0, "B": 0.5, "Q": -1.0, "R": -1.0,
                         "sigma": 0.1, "beta": 3.0},
            dt=0.1, sizes=[4, 256], iterations=4, repetitions=2)
        out = tmp_path / "out"
        assert main(["batch-sweep", str(config), "--out", str(out)]) == 0
        text = (out / "results.csv").read_text()
        assert ",failed,1.0," in text

    def test_atlas(self, tmp_path):
        out = tmp_path / "atlas"
        assert main(["atlas", str(CONFIG_DIR / "atlas_1d.json"),
                     "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["aggregates"]["shape_checks"]["phibe1_zero_at_beta0"] is True


class TestOracleCommand:
    def test_prints_closed_forms(self, capsys):
        code = main(["oracle", "--A", "1", "--B", "1", "--Q", "-1", "--R", "-1",
                     "--dt", "2"])
        assert code == 0
        out = capsys.readouterr().out
        assert "K " in out or "K =" in out.replace("  ", " ")
        assert "-2.414213562373094" in out
        assert "K_tilde" in out
        assert "-1.1444515495" in out

    def test_orders_flag(self, capsys):
        main(["oracle", "--A", "-1", "--B", "0.5", "--Q", "-1", "--R", "-1",
              "--beta", "1", "--dt", "0.1", "--orders", "1"])
        out = capsys.readouterr().out
        assert "K_hat_1" in out and "K_hat_2" not in out

    def test_bad_discount_choice_exits_two(self, capsys):
        code = main(["oracle", "--A", "1", "--B", "1", "--Q", "-1", "--R", "-1",
                     "--beta", "-1"])
        assert code == 2
        assert "config error" in capsys.readouterr().err
