"""Command-line driver: configuration, commands, exit codes and file handling."""

import csv
import json
from pathlib import Path

import pytest

from multicurve.cli import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_NUMERICAL,
    EXIT_OK,
    RunConfig,
    dumps_json,
    load_config,
    main,
)
from multicurve.errors import ConfigError, InvalidConfig
from multicurve.pricing import fair_rate_risky

EXAMPLE = Path(__file__).resolve().parents[1] / "configs" / "example.json"

SMALL_SIM = {"n_paths": 2000, "n_steps_per_year": 8, "seed": 7, "scheme": "exact"}


def base_config(**overrides) -> dict:
    data = json.loads(EXAMPLE.read_text())
    data["simulation"] = dict(SMALL_SIM)
    data.update(overrides)
    return data


def write_config(tmp_path: Path, data: dict, name: str = "config.json") -> Path:
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


def run_cli(tmp_path: Path, command: str, data: dict, *extra: str, out: str = "out") -> tuple[int, Path]:
    cfg = write_config(tmp_path, data)
    target = tmp_path / out
    code = main([command, "--config", str(cfg), "--out", str(target), *extra])
    return code, target


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_example_loads(self):
        config = load_config(EXAMPLE)
        assert config.model.kappa == 0.5
        assert len(config.fra) == 3 and len(config.caplet) == 2

    def test_round_trip(self):
        config = load_config(EXAMPLE)
        assert RunConfig.from_dict(config.to_dict()) == config

    @pytest.mark.parametrize("mutate", [
        lambda d: d.update(extra=1),
        lambda d: d["model"].update(rho=0.1),
        lambda d: d["simulation"].update(antithetic=True),
        lambda d: d["fra"][0].update(notional=1.0),
        lambda d: d["calibration"].update(weights=[1, 1, 1]),
        lambda d: d["output"].update(format="xlsx"),
        lambda d: d.pop("model"),
        lambda d: d["fra"][0].pop("K"),
        lambda d: d["bond"].update(maturities="1,2"),
    ])
    def test_invalid_rejected(self, mutate):
        data = base_config()
        mutate(data)
        with pytest.raises(ConfigError):
            RunConfig.from_dict(data)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(InvalidConfig):
            load_config(path)

    def test_json_numbers_round_trip(self):
        values = [0.1, 1 / 3, 1e-300, 12345.678901234567]
        assert json.loads(dumps_json(values)) == values
        assert json.loads(dumps_json({"x": float("nan")})) == {"x": None}


class TestCommands:
    def test_bond(self, tmp_path):
        code, out = run_cli(tmp_path, "bond", base_config())
        assert code == EXIT_OK
        rows = read_csv(out / "bond.csv")
        assert float(rows[0]["T"]) == 0.0
        assert float(rows[0]["p"]) == 1.0 and float(rows[0]["pbar"]) == 1.0
        for row in rows:
            assert 0 < float(row["pbar"]) <= float(row["p"]) <= 1.0

    def test_bond_zero_kappa_and_maturity_flag(self, tmp_path):
        data = base_config()
        data["model"]["kappa"] = 0.0
        code, out = run_cli(tmp_path, "bond", data, "--maturities", "1", "3")
        assert code == EXIT_OK
        rows = read_csv(out / "bond.csv")
        assert [float(r["T"]) for r in rows] == [1.0, 3.0]
        assert all(float(r["spread"]) > 0 for r in rows)

    def test_fra_zero_kappa(self, tmp_path):
        data = base_config()
        data["model"]["kappa"] = 0.0
        code, out = run_cli(tmp_path, "fra", data)
        assert code == EXIT_OK
        for row in read_csv(out / "fra.csv"):
            assert float(row["corr_exponential"]) == 1.0
            assert float(row["adjustment"]) >= 1.0
            assert float(row["K_risky"]) >= float(row["K_single"])

    def test_fair_strike_fra_is_worthless(self, tmp_path):
        config = load_config(EXAMPLE)
        state = config.model.initial_state()
        K = fair_rate_risky(state, 1.0, 0.5, config.model)
        data = base_config(fra=[{"T": 1.0, "Delta": 0.5, "K": K}])
        code, out = run_cli(tmp_path, "fra", data, "--mc")
        assert code == EXIT_OK
        row = read_csv(out / "fra.csv")[0]
        assert abs(float(row["value"])) < 1e-14
        assert row["mc_flag"] == "PASS"

    def test_fra_json_format(self, tmp_path):
        code, out = run_cli(tmp_path, "fra", base_config(), "--format", "json")
        assert code == EXIT_OK
        rows = json.loads((out / "fra.json").read_text())
        assert len(rows) == 3
        assert rows[0]["nu_bar"] == pytest.approx(
            rows[0]["nu_single"] * rows[0]["adjustment"] * rows[0]["corr_exponential"], rel=1e-15)

    def test_caplet(self, tmp_path):
        code, out = run_cli(tmp_path, "caplet", base_config(), "--mc")
        assert code == EXIT_OK
        rows = read_csv(out / "caplet.csv")
        assert [r["method"] for r in rows] == ["fourier", "fourier"]
        assert all(float(r["price"]) > 0 for r in rows)
        assert all(r["mc_flag"] == "PASS" for r in rows)

    def test_simulate(self, tmp_path):
        code, out = run_cli(tmp_path, "simulate", base_config())
        assert code == EXIT_OK
        report = json.loads((out / "simulate.json").read_text())
        assert report["seed"] == 7 and report["n_paths"] == 2000
        assert {b["flag"] for b in report["bonds"].values()} == {"PASS"}
        assert (out / "paths.csv").read_text().startswith("# seed,7")

    def test_calibrate_from_truth(self, tmp_path):
        data = base_config()
        data["calibration"]["initial_guess"] = None
        code, out = run_cli(tmp_path, "calibrate", data)
        assert code == EXIT_OK
        report = json.loads((out / "calibration.json").read_text())
        assert report["max_fra_rate_error"] < 1e-8 and report["max_zcb_log_price_error"] < 1e-8
        assert report["kappa_true"] == 0.5
        assert (out / "quotes.csv").exists()

    def test_calibrate_reads_quotes_file(self, tmp_path):
        data = base_config()
        data["calibration"]["initial_guess"] = None
        code, first = run_cli(tmp_path, "calibrate", data, "--format", "json", out="first")
        assert code == EXIT_OK
        data["calibration"]["quotes_file"] = str(first / "quotes.json")
        code, second = run_cli(tmp_path, "calibrate", data, "--format", "json", out="second")
        assert code == EXIT_OK
        report = json.loads((second / "calibration.json").read_text())
        assert "kappa_true" not in report
        assert (second / "quotes.json").read_text() == (first / "quotes.json").read_text()


class TestExitCodes:
    def test_unknown_key(self, tmp_path, capsys):
        code, out = run_cli(tmp_path, "bond", base_config(surprise=True))
        assert code == EXIT_CONFIG
        err = capsys.readouterr().err.strip().splitlines()
        assert len(err) == 1 and err[0].startswith("error: InvalidConfig:")
        assert not out.exists()

    def test_invalid_model(self, tmp_path):
        data = base_config()
        data["model"]["factor2"]["sigma"] = 1.0  # Feller condition fails
        code, _ = run_cli(tmp_path, "bond", data)
        assert code == EXIT_CONFIG

    def test_missing_config(self, tmp_path):
        assert main(["bond", "--config", str(tmp_path / "nope.json")]) == EXIT_IO

    def test_missing_quotes_file(self, tmp_path):
        data = base_config()
        data["calibration"]["quotes_file"] = str(tmp_path / "missing.csv")
        code, out = run_cli(tmp_path, "calibrate", data)
        assert code == EXIT_IO
        assert not out.exists() or not any(out.iterdir())

    def test_damping_outside_strip(self, tmp_path):
        code, out = run_cli(tmp_path, "caplet", base_config(), "--damping", "5000")
        assert code == EXIT_NUMERICAL
        assert not out.exists() or not any(out.iterdir())

    def test_no_trades(self, tmp_path):
        code, _ = run_cli(tmp_path, "fra", base_config(fra=[]))
        assert code == EXIT_CONFIG

    def test_failure_keeps_previous_outputs(self, tmp_path):
        code, out = run_cli(tmp_path, "caplet", base_config())
        assert code == EXIT_OK
        before = (out / "caplet.csv").read_bytes()
        code, _ = run_cli(tmp_path, "caplet", base_config(), "--damping", "5000")
        assert code == EXIT_NUMERICAL
        assert (out / "caplet.csv").read_bytes() == before
        assert sorted(p.name for p in out.iterdir()) == ["caplet.csv"]


class TestReproducibility:
    @pytest.mark.parametrize("command", ["bond", "fra", "caplet", "simulate"])
    def test_byte_identical_reruns(self, tmp_path, command):
        data = base_config()
        _, a = run_cli(tmp_path, command, data, "--mc", out="a") if command in ("fra", "caplet") \
            else run_cli(tmp_path, command, data, out="a")
        _, b = run_cli(tmp_path, command, data, "--mc", out="b") if command in ("fra", "caplet") \
            else run_cli(tmp_path, command, data, out="b")
        names = sorted(p.name for p in a.iterdir())
        assert names == sorted(p.name for p in b.iterdir())
        for name in names:
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_thread_count_invariant(self, tmp_path):
        data = base_config()
        data["simulation"]["chunk_size"] = 512
        _, a = run_cli(tmp_path, "simulate", data, "--jobs", "1", out="a")
        _, b = run_cli(tmp_path, "simulate", data, "--jobs", "3", out="b")
        assert (a / "paths.csv").read_bytes() == (b / "paths.csv").read_bytes()
        assert (a / "simulate.json").read_bytes() == (b / "simulate.json").read_bytes()

    def test_seed_flag_changes_output(self, tmp_path):
        _, a = run_cli(tmp_path, "simulate", base_config(), "--seed", "1", out="a")
        _, b = run_cli(tmp_path, "simulate", base_config(), "--seed", "2", out="b")
        assert (a / "paths.csv").read_bytes() != (b / "paths.csv").read_bytes()

    def test_module_entry_point(self, tmp_path):
        import subprocess
        import sys

        cfg = write_config(tmp_path, base_config())
        proc = subprocess.run([sys.executable, "-m", "multicurve", "bond", "--config", str(cfg),
                               "--out", str(tmp_path / "o")], capture_output=True, text=True)
        assert proc.returncode == EXIT_OK
        assert proc.stdout.strip().endswith("bond.csv")
