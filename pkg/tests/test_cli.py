import csv
import json

import pytest

import main
from app.config import Config
from app.services import experiment

POWER3 = {"phi_family": "power", "phi_p": 3, "p": 2.5, "q": 1.5, "mesh_n": 50, "seed": 12345}


@pytest.fixture(autouse=True)
def isolated_store(tmp_path, monkeypatch):
    """Run history goes to a throwaway database."""
    monkeypatch.setattr(Config, "DATA_DIR", tmp_path / "data")
    monkeypatch.setattr(Config, "LOGS_DIR", tmp_path / "logs")
    monkeypatch.setattr(Config, "SQLALCHEMY_DATABASE_URI", f"sqlite:///{tmp_path / 'runs.db'}")


def _read_json(path):
    with open(path) as f:
        return json.load(f)


def test_no_command_prints_help(capsys):
    assert main.main([]) == 1
    assert "usage" in capsys.readouterr().out


def test_unknown_key_is_config_error(write_config):
    path = write_config(**POWER3, colour="blue")
    assert main.main(["solve", "--config", str(path)]) == 4


def test_solve_without_lambda_is_config_error(write_config):
    assert main.main(["solve", "--config", str(write_config(**POWER3))]) == 4


def test_sweep_without_range_is_config_error(write_config):
    path = write_config(**POWER3, **{"lambda": 100})
    assert main.main(["sweep", "--config", str(path)]) == 4


def test_lambda_factor_conflicts_are_config_errors(write_config):
    with_lambda = write_config(**POWER3, **{"lambda": 100}, lambda_lo=50, lambda_hi=2000, lambda_factor=2)
    assert main.main(["solve", "--config", str(with_lambda)]) == 4
    without_range = write_config(name="other.env", **POWER3, lambda_factor=2)
    assert main.main(["solve", "--config", str(without_range)]) == 4


def test_solve_at_factor_with_invalid_bracket(write_config, tmp_path):
    path = write_config(**POWER3, lambda_lo=0, lambda_hi=1, lambda_factor=2, bisect_tol=0.5)
    out = tmp_path / "factor"
    assert main.main(["solve", "--config", str(path), "--out", str(out), "--deterministic"]) == 4
    report = _read_json(out / "report.json")
    assert report["status"] == "bracket_invalid"
    assert report["lambda"] is None
    assert "lambda_hi" in report["error"]


def test_sweep_bisection_uses_run_file_settings(write_config, tmp_path, monkeypatch):
    def fake_point(self, cfg, prm, mesh):
        negative = prm.lam > 5.0
        return {"lambda": prm.lam, "min_I": -1.0 if negative else 0.0, "c": None, "certificate": False, "status": "completed"}

    captured = {}

    def fake_bisect(template, mesh, lo, hi, **kwargs):
        captured.update(kwargs, lo=lo, hi=hi)
        return 0.5 * (lo + hi), []

    monkeypatch.setattr(experiment.ExperimentRunner, "_sweep_point", fake_point)
    monkeypatch.setattr(experiment, "find_lambda_star", fake_bisect)
    path = write_config(
        **POWER3,
        lambda_lo=1,
        lambda_hi=9,
        lambda_count=3,
        lambda_bisect="true",
        tol=1e-5,
        max_iter=77,
        bisect_tol=0.25,
    )
    out = tmp_path / "sweep"
    assert main.main(["sweep", "--config", str(path), "--out", str(out), "--deterministic"]) == 0
    assert (captured["tol"], captured["max_iter"], captured["bisect_tol"]) == (1e-5, 77, 0.25)
    assert (captured["lo"], captured["hi"]) == (5.0, 9.0)
    assert _read_json(out / "sweep.json")["lambda_star_est"] == 7.0


def test_indices(write_config, tmp_path, capsys):
    out = tmp_path / "indices"
    assert main.main(["indices", "--config", str(write_config(**POWER3)), "--out", str(out)]) == 0
    report = _read_json(out / "indices.json")
    assert report["phi0"] == pytest.approx(3.0)
    assert report["phi0_hi"] == pytest.approx(3.0)
    assert report["sqrt_convex"] is True
    assert report["delta2_passed"] is True
    assert report["lambda1"] > 0.0
    assert "phi0 (lower index)" in capsys.readouterr().out


def test_solve_sub_threshold(write_config, tmp_path):
    path = write_config(**POWER3, **{"lambda": 100})
    out = tmp_path / "solve"
    assert main.main(["solve", "--config", str(path), "--out", str(out), "--deterministic", "-v"]) == 2
    report = _read_json(out / "report.json")
    assert report["status"] == "sub_threshold"
    assert report["solutions"] == "only trivial solution"
    assert report["certificate"] is None
    assert report["I_u1"] >= -Config.SWEEP["eps_neg"]
    assert report["wall_time"] is None
    assert "output_dir" not in report["config"]
    for name in ("u1.csv", "mesh_nodes.csv", "mesh_elements.csv", "run.log"):
        assert (out / name).exists()
    assert not (out / "u2.csv").exists()


def test_verify(write_config, tmp_path, monkeypatch):
    monkeypatch.setitem(Config.VERIFY, "young_pairs", 2000)
    monkeypatch.setitem(Config.VERIFY, "convexity_pairs", 2000)
    monkeypatch.setitem(Config.VERIFY, "flux_trials", 5000)
    monkeypatch.setitem(Config.VERIFY, "sandwich_fields", 10)
    monkeypatch.setitem(Config.VERIFY, "gradient_fields", 4)
    path = write_config(**{**POWER3, "mesh_n": 32})
    out = tmp_path / "verify"
    assert main.main(["verify", "--config", str(path), "--out", str(out)]) == 0
    report = _read_json(out / "verify.json")
    assert report["passed"] is True
    assert {"young_inequality", "gradient_consistency_J"} <= {p["name"] for p in report["properties"]}


def test_history_and_export(write_config, tmp_path, capsys):
    path = write_config(**POWER3, **{"lambda": 100})
    assert main.main(["solve", "--config", str(path), "--deterministic"]) == 2
    capsys.readouterr()

    assert main.main(["history", "-c", "solve"]) == 0
    history = capsys.readouterr().out
    assert "sub_threshold" in history
    assert "power(p=3)" in history

    exported = tmp_path / "run1.json"
    assert main.main(["export", "--run", "1", "-o", str(exported)]) == 0
    run = _read_json(exported)
    assert run["command"] == "solve"
    assert run["exit_code"] == 2
    assert run["report"]["status"] == "sub_threshold"

    exported_csv = tmp_path / "run1.csv"
    assert main.main(["export", "--run", "1", "-f", "csv", "-o", str(exported_csv)]) == 0
    with open(exported_csv) as f:
        rows = list(csv.DictReader(f))
    assert rows[0]["status"] == "sub_threshold"
    assert float(rows[0]["lambda"]) == 100.0


def test_export_missing_run(tmp_path):
    assert main.main(["export", "--run", "42", "-o", str(tmp_path / "x.json")]) == 1


def test_history_empty(capsys):
    assert main.main(["history"]) == 0
    assert "No runs recorded yet" in capsys.readouterr().out


@pytest.mark.slow
def test_solve_certificate_is_reproducible(write_config, tmp_path):
    path = write_config(**{**POWER3, "mesh_n": 200, "lambda": 500})
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main.main(["solve", "--config", str(path), "--out", str(out), "--deterministic"]) == 0
        outputs.append(out)
    report = _read_json(outputs[0] / "report.json")
    assert report["status"] == "certificate"
    assert report["certificate"]["passed"] is True
    assert report["I_u1"] < 0.0 < report["J_u2"]
    assert (outputs[0] / "u2.csv").exists()
    assert (outputs[0] / "path_energies.csv").exists()
    for name in ("report.json", "u1.csv", "u2.csv"):
        assert (outputs[0] / name).read_bytes() == (outputs[1] / name).read_bytes()


@pytest.mark.slow
def test_sweep_rows_sorted(write_config, tmp_path):
    path = write_config(
        **{**POWER3, "mesh_n": 100},
        lambda_lo=100,
        lambda_hi=700,
        lambda_count=3,
    )
    out = tmp_path / "sweep"
    assert main.main(["sweep", "--config", str(path), "--out", str(out), "--workers", "2", "--deterministic"]) == 0
    report = _read_json(out / "sweep.json")
    assert [row["lambda"] for row in report["rows"]] == [100.0, 400.0, 700.0]
    assert report["rows"][0]["status"] == "sub_threshold"
    assert report["rows"][-1]["certificate"] is True
    assert report["indicator_monotone"] is True
    with open(out / "sweep.csv") as f:
        assert f.readline().strip() == "lambda,min_I,c,certificate,status"


@pytest.mark.slow
def test_solve_at_twice_the_bisected_threshold(write_config, tmp_path):
    path = write_config(**{**POWER3, "mesh_n": 200}, lambda_lo=50, lambda_hi=2000, lambda_factor=2, bisect_tol=1)
    out = tmp_path / "factor"
    assert main.main(["solve", "--config", str(path), "--out", str(out), "--deterministic"]) == 0
    report = _read_json(out / "report.json")
    assert 50.0 < report["lambda_star_est"] < 2000.0
    assert report["lambda"] == pytest.approx(2.0 * report["lambda_star_est"])
    assert report["bisection"][0]["negative"] is False
    assert report["certificate"]["passed"] is True
    assert report["mesh"]["n_elements"] == 200
