import pytest

from app.extensions import db
from app.models import Run
from app.run_config import load_config
from app.services.properties import PropertyResult
from app.services.run_service import (
    get_run,
    list_runs,
    record_property_checks,
    record_run,
    record_sweep_points,
)


@pytest.fixture
def cfg(write_config):
    return load_config(write_config(phi_family="power", phi_p=3, p=2.5, q=1.5, **{"lambda": 4500}))


def _report(**extra):
    report = {
        "lambda": 4500.0,
        "I_u1": -12.5,
        "J_u2": 3.25,
        "residual_u1": 1e-8,
        "residual_u2": 2e-8,
        "certificate": {"passed": True, "checks": {}},
        "status": "certificate",
    }
    report.update(extra)
    return report


def test_record_and_get_run(app, cfg):
    with app.app_context():
        run_id = record_run("solve", cfg, _report(), 0, "certificate")
        run = get_run(run_id)
    assert run["command"] == "solve"
    assert run["phi"] == cfg.phi.label()
    assert run["config_digest"] == cfg.digest()
    assert run["certificate"] is True
    assert run["I_u1"] == -12.5
    assert run["c"] == 3.25
    assert run["exit_code"] == 0
    assert run["report"]["status"] == "certificate"
    assert run["sweep"] == [] and run["properties"] == []


def test_certificate_none_for_sub_threshold(app, cfg):
    with app.app_context():
        run_id = record_run("solve", cfg, _report(certificate=None, J_u2=None), 2, "sub_threshold")
        stored = db.session.get(Run, run_id)
        assert stored.certificate is None
        assert stored.level_c is None


def test_get_missing_run(app):
    with app.app_context():
        assert get_run(999) is None


def test_sweep_points_sorted_by_lambda(app, cfg):
    rows = [
        {"lambda": 4500.0, "min_I": -3.0, "c": 1.0, "certificate": True, "status": "completed"},
        {"lambda": 100.0, "min_I": 0.0, "c": None, "certificate": False, "status": "sub_threshold"},
    ]
    with app.app_context():
        run_id = record_run("sweep", cfg, {"lambda_star_est": 2000.0}, 0)
        assert record_sweep_points(run_id, rows) == 2
        run = get_run(run_id)
    assert [p["lambda"] for p in run["sweep"]] == [100.0, 4500.0]
    assert run["sweep"][0]["c"] is None
    assert run["lambda_star_est"] == 2000.0


def test_property_checks(app, cfg):
    results = [
        PropertyResult("young_inequality", "power(p=3)", 0.0, True),
        PropertyResult("delta2", "power(p=3)", -1.0, False),
    ]
    with app.app_context():
        run_id = record_run("verify", cfg, {}, 0)
        record_property_checks(run_id, results)
        run = get_run(run_id)
    assert [c["name"] for c in run["properties"]] == ["young_inequality", "delta2"]
    assert run["properties"][1]["passed"] is False


def test_list_runs_newest_first_and_filtered(app, cfg):
    with app.app_context():
        first = record_run("indices", cfg, {}, 0)
        second = record_run("solve", cfg, _report(), 0)
        third = record_run("solve", cfg, _report(), 3, "certificate_failed")
        ids = [r["id"] for r in list_runs()]
        solves = list_runs(command="solve")
        limited = list_runs(limit=1)
    assert ids[:3] == [third, second, first]
    assert {r["id"] for r in solves} == {second, third}
    assert len(limited) == 1
