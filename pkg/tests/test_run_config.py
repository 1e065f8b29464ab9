from pathlib import Path

import pytest

from app.run_config import ConfigError, RunConfig, SweepSpec, line_of_key, load_config
from app.services.young import Family, PhiSpec

BASE = {"phi_family": "power", "phi_p": 3, "p": 2.5, "q": 1.5}


def test_load_minimal_config(write_config, tmp_path):
    cfg = load_config(write_config(**BASE, **{"lambda": 4500}))
    assert cfg.phi == PhiSpec(Family.POWER, 3.0)
    assert (cfg.p, cfg.q, cfg.lam) == (2.5, 1.5, 4500.0)
    assert cfg.mesh_dim == 1 and cfg.mesh_n == 200
    assert cfg.sweep is None
    assert cfg.output_dir == tmp_path / "out"


def test_load_sweep_and_mesh(write_config):
    cfg = load_config(
        write_config(
            **BASE,
            lambda_lo=100,
            lambda_hi=4500,
            lambda_count=5,
            lambda_bisect="true",
            mesh_dim=2,
            mesh_nx=8,
            mesh_ny=6,
            quadrature="Gauss",
        )
    )
    assert cfg.sweep == SweepSpec(100.0, 4500.0, 5, True)
    assert cfg.mesh_n == 16
    assert cfg.quadrature == "gauss"
    mesh = cfg.mesh()
    assert mesh.dim == 2 and mesh.n_nodes == 9 * 7


def test_load_threshold_factor(write_config):
    cfg = load_config(write_config(**BASE, lambda_lo=50, lambda_hi=2000, lambda_factor=2, bisect_tol=1))
    assert cfg.lam is None
    assert (cfg.lambda_factor, cfg.bisect_tol) == (2.0, 1.0)
    assert cfg.sweep.lo == 50.0 and cfg.sweep.hi == 2000.0
    assert cfg.quadrature == "gauss"


def test_comments_and_export_prefix(tmp_path):
    path = tmp_path / "run.env"
    path.write_text("# power law\nexport phi_family=log_power\nphi_p=3\nphi_s=1\np=2.5\nq=1.5\n")
    cfg = load_config(path)
    assert cfg.phi == PhiSpec(Family.LOG_POWER, 3.0, 1.0)
    assert line_of_key(path, "phi_family") == 2


@pytest.mark.parametrize(
    "values, key, line",
    [
        ({**BASE, "mesh_dim": 3}, "mesh_dim", 5),
        ({**BASE, "colour": "blue"}, "colour", 5),
        ({"phi_family": "power", "phi_p": 3, "q": 1.5}, "p", None),
        ({**BASE, "phi_family": "cubic"}, "phi_family", 1),
        ({**BASE, "phi_p": 1.0}, "phi_p", 2),
        ({**BASE, "phi_family": "log_power"}, "phi_s", None),
        ({**BASE, "q": 2.6}, "q", 4),
        ({**BASE, "lambda": -1}, "lambda", 5),
        ({**BASE, "lambda": "lots"}, "lambda", 5),
        ({**BASE, "lambda_lo": 50, "lambda_hi": 2000, "lambda_factor": 0}, "lambda_factor", 7),
        ({**BASE, "lambda_lo": 50, "lambda_hi": 2000, "bisect_tol": -1}, "bisect_tol", 7),
        ({**BASE, "lambda_lo": 10, "lambda_hi": 5}, "lambda_hi", 6),
        ({**BASE, "lambda_lo": 10}, "lambda_hi", None),
        ({**BASE, "lambda_lo": 1, "lambda_hi": 5, "lambda_count": 1}, "lambda_count", 7),
        ({**BASE, "n_path": 2}, "n_path", 5),
        ({**BASE, "quadrature": "simpson"}, "quadrature", 5),
        ({**BASE, "workers": 0}, "workers", 5),
    ],
)
def test_config_errors_name_key_and_line(write_config, values, key, line):
    with pytest.raises(ConfigError) as excinfo:
        load_config(write_config(**values))
    assert excinfo.value.key == key
    assert excinfo.value.line == line
    assert key in str(excinfo.value)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError) as excinfo:
        load_config(tmp_path / "nope.env")
    assert excinfo.value.line is None


def test_problem_requires_lambda(write_config):
    cfg = load_config(write_config(**BASE))
    with pytest.raises(ConfigError) as excinfo:
        cfg.problem()
    assert excinfo.value.key == "lambda"
    assert cfg.problem(lam=10.0).lam == 10.0


def test_problem_rejects_exponent_above_index(write_config):
    cfg = load_config(write_config(**{**BASE, "phi_p": 2.2, "lambda": 1}))
    with pytest.raises(ConfigError) as excinfo:
        cfg.problem()
    assert excinfo.value.key == "p"
    assert excinfo.value.line == 3


def test_overrides(write_config):
    cfg = load_config(write_config(**BASE, seed=1))
    assert cfg.with_overrides() is cfg
    other = cfg.with_overrides(seed=7, output_dir="elsewhere", workers=3)
    assert (other.seed, other.output_dir, other.workers) == (7, Path("elsewhere"), 3)
    assert cfg.seed == 1


def test_digest_ignores_output_dir_and_workers(write_config):
    cfg = load_config(write_config(**BASE, **{"lambda": 4500}))
    assert cfg.with_overrides(output_dir="x", workers=8).digest() == cfg.digest()
    assert cfg.with_overrides(seed=99).digest() != cfg.digest()
    assert len(cfg.digest()) == 16


def test_to_dict_is_plain(write_config):
    data = load_config(write_config(**BASE)).to_dict()
    assert data["phi"] == PhiSpec(Family.POWER, 3.0).to_config()
    assert isinstance(data["output_dir"], str)
    assert "source" not in data


def test_run_config_defaults():
    cfg = RunConfig(phi=PhiSpec(Family.POWER, 3.0), p=2.5, q=1.5)
    assert cfg.lam is None
    assert cfg.workers >= 1
