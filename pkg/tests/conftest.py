import numpy as np
import pytest

from app import create_app
from app.config import Config
from app.extensions import db
from app.services.mesh import build_mesh_1d, build_mesh_rect_2d
from app.services.young import Family, PhiSpec, YoungPair

SEED = 12345

# One representative of each family, all with t -> Φ(√t) convex.
PHI_SPECS = {
    "power2": PhiSpec(Family.POWER, 2.0),
    "power3": PhiSpec(Family.POWER, 3.0),
    "log_power_2_1": PhiSpec(Family.LOG_POWER, 2.0, 1.0),
    "power_over_log_3": PhiSpec(Family.POWER_OVER_LOG, 3.0),
}

_PAIRS = {}


def pair_for(name: str) -> YoungPair:
    """Shared YoungPair per family so the Φ tables are built once per session."""
    if name not in _PAIRS:
        _PAIRS[name] = YoungPair(PHI_SPECS[name])
    return _PAIRS[name]


@pytest.fixture(params=sorted(PHI_SPECS))
def any_pair(request):
    return pair_for(request.param)


@pytest.fixture
def power2():
    return pair_for("power2")


@pytest.fixture
def power3():
    return pair_for("power3")


@pytest.fixture
def log_power():
    return pair_for("log_power_2_1")


@pytest.fixture
def rng():
    return np.random.default_rng(SEED)


@pytest.fixture
def mesh_1d():
    return build_mesh_1d(64)


@pytest.fixture
def mesh_2d():
    return build_mesh_rect_2d(6, 5)


@pytest.fixture
def app(tmp_path, monkeypatch):
    monkeypatch.setattr(Config, "DATA_DIR", tmp_path / "data")
    monkeypatch.setattr(Config, "LOGS_DIR", tmp_path / "logs")
    app = create_app(
        {
            "TESTING": True,
            "SQLALCHEMY_DATABASE_URI": f"sqlite:///{tmp_path / 'runs.db'}",
        },
        deterministic=True,
    )
    yield app
    with app.app_context():
        db.session.remove()
        db.drop_all()


@pytest.fixture
def write_config(tmp_path):
    """Write a KEY=VALUE run file; output_dir defaults to tmp_path/out."""

    def _write(name="run.env", **values):
        values.setdefault("output_dir", str(tmp_path / "out"))
        path = tmp_path / name
        path.write_text("".join(f"{k}={v}\n" for k, v in values.items()))
        return path

    return _write
