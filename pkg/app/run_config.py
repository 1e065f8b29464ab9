"""Experiment configuration read from flat KEY=VALUE files.

Example::

    phi_family=power
    phi_p=3
    p=2.5
    q=1.5
    lambda=4000
    mesh_dim=1
    mesh_n=200
    seed=12345

Without ``lambda``, ``lambda_factor`` solves at that multiple of the
threshold bisected in [lambda_lo, lambda_hi] to within ``bisect_tol``.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

from dotenv import dotenv_values

from app.config import Config
from app.services.assembly import ProblemParams
from app.services.mesh import QUADRATURE_MODES, Mesh, build_mesh
from app.services.young import Family, PhiSpec, YoungPair

logger = logging.getLogger(__name__)

KNOWN_KEYS = {
    "phi_family", "phi_p", "phi_s", "p", "q",
    "lambda", "lambda_lo", "lambda_hi", "lambda_count", "lambda_bisect", "lambda_factor", "bisect_tol",
    "mesh_dim", "mesh_n", "mesh_nx", "mesh_ny",
    "tol", "max_iter", "n_path", "seed", "output_dir", "nominal_n", "quadrature",
    "workers",
}


class ConfigError(Exception):
    def __init__(self, key: str, line: Optional[int], message: str):
        self.key = key
        self.line = line
        where = f"line {line}, " if line else ""
        super().__init__(f"{where}key '{key}': {message}")


@dataclass
class SweepSpec:
    lo: float
    hi: float
    count: int = Config.SWEEP["count"]
    bisect: bool = False


@dataclass
class RunConfig:
    phi: PhiSpec
    p: float
    q: float
    lam: Optional[float] = None
    sweep: Optional[SweepSpec] = None
    lambda_factor: Optional[float] = None
    bisect_tol: float = Config.SWEEP["bisect_tol"]
    mesh_dim: int = 1
    mesh_n: int = 200
    mesh_nx: Optional[int] = None
    mesh_ny: Optional[int] = None
    tol: float = Config.SOLVER["tol"]
    max_iter: int = Config.SOLVER["max_iter"]
    n_path: int = Config.SOLVER["n_path"]
    seed: int = Config.SOLVER["seed"]
    output_dir: Path = Config.OUTPUT_DIR
    nominal_n: int = Config.SOLVER["nominal_n"]
    quadrature: str = Config.SOLVER["quadrature"]
    workers: int = Config.SWEEP["workers"]
    source: Optional[Path] = field(default=None, compare=False)

    # ── Derived objects ─────────────────────────────────────────

    def pair(self) -> YoungPair:
        return YoungPair(self.phi)

    def mesh(self) -> Mesh:
        return build_mesh(self.mesh_dim, n=self.mesh_n, nx=self.mesh_nx, ny=self.mesh_ny)

    def problem(self, pair: YoungPair = None, lam: float = None) -> ProblemParams:
        lam = self.lam if lam is None else lam
        if lam is None:
            raise ConfigError("lambda", line_of_key(self.source, "lambda"), "a fixed lambda is required")
        try:
            return ProblemParams(
                lam=lam,
                p_exp=self.p,
                q_exp=self.q,
                pair=pair or self.pair(),
                nominal_n=self.nominal_n,
                quadrature=self.quadrature,
            )
        except ValueError as e:
            raise ConfigError("p", line_of_key(self.source, "p"), str(e)) from e

    def with_overrides(self, seed: int = None, output_dir: str = None, workers: int = None) -> "RunConfig":
        changes = {}
        if seed is not None:
            changes["seed"] = seed
        if output_dir is not None:
            changes["output_dir"] = Path(output_dir)
        if workers is not None:
            changes["workers"] = workers
        return replace(self, **changes) if changes else self

    def to_dict(self) -> dict:
        data = asdict(self)
        data["phi"] = self.phi.to_config()
        data["output_dir"] = str(self.output_dir)
        data.pop("source", None)
        return data

    def digest(self) -> str:
        """Stable hash of the settings that determine the numerical output."""
        data = self.to_dict()
        data.pop("output_dir", None)
        data.pop("workers", None)
        blob = json.dumps(data, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def line_of_key(path: Optional[Path], key: str) -> Optional[int]:
    if path is None or not Path(path).exists():
        return None
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, 1):
            stripped = line.strip()
            if stripped.startswith("export "):
                stripped = stripped[len("export "):]
            if stripped.split("=", 1)[0].strip().lower() == key:
                return number
    return None


def load_config(path) -> RunConfig:
    """Parse and validate a run configuration file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", None, f"file not found: {path}")
    raw = {k.strip().lower(): v for k, v in dotenv_values(path).items()}

    def fail(key, message):
        raise ConfigError(key, line_of_key(path, key), message)

    for key in raw:
        if key not in KNOWN_KEYS:
            fail(key, "unknown key")

    def get(key, cast, default=None, required=False):
        value = raw.get(key)
        if value is None or value == "":
            if required:
                fail(key, "missing required value")
            return default
        try:
            return cast(value)
        except (TypeError, ValueError):
            fail(key, f"cannot parse {value!r} as {cast.__name__}")

    def boolean(value):
        lowered = str(value).strip().lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ValueError(value)

    boolean.__name__ = "bool"

    family = get("phi_family", str, required=True).strip().lower()
    if family not in {f.value for f in Family}:
        fail("phi_family", f"must be one of {', '.join(f.value for f in Family)}")
    try:
        phi = PhiSpec(Family(family), get("phi_p", float, required=True), get("phi_s", float))
    except ValueError as e:
        fail("phi_p" if "p_exp" in str(e) else "phi_s", str(e))

    sweep = None
    if "lambda_lo" in raw or "lambda_hi" in raw:
        lo = get("lambda_lo", float, required=True)
        hi = get("lambda_hi", float, required=True)
        if not 0.0 <= lo < hi:
            fail("lambda_hi", f"need 0 <= lambda_lo < lambda_hi, got {lo}, {hi}")
        count = get("lambda_count", int, Config.SWEEP["count"])
        if count < 2:
            fail("lambda_count", "need at least 2 sweep points")
        sweep = SweepSpec(lo, hi, count, get("lambda_bisect", boolean, False))

    lam = get("lambda", float)
    if lam is not None and lam < 0.0:
        fail("lambda", "must be >= 0")
    lambda_factor = get("lambda_factor", float)
    if lambda_factor is not None:
        if lambda_factor <= 0.0:
            fail("lambda_factor", "must be positive")
        if lam is not None:
            fail("lambda_factor", "cannot be combined with a fixed lambda")
        if sweep is None:
            fail("lambda_factor", "needs lambda_lo and lambda_hi to bracket the threshold")
    bisect_tol = get("bisect_tol", float, Config.SWEEP["bisect_tol"])
    if bisect_tol <= 0.0:
        fail("bisect_tol", "must be positive")

    mesh_dim = get("mesh_dim", int, 1)
    if mesh_dim not in (1, 2):
        fail("mesh_dim", "must be 1 or 2")
    mesh_n = get("mesh_n", int, 200 if mesh_dim == 1 else 16)
    for key, value in (("mesh_n", mesh_n), ("mesh_nx", get("mesh_nx", int)), ("mesh_ny", get("mesh_ny", int))):
        if value is not None and value < 2:
            fail(key, "must be >= 2")

    quadrature = get("quadrature", str, Config.SOLVER["quadrature"]).strip().lower()
    if quadrature not in QUADRATURE_MODES:
        fail("quadrature", f"must be one of {', '.join(QUADRATURE_MODES)}")

    cfg = RunConfig(
        phi=phi,
        p=get("p", float, required=True),
        q=get("q", float, required=True),
        lam=lam,
        sweep=sweep,
        lambda_factor=lambda_factor,
        bisect_tol=bisect_tol,
        mesh_dim=mesh_dim,
        mesh_n=mesh_n,
        mesh_nx=get("mesh_nx", int),
        mesh_ny=get("mesh_ny", int),
        tol=get("tol", float, Config.SOLVER["tol"]),
        max_iter=get("max_iter", int, Config.SOLVER["max_iter"]),
        n_path=get("n_path", int, Config.SOLVER["n_path"]),
        seed=get("seed", int, Config.SOLVER["seed"]),
        output_dir=Path(get("output_dir", str, str(Config.OUTPUT_DIR))),
        nominal_n=get("nominal_n", int, Config.SOLVER["nominal_n"]),
        quadrature=quadrature,
        workers=get("workers", int, Config.SWEEP["workers"]),
        source=path,
    )
    if not 1.0 < cfg.q < cfg.p:
        fail("q", f"need 1 < q < p, got q={cfg.q}, p={cfg.p}")
    if cfg.tol <= 0.0:
        fail("tol", "must be positive")
    if cfg.n_path < 3:
        fail("n_path", "must be >= 3")
    if cfg.workers < 1:
        fail("workers", "must be >= 1")
    logger.debug(f"Loaded config {path}: {cfg.to_dict()}")
    return cfg
