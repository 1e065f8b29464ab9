import os
from pathlib import Path

from dotenv import load_dotenv

BASE_DIR = Path(__file__).parent.parent.absolute()

load_dotenv(BASE_DIR / ".env")


def _env(key, default=None, cast=None):
    """Read an env var with optional type casting."""
    value = os.environ.get(key, default)
    if value is None:
        return None
    if cast is not None and not isinstance(value, cast):
        return cast(value)
    return value


def _env_bool(key, default="false"):
    return str(_env(key, default)).lower() in ("true", "1", "yes")


class Config:
    # Directories
    BASE_DIR = BASE_DIR
    DATA_DIR = Path(_env("DATA_DIR", str(BASE_DIR / "data")))
    LOGS_DIR = Path(_env("LOGS_DIR", str(BASE_DIR / "logs")))
    OUTPUT_DIR = Path(_env("OUTPUT_DIR", str(BASE_DIR / "runs")))

    # Database (run history)
    SQLALCHEMY_DATABASE_URI = _env(
        "DATABASE_URL",
        f"sqlite:///{BASE_DIR / 'data' / 'runs.db'}",
    )
    SQLALCHEMY_TRACK_MODIFICATIONS = False

    # Young-function machinery
    YOUNG = {
        "tol": _env("YOUNG_TOL", 1e-8, float),
        "quad_tol": _env("YOUNG_QUAD_TOL", 1e-12, float),
        "quad_limit": _env("YOUNG_QUAD_LIMIT", 200, int),
        "table_lo": _env("YOUNG_TABLE_LO", 1e-8, float),
        "table_hi": _env("YOUNG_TABLE_HI", 1e8, float),
        "table_nodes": _env("YOUNG_TABLE_NODES", 20001, int),
        "index_t_min": _env("INDEX_T_MIN", 1e-6, float),
        "index_t_max": _env("INDEX_T_MAX", 1e6, float),
        "index_samples": _env("INDEX_SAMPLES", 400, int),
        "luxemburg_rtol": _env("LUXEMBURG_RTOL", 1e-13, float),
    }

    # Discrete solver. tol bounds the residual over max(1, load scale),
    # step_tol the last update over max(1, sup |u|).
    SOLVER = {
        "tol": _env("SOLVER_TOL", 1e-6, float),
        "max_iter": _env("SOLVER_MAX_ITER", 4000, int),
        "n_path": _env("SOLVER_N_PATH", 21, int),
        "seed": _env("SOLVER_SEED", 12345, int),
        "armijo_c": _env("SOLVER_ARMIJO_C", 1e-4, float),
        "armijo_shrink": _env("SOLVER_ARMIJO_SHRINK", 0.5, float),
        "max_backtracks": _env("SOLVER_MAX_BACKTRACKS", 40, int),
        "step_tol": _env("SOLVER_STEP_TOL", 1e-10, float),
        "energy_rtol": _env("SOLVER_ENERGY_RTOL", 1e-12, float),
        "witness_ladder": _env("SOLVER_WITNESS_LADDER", 120, int),
        "nominal_n": _env("SOLVER_NOMINAL_N", 3, int),
        "quadrature": _env("SOLVER_QUADRATURE", "gauss"),
    }

    # Lambda sweeps and the discrete threshold
    SWEEP = {
        "count": _env("SWEEP_COUNT", 8, int),
        "bisect_tol": _env("SWEEP_BISECT_TOL", 1e-2, float),
        "eps_neg": _env("SWEEP_EPS_NEG", 1e-6, float),
        "workers": _env("SWEEP_WORKERS", 1, int),
    }

    # Property suite sizes
    VERIFY = {
        "young_pairs": _env("VERIFY_YOUNG_PAIRS", 10000, int),
        "convexity_pairs": _env("VERIFY_CONVEXITY_PAIRS", 10000, int),
        "delta2_grid": _env("VERIFY_DELTA2_GRID", 1000, int),
        "flux_trials": _env("VERIFY_FLUX_TRIALS", 100000, int),
        "sandwich_fields": _env("VERIFY_SANDWICH_FIELDS", 100, int),
        "gradient_fields": _env("VERIFY_GRADIENT_FIELDS", 20, int),
    }

    DETERMINISTIC = _env_bool("DETERMINISTIC", "false")

    # Logging
    LOG_FORMAT = _env(
        "LOG_FORMAT", "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )
    LOG_LEVEL = _env("LOG_LEVEL", "INFO")
