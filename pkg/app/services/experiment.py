import csv
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.config import Config
from app.run_config import ConfigError, RunConfig, line_of_key
from app.services.assembly import (
    ProblemParams,
    assemble_energy,
    field_norms,
    scaled_residual_norm,
    weak_residual_norm,
)
from app.services.mesh import Field, Mesh, write_field_csv, write_mesh_csv
from app.services.mountain_pass import (
    GeometryFailure,
    Truncation,
    mountain_pass,
    ring_probe,
    two_solution_certificate,
)
from app.services.properties import run_property_suite
from app.services.run_service import record_property_checks, record_run, record_sweep_points
from app.services.solver import (
    BracketInvalid,
    NoConvergence,
    coercivity_probe,
    find_lambda_star,
    lambda1_estimate,
    lambda_indicator,
    minimize_energy_multistart,
)
from app.services.young import (
    delta2_ratio,
    estimate_indices,
    sqrt_convexity_check,
    sqrt_convexity_slack,
)

logger = logging.getLogger(__name__)

EXIT_CERTIFICATE = 0
EXIT_SUB_THRESHOLD = 2
EXIT_FAILURE = 3
EXIT_CONFIG = 4


class ExperimentRunner:
    """Runs the indices/solve/sweep/verify commands and stores their outputs.

    Files in one output directory are written under a per-directory lock.
    """

    def __init__(self, app=None, deterministic: bool = None):
        self.app = app
        self.deterministic = Config.DETERMINISTIC if deterministic is None else deterministic
        self._locks_guard = threading.Lock()
        self._dir_locks: Dict[str, threading.Lock] = {}

    # ── Output helpers ───────────────────────────────────────────

    def _dir_lock(self, directory: Path) -> threading.Lock:
        key = str(Path(directory).resolve())
        with self._locks_guard:
            return self._dir_locks.setdefault(key, threading.Lock())

    def _write_json(self, directory: Path, name: str, data: dict) -> Path:
        directory = Path(directory)
        with self._dir_lock(directory):
            directory.mkdir(parents=True, exist_ok=True)
            path = directory / name
            with open(path, "w") as f:
                json.dump(data, f, indent=2, sort_keys=True, default=_jsonable)
                f.write("\n")
        logger.info(f"Wrote {path}")
        return path

    def _write_rows(self, directory: Path, name: str, fieldnames: List[str], rows: List[dict]) -> Path:
        directory = Path(directory)
        with self._dir_lock(directory):
            directory.mkdir(parents=True, exist_ok=True)
            path = directory / name
            with open(path, "w", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n", extrasaction="ignore")
                writer.writeheader()
                for row in rows:
                    writer.writerow({k: _csv_value(row.get(k)) for k in fieldnames})
        logger.info(f"Wrote {len(rows)} rows to {path}")
        return path

    def _write_fields(self, directory: Path, fields: Dict[str, Field]):
        with self._dir_lock(directory):
            for name, u in fields.items():
                write_field_csv({"u": u}, Path(directory) / f"{name}.csv")

    def _write_mesh(self, directory: Path, mesh: Mesh):
        with self._dir_lock(directory):
            write_mesh_csv(mesh, directory)

    def _record(self, command: str, cfg: RunConfig, report: dict, exit_code: int, status: str, **extra):
        if self.app is None:
            return None
        with self.app.app_context():
            run_id = record_run(command, cfg, report, exit_code, status)
            if extra.get("sweep_rows"):
                record_sweep_points(run_id, extra["sweep_rows"])
            if extra.get("properties"):
                record_property_checks(run_id, extra["properties"])
        return run_id

    def _elapsed(self, start: float) -> Optional[float]:
        return None if self.deterministic else round(time.perf_counter() - start, 3)

    # ── Commands ─────────────────────────────────────────────────

    def indices(self, cfg: RunConfig) -> Tuple[dict, int]:
        start = time.perf_counter()
        pair = cfg.pair()
        phi0, phi0_hi = estimate_indices(pair)
        grid = np.geomspace(1e-3, 1e3, Config.VERIFY["delta2_grid"])
        sqrt_grid = np.geomspace(1e-4, 1e4, 2000)
        report = {
            "phi": pair.phi.to_config(),
            "phi0": phi0,
            "phi0_hi": phi0_hi,
            "delta2_ratio": delta2_ratio(pair, grid),
            "delta2_bound": 2.0**phi0_hi,
            "sqrt_convex": sqrt_convexity_check(pair, sqrt_grid),
            "sqrt_convexity_slack": sqrt_convexity_slack(pair, sqrt_grid),
            "lambda1": lambda1_estimate(pair, cfg.mesh(), rng=np.random.default_rng(cfg.seed)),
            "wall_time": self._elapsed(start),
        }
        report["delta2_passed"] = report["delta2_ratio"] <= report["delta2_bound"] + 1e-6
        self._write_json(cfg.output_dir, "indices.json", report)
        self._record("indices", cfg, report, EXIT_CERTIFICATE, "completed")
        return report, EXIT_CERTIFICATE

    def solve(self, cfg: RunConfig) -> Tuple[dict, int]:
        """Two-solution pipeline at ``lambda``, or at lambda_factor times the bisected threshold."""
        start = time.perf_counter()
        pair = cfg.pair()
        mesh = cfg.mesh()
        rng = np.random.default_rng(cfg.seed)

        threshold = None
        if cfg.lam is None and cfg.lambda_factor is not None:
            try:
                threshold = self._bisect_threshold(cfg, pair, mesh)
            except (BracketInvalid, NoConvergence) as e:
                logger.error(f"Threshold bisection failed: {e}")
                report = _base_report(cfg, cfg.problem(pair, lam=cfg.sweep.hi), mesh)
                invalid = isinstance(e, BracketInvalid)
                status = "bracket_invalid" if invalid else "no_convergence"
                report.update({"lambda": None, "status": status, "error": str(e)})
                exit_code = EXIT_CONFIG if invalid else EXIT_FAILURE
                report["wall_time"] = self._elapsed(start)
                self._write_json(cfg.output_dir, "report.json", report)
                self._record("solve", cfg, report, exit_code, status)
                return report, exit_code

        lam = cfg.lam if threshold is None else cfg.lambda_factor * threshold[0]
        prm = cfg.problem(pair, lam=lam)
        report = _base_report(cfg, prm, mesh)
        if threshold is not None:
            report.update({"lambda_star_est": threshold[0], "bisection": threshold[1]})
        logger.info(f"Solving at λ={prm.lam:g} for {pair.phi.label()}, p={cfg.p}, q={cfg.q}, mesh {mesh.describe()}")

        try:
            report, exit_code = self._solve_pipeline(cfg, prm, mesh, rng, report)
            status = report["status"]
        except (NoConvergence, GeometryFailure) as e:
            logger.error(f"Solve failed: {e}")
            status = "no_convergence" if isinstance(e, NoConvergence) else "geometry_failure"
            report.update({"status": status, "error": str(e)})
            if isinstance(e, NoConvergence):
                report["best_residual"] = e.residual
                report["best_iterations"] = e.iterations
                report["best_energy"] = e.energy
                if e.starts is not None:
                    report["starts"] = e.starts
            exit_code = EXIT_FAILURE

        report["wall_time"] = self._elapsed(start)
        self._write_json(cfg.output_dir, "report.json", report)
        self._record("solve", cfg, report, exit_code, status)
        return report, exit_code

    def _bisect_threshold(self, cfg: RunConfig, pair, mesh: Mesh) -> Tuple[float, List[dict]]:
        template = cfg.problem(pair, lam=cfg.sweep.hi)
        estimate, points = find_lambda_star(
            template,
            mesh,
            cfg.sweep.lo,
            cfg.sweep.hi,
            bisect_tol=cfg.bisect_tol,
            seed=cfg.seed,
            tol=cfg.tol,
            max_iter=cfg.max_iter,
        )
        logger.info(f"Solving at {cfg.lambda_factor:g} x λ* = {cfg.lambda_factor * estimate:.6g}")
        return estimate, points

    def _solve_pipeline(self, cfg, prm, mesh, rng, report) -> Tuple[dict, int]:
        exponents = {"L_p": cfg.p, "L_q": cfg.q}
        u1, minimum = minimize_energy_multistart(prm, mesh, rng, tol=cfg.tol, max_iter=cfg.max_iter)
        energy_u1 = minimum["energy"]
        report.update(
            {
                "I_u1": energy_u1,
                "residual_u1": scaled_residual_norm(u1, prm),
                "residual_u1_abs": weak_residual_norm(u1, prm),
                "norms_u1": field_norms(u1, prm.pair, exponents).to_dict(),
                "min_u1": float(np.min(u1.coeffs)),
                "starts": minimum["starts"],
            }
        )
        self._write_mesh(cfg.output_dir, mesh)
        self._write_fields(cfg.output_dir, {"u1": u1})

        if energy_u1 >= -Config.SWEEP["eps_neg"]:
            logger.info(f"min I = {energy_u1:.3e}: only the trivial solution at λ={prm.lam:g}")
            report.update({"status": "sub_threshold", "solutions": "only trivial solution", "certificate": None})
            return report, EXIT_SUB_THRESHOLD

        tr = Truncation(u1, prm.p_exp, prm.q_exp)
        ring = ring_probe(tr, prm, rng)
        report.update({"ring_rho": ring["rho"], "ring_level": ring["level"], "ring": ring})
        coercivity = coercivity_probe(prm, mesh, rng, truncated=tr)
        coercivity.pop("samples")
        report["coercivity"] = coercivity

        u2, c, mp = mountain_pass(tr, prm, n_path=cfg.n_path, tol=cfg.tol, max_iter=cfg.max_iter)
        self._write_fields(cfg.output_dir, {"u2": u2})
        self._write_rows(cfg.output_dir, "path_energies.csv", ["index", "t", "J"], mp["path_energies"])

        cert = two_solution_certificate(u1, u2, prm, tr, tol=cfg.tol)
        report.update(
            {
                "J_u2": c,
                "I_u2": assemble_energy(u2, prm),
                "residual_u2": scaled_residual_norm(u2, prm, tr),
                "residual_u2_abs": weak_residual_norm(u2, prm, tr),
                "norms_u2": field_norms(u2, prm.pair, exponents).to_dict(),
                "ordering": cert["ordering"],
                "mountain_pass": {k: v for k, v in mp.items() if k != "path_energies"},
                "certificate": cert,
            }
        )
        if cert["passed"]:
            report["status"] = "certificate"
            logger.info(f"Two-solution certificate holds: I(u1)={energy_u1:.6e} < 0 < c={c:.6e}")
            return report, EXIT_CERTIFICATE
        failed = [name for name, check in cert["checks"].items() if not check["passed"]]
        logger.warning(f"Certificate failed: {', '.join(failed)}")
        report["status"] = "certificate_failed"
        return report, EXIT_FAILURE

    def sweep(self, cfg: RunConfig) -> Tuple[dict, int]:
        if cfg.sweep is None:
            raise ConfigError("lambda_lo", line_of_key(cfg.source, "lambda_lo"), "sweep requires lambda_lo and lambda_hi")
        start = time.perf_counter()
        pair = cfg.pair()
        template = cfg.problem(pair, lam=cfg.sweep.hi)
        mesh = cfg.mesh()
        for mode in {cfg.quadrature, "gauss"}:
            mesh.quad_rule(mode)
        lambdas = [float(x) for x in np.linspace(cfg.sweep.lo, cfg.sweep.hi, cfg.sweep.count)]
        logger.info(f"Sweeping {len(lambdas)} λ values in [{cfg.sweep.lo:g}, {cfg.sweep.hi:g}] with {cfg.workers} workers")

        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                rows = list(pool.map(lambda lam: self._sweep_point(cfg, template.with_lambda(lam), mesh), lambdas))
        else:
            rows = [self._sweep_point(cfg, template.with_lambda(lam), mesh) for lam in lambdas]
        rows.sort(key=lambda row: row["lambda"])
        self._write_rows(cfg.output_dir, "sweep.csv", ["lambda", "min_I", "c", "certificate", "status"], rows)

        report = {
            "phi": pair.phi.to_config(),
            "p": cfg.p,
            "q": cfg.q,
            "rows": rows,
            "indicator_monotone": _monotone_indicator(rows),
            "lambda_star_est": None,
        }
        exit_code = EXIT_CERTIFICATE
        status = "completed"
        try:
            if not report["indicator_monotone"]:
                raise BracketInvalid("negative-energy indicator is not monotone across the sweep")
            if cfg.sweep.bisect:
                lo, hi = _bracket(rows)
                estimate, points = find_lambda_star(
                    template,
                    mesh,
                    lo,
                    hi,
                    bisect_tol=cfg.bisect_tol,
                    seed=cfg.seed,
                    tol=cfg.tol,
                    max_iter=cfg.max_iter,
                )
                report.update({"lambda_star_est": estimate, "bisection": points})
        except BracketInvalid as e:
            logger.error(f"Sweep bracket invalid: {e}")
            report["error"] = str(e)
            status = "bracket_invalid"
            exit_code = EXIT_CONFIG
        except NoConvergence as e:
            logger.error(f"Bisection failed: {e}")
            report["error"] = str(e)
            status = "no_convergence"
            exit_code = EXIT_FAILURE
        report["status"] = status
        report["wall_time"] = self._elapsed(start)
        self._write_json(cfg.output_dir, "sweep.json", report)
        self._record("sweep", cfg, report, exit_code, status, sweep_rows=rows)
        return report, exit_code

    def _sweep_point(self, cfg: RunConfig, prm: ProblemParams, mesh: Mesh) -> dict:
        row = {"lambda": prm.lam, "min_I": None, "c": None, "certificate": False, "status": "completed"}
        try:
            negative, energy, u1, minimum = lambda_indicator(prm, mesh, cfg.seed, tol=cfg.tol, max_iter=cfg.max_iter)
            row["min_I"] = energy
            if not negative:
                row["status"] = "sub_threshold"
                return row
            if not minimum["converged"]:
                row["status"] = "no_convergence"
                return row
            tr = Truncation(u1, prm.p_exp, prm.q_exp)
            u2, c, _ = mountain_pass(tr, prm, n_path=cfg.n_path, tol=cfg.tol, max_iter=cfg.max_iter)
            row["c"] = c
            row["certificate"] = two_solution_certificate(u1, u2, prm, tr, tol=cfg.tol)["passed"]
        except NoConvergence as e:
            logger.warning(f"λ={prm.lam:g}: {e}")
            row["status"] = "no_convergence"
        except GeometryFailure as e:
            logger.warning(f"λ={prm.lam:g}: {e}")
            row["status"] = "geometry_failure"
        return row

    def verify(self, cfg: RunConfig) -> Tuple[dict, int]:
        start = time.perf_counter()
        pair = cfg.pair()
        prm = cfg.problem(pair, lam=cfg.lam if cfg.lam is not None else 1.0)
        rng = np.random.default_rng(cfg.seed)
        mesh = cfg.mesh() if cfg.mesh_dim == 1 and cfg.mesh_n <= 64 else None
        results = run_property_suite(pair, rng, prm=prm, mesh=mesh)
        report = {
            "phi": pair.phi.to_config(),
            "properties": [r.to_dict() for r in results],
            "passed": all(r.passed for r in results),
            "wall_time": self._elapsed(start),
        }
        self._write_json(cfg.output_dir, "verify.json", report)
        self._record("verify", cfg, report, EXIT_CERTIFICATE, "completed", properties=results)
        return report, EXIT_CERTIFICATE


def _base_report(cfg: RunConfig, prm: ProblemParams, mesh: Mesh) -> dict:
    phi0, phi0_hi = prm.pair.indices
    settings = cfg.to_dict()
    # Output location and worker count do not change the numbers.
    settings.pop("output_dir")
    settings.pop("workers")
    return {
        "config": settings,
        "config_digest": cfg.digest(),
        "lambda": prm.lam,
        "lambda_star_est": None,
        "mesh": mesh.describe(),
        "indices": {"phi0": phi0, "phi0_hi": phi0_hi},
        "index_condition": prm.index_report,
        "I_u1": None,
        "J_u2": None,
        "residual_u1": None,
        "residual_u2": None,
        "ring_rho": None,
        "ring_level": None,
        "norms_u1": None,
        "norms_u2": None,
        "ordering": None,
        "certificate": None,
        "status": "running",
    }


def _monotone_indicator(rows: List[dict]) -> bool:
    seen_negative = False
    for row in rows:
        if row["min_I"] is None:
            continue
        negative = row["min_I"] < -Config.SWEEP["eps_neg"]
        if negative:
            seen_negative = True
        elif seen_negative:
            return False
    return True


def _bracket(rows: List[dict]) -> Tuple[float, float]:
    """Last non-negative and first negative λ of a monotone sweep."""
    eps = Config.SWEEP["eps_neg"]
    evaluated = [r for r in rows if r["min_I"] is not None]
    negatives = [r["lambda"] for r in evaluated if r["min_I"] < -eps]
    if not negatives:
        raise BracketInvalid("min I never drops below -eps_neg in the sweep")
    hi = min(negatives)
    below = [r["lambda"] for r in evaluated if r["lambda"] < hi]
    if not below:
        raise BracketInvalid("min I is already negative at the lowest swept λ")
    return max(below), hi


def _csv_value(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return value


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    return str(value)
