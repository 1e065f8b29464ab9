"""Second critical point through the truncated functional J.

The reaction is frozen above the minimizer u₁,

    g(x, t) = f(min(t₊, u₁(x)))
    G(x, t) = F(min(t₊, u₁(x))) + (t - u₁(x))₊ f(u₁(x)),

and a saddle of J between 0 and u₁ is located by deforming the segment
path t·u₁ with a climbing image.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
from scipy.sparse.linalg import splu

from app.config import Config
from app.services.assembly import (
    FullReaction,
    ProblemParams,
    Reaction,
    assemble_energy,
    assemble_gradient,
    gradient_luxemburg,
    residual_scale,
    scaled_residual_norm,
    weak_residual_norm,
)
from app.services.mesh import Field
from app.services.solver import NoConvergence, armijo_step, descent_metric, preconditioned_direction

logger = logging.getLogger(__name__)

ORDER_TOL = 1e-8


class GeometryFailure(Exception):
    pass


class Truncation(Reaction):
    def __init__(self, u1: Field, p_exp: float, q_exp: float):
        self.u1 = u1
        self.full = FullReaction(p_exp, q_exp)
        self._cutoffs: Dict[str, np.ndarray] = {}

    def cutoff(self, mesh, mode: str):
        """u₁₊ at the quadrature points of ``mode``."""
        if mode not in self._cutoffs:
            self._cutoffs[mode] = np.maximum(mesh.at_quadrature(self.u1.coeffs, mode), 0.0)
        return self._cutoffs[mode]

    def g(self, t, cut):
        pos = np.maximum(t, 0.0)
        return self.full.source(np.minimum(pos, cut))

    def G(self, t, cut):
        pos = np.maximum(t, 0.0)
        return self.full.primitive(np.minimum(pos, cut)) + np.maximum(t - cut, 0.0) * self.full.source(cut)

    def primitive(self, values, mesh, mode):
        return self.G(values, self.cutoff(mesh, mode))

    def source(self, values, mesh, mode):
        return self.g(values, self.cutoff(mesh, mode))


def g_eval(tr: Truncation, node, t):
    """g(x, t) at mesh node(s) ``node``."""
    cut = np.maximum(tr.u1.coeffs[node], 0.0)
    out = tr.g(np.asarray(t, dtype=float), cut)
    return float(out) if np.ndim(out) == 0 else out


def G_eval(tr: Truncation, node, t):
    cut = np.maximum(tr.u1.coeffs[node], 0.0)
    out = tr.G(np.asarray(t, dtype=float), cut)
    return float(out) if np.ndim(out) == 0 else out


def assemble_J(u: Field, tr: Truncation, prm: ProblemParams) -> float:
    """J(u) = ∫Φ(|∇u|) - λ∫G(x, u)."""
    return assemble_energy(u, prm, tr)


def assemble_gradient_J(u: Field, tr: Truncation, prm: ProblemParams):
    return assemble_gradient(u, prm, tr)


# ── Path deformation ────────────────────────────────────────────


@dataclass
class MountainPassState:
    path: List[Field]
    energies: List[float]
    level: float = -math.inf
    argmax_index: int = 0
    iteration: int = 0
    history: List[Tuple[int, float, int, float]] = field(default_factory=list)

    def refresh(self, tr: Truncation, prm: ProblemParams):
        self.energies = [assemble_J(u, tr, prm) for u in self.path]
        inner = self.energies[1:-1]
        self.argmax_index = 1 + int(np.argmax(inner))
        self.level = self.energies[self.argmax_index]

    def path_energies(self) -> List[dict]:
        n = len(self.path)
        return [{"index": k, "t": k / (n - 1), "J": e} for k, e in enumerate(self.energies)]


def _redistribute(path: List[Field], pivot: int) -> List[Field]:
    """Equal arc length on each side of ``pivot``; endpoints and pivot stay put."""
    coeffs = np.array([u.coeffs for u in path])
    seg = np.linalg.norm(np.diff(coeffs, axis=0), axis=1)
    arc = np.concatenate(([0.0], np.cumsum(seg)))
    new = coeffs.copy()
    for a, b in ((0, pivot), (pivot, len(path) - 1)):
        if b - a < 2:
            continue
        targets = np.linspace(arc[a], arc[b], b - a + 1)[1:-1]
        for j, s in zip(range(a + 1, b), targets):
            k = int(np.clip(np.searchsorted(arc, s, side="right") - 1, a, b - 1))
            w = (s - arc[k]) / seg[k] if seg[k] > 0.0 else 0.0
            new[j] = (1.0 - w) * coeffs[k] + w * coeffs[k + 1]
    mesh = path[0].mesh
    return [Field(mesh, c) for c in new]


def _climbing_step(u: Field, prev: Field, nxt: Field, prm: ProblemParams, tr: Truncation, r):
    """-P⁻¹r with its P-component along the path tangent reversed."""
    mesh = u.mesh
    interior = mesh.interior_nodes
    metric = descent_metric(u, prm, tr)
    d = np.zeros_like(r)
    d[interior] = -splu(metric).solve(r[interior])
    tau = (nxt.coeffs - prev.coeffs)[interior]
    denom = float(tau @ (metric @ tau))
    if denom > 0.0:
        d[interior] += 2.0 * float(tau @ r[interior]) / denom * tau
    return d


def _climb(climber: Field, d, r, tr: Truncation, prm: ProblemParams, alpha0: float = 1.0):
    """Backtrack along ``d`` until ‖J'‖ drops below its value at ``climber``.

    Returns (trial, alpha), or None when no tried step reduces ‖J'‖.
    """
    norm0 = float(np.linalg.norm(r))
    alpha = alpha0
    for _ in range(Config.SOLVER["max_backtracks"]):
        trial = climber.with_coeffs(climber.coeffs + alpha * d)
        if np.linalg.norm(assemble_gradient_J(trial, tr, prm)) < norm0:
            return trial, alpha
        alpha *= Config.SOLVER["armijo_shrink"]
    return None


def mountain_pass(
    tr: Truncation,
    prm: ProblemParams,
    n_path: int = None,
    tol: float = None,
    max_iter: int = None,
    step_tol: float = None,
) -> Tuple[Field, float, dict]:
    """Saddle of J on paths from 0 to u₁ by a climbing-image string.

    Stops like ``descend``: scaled residual of the climber <= tol and its
    last step <= step_tol * max(1, sup |u|). Returns (u2, c, report) with
    c = J(u2).
    """
    n_path = n_path or Config.SOLVER["n_path"]
    tol = tol or Config.SOLVER["tol"]
    max_iter = Config.SOLVER["max_iter"] if max_iter is None else max_iter
    step_tol = step_tol or Config.SOLVER["step_tol"]
    if n_path < 3:
        raise ValueError("n_path must be >= 3")

    u1 = tr.u1
    mesh = u1.mesh
    j_end = assemble_J(u1, tr, prm)
    if j_end >= 0.0:
        raise GeometryFailure(f"J(u1) = {j_end:.3e} is not negative")

    state = MountainPassState(path=[u1.scaled(t) for t in np.linspace(0.0, 1.0, n_path)], energies=[])
    state.refresh(tr, prm)
    if state.level <= 0.0:
        raise GeometryFailure(
            f"no positive energy on the initial path (max J = {state.level:.3e})"
        )
    logger.info(f"Mountain pass: initial level {state.level:.6e} at image {state.argmax_index}")

    alpha_climb = 1.0
    alphas = [1.0] * n_path
    res = math.inf
    for it in range(max_iter + 1):
        state.iteration = it
        m = state.argmax_index
        climber = state.path[m]
        r = assemble_gradient_J(climber, tr, prm)
        res = float(np.max(np.abs(r[mesh.interior_nodes]))) / max(1.0, residual_scale(climber, prm, tr))
        d = _climbing_step(climber, state.path[m - 1], state.path[m + 1], prm, tr, r)
        step = float(np.max(np.abs(d))) / max(1.0, climber.sup_norm())
        state.history.append((it, state.level, m, res))
        logger.debug(f"[MP] iter={it} level={state.level:.12e} image={m} residual={res:.3e} step={step:.3e}")
        if res <= tol and step <= step_tol:
            break
        if it == max_iter:
            raise NoConvergence(
                f"mountain pass stopped after {max_iter} iterations with residual {res:.3e}",
                best=climber,
                iterations=max_iter,
                residual=res,
                energy=state.level,
            )

        climbed = _climb(climber, d, r, tr, prm, min(1.0, 2.0 * alpha_climb))
        if climbed is None:
            if res <= tol:
                logger.debug(f"[MP] climbing stalled at residual {res:.3e}, accepting")
                break
            raise NoConvergence(
                f"climbing step found no decrease of |J'| at iteration {it} (residual {res:.3e})",
                best=climber,
                iterations=it,
                residual=res,
                energy=state.level,
            )
        trial, alpha_climb = climbed
        new_path = list(state.path)
        new_path[m] = trial

        for k in range(1, n_path - 1):
            if k == m:
                continue
            u = state.path[k]
            rk = assemble_gradient_J(u, tr, prm)
            dk = preconditioned_direction(u, prm, tr, rk)
            moved = armijo_step(u, state.energies[k], rk, dk, prm, tr, min(1.0, 2.0 * alphas[k]))
            if moved is not None:
                new_path[k], _, alphas[k] = moved

        state.path = _redistribute(new_path, m)
        state.refresh(tr, prm)

    u2 = state.path[state.argmax_index]
    c = state.level
    logger.info(f"Mountain pass converged: c = {c:.10e}, residual {res:.3e}, {state.iteration} iterations")
    report = {
        "c": c,
        "residual": res,
        "iterations": state.iteration,
        "argmax_index": state.argmax_index,
        "path_energies": state.path_energies(),
    }
    return u2, c, report


# ── Geometry and certificates ───────────────────────────────────


def ring_probe(
    tr: Truncation,
    prm: ProblemParams,
    rng: np.random.Generator,
    n_rho: int = 9,
    n_dirs: int = 16,
) -> dict:
    """Sampled infimum of J on spheres ‖u‖ = ρ for a ladder of ρ < ‖u₁‖.

    Directions are u₁ and random sine combinations. Reports the ρ with the
    largest sampled infimum.
    """
    u1 = tr.u1
    mesh = u1.mesh
    norm_u1 = gradient_luxemburg(u1, prm.pair)
    directions = [u1.scaled(1.0 / norm_u1)]
    for _ in range(n_dirs - 1):
        v = mesh.random_field(rng)
        directions.append(v.scaled(1.0 / gradient_luxemburg(v, prm.pair)))

    ladder = []
    for frac in np.linspace(0.05, 0.95, n_rho):
        rho = float(frac * norm_u1)
        values = [assemble_J(v.scaled(rho), tr, prm) for v in directions]
        ladder.append({"rho": rho, "min_J": float(min(values)), "max_J": float(max(values))})
    best = max(ladder, key=lambda row: row["min_J"])
    return {
        "rho": best["rho"],
        "level": best["min_J"],
        "norm_u1": norm_u1,
        "ladder": ladder,
        "passed": bool(best["min_J"] > 0.0 and best["rho"] < norm_u1),
    }


def verify_ordering_and_sign(u2: Field, u1: Field, tol: float = ORDER_TOL) -> dict:
    if u2.mesh is not u1.mesh:
        raise ValueError("fields live on different meshes")
    neg = float(np.max(-u2.coeffs))
    order = float(np.max(u2.coeffs - u1.coeffs))
    return {
        "neg_slack": neg,
        "order_slack": order,
        "tol": tol,
        "passed": bool(neg <= tol and order <= tol),
    }


def two_solution_certificate(
    u1: Field,
    u2: Field,
    prm: ProblemParams,
    tr: Truncation,
    tol: float = None,
    eps: float = None,
    min_distance: float = 1e-4,
) -> dict:
    """I(u2) > 0 > I(u1), both scaled residuals <= tol, 0 <= u2 <= u1 and u2 away from 0 and u1.

    The raw sup-norm residuals are reported next to the scaled ones.
    """
    tol = tol or Config.SOLVER["tol"]
    eps = Config.SWEEP["eps_neg"] if eps is None else eps
    energy_u1 = assemble_energy(u1, prm)
    energy_u2 = assemble_energy(u2, prm)
    j_u2 = assemble_J(u2, tr, prm)
    residual_u1 = scaled_residual_norm(u1, prm)
    residual_u2 = scaled_residual_norm(u2, prm, tr)
    residual_u2_full = scaled_residual_norm(u2, prm)
    ordering = verify_ordering_and_sign(u2, u1)
    distance = u1.l2_distance(u2)
    checks = {
        "I_u1_negative": {"value": energy_u1, "passed": energy_u1 < -eps},
        "I_u2_positive": {"value": energy_u2, "passed": energy_u2 > eps},
        "I_equals_J_at_u2": {"value": abs(energy_u2 - j_u2), "passed": abs(energy_u2 - j_u2) <= 1e-10 * max(1.0, abs(j_u2))},
        "residual_u1": {"value": residual_u1, "passed": residual_u1 <= tol},
        "residual_u2": {"value": residual_u2, "passed": residual_u2 <= tol},
        "residual_u2_full": {"value": residual_u2_full, "passed": residual_u2_full <= tol},
        "ordering": {"value": max(ordering["neg_slack"], ordering["order_slack"]), "passed": ordering["passed"]},
        "distance_u1_u2": {"value": distance, "passed": distance > min_distance},
        "u2_nontrivial": {"value": u2.l2_norm(), "passed": u2.l2_norm() > min_distance},
    }
    return {
        "checks": checks,
        "ordering": ordering,
        "raw_residuals": {
            "u1": weak_residual_norm(u1, prm),
            "u2": weak_residual_norm(u2, prm, tr),
            "u2_full": weak_residual_norm(u2, prm),
        },
        "passed": all(c["passed"] for c in checks.values()),
    }
