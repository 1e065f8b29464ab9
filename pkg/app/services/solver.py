"""Discrete minimization of the energy I and the estimates built on it.

Descent directions come from the operator

    P(u) = Σₑ |e| ∇ψᵢ·Aₑ∇ψⱼ + λ diag(∫ max(-f(u)/u, 0) ψᵢ)

restricted to interior nodes, where Aₑ is the Hessian of Φ(|ξ|) at ∇u on
the element (``flux_tangent``), with Armijo backtracking on the energy.
The growing part of the reaction stays out of P so that P is positive
definite. No sign constraint is imposed on the iterates.

Residuals are measured against the loads they balance
(``scaled_residual_norm``) and steps against max(1, sup |u|), so the same
tolerances hold for minimizers of size 1e-3 and 1e4.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.sparse import diags
from scipy.sparse.linalg import splu

from app.config import Config
from app.services.assembly import (
    ProblemParams,
    Reaction,
    assemble_energy,
    assemble_gradient,
    flux,
    flux_load,
    flux_tangent,
    gradient_luxemburg,
    interior_block,
    modular,
    reaction_secant_diagonal,
    residual_scale,
    weighted_stiffness,
)
from app.services.mesh import Field, Mesh
from app.services.young import YoungPair

logger = logging.getLogger(__name__)


class NoConvergence(Exception):
    def __init__(
        self,
        message,
        best: Field = None,
        iterations: int = 0,
        residual: float = math.inf,
        energy: Optional[float] = None,
        starts: Optional[List[dict]] = None,
    ):
        super().__init__(message)
        self.best = best
        self.iterations = iterations
        self.residual = residual
        self.energy = energy
        self.starts = starts


class BracketInvalid(Exception):
    pass


@dataclass
class DescentResult:
    """Outcome of one descent run; ``residual`` is the scaled residual."""

    field: Field
    energy: float
    residual: float
    iterations: int
    converged: bool
    history: List[Tuple[int, float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "energy": self.energy,
            "residual": self.residual,
            "iterations": self.iterations,
            "converged": self.converged,
        }


# ── Metric and single steps ─────────────────────────────────────


def descent_metric(u: Field, prm: ProblemParams, reaction: Reaction):
    """Interior block of P(u) in CSC form."""
    matrix = flux_tangent(u, prm.pair.phi)
    if prm.lam > 0.0:
        matrix = matrix + diags(prm.lam * reaction_secant_diagonal(u, reaction, prm.quadrature))
    return interior_block(matrix, u.mesh).tocsc()


def preconditioned_direction(u: Field, prm: ProblemParams, reaction: Reaction, r):
    """d = -P(u)⁻¹ r on interior nodes, zero on the boundary."""
    interior = u.mesh.interior_nodes
    d = np.zeros_like(r)
    if interior.size:
        d[interior] = -splu(descent_metric(u, prm, reaction)).solve(r[interior])
    return d


def _sup(r, mesh: Mesh) -> float:
    interior = mesh.interior_nodes
    return float(np.max(np.abs(r[interior]))) if interior.size else 0.0


def armijo_step(
    u: Field,
    energy: float,
    r,
    d,
    prm: ProblemParams,
    reaction: Reaction,
    alpha0: float = 1.0,
) -> Optional[Tuple[Field, float, float]]:
    """Backtrack from alpha0 until E(u + αd) <= E(u) + c α ⟨r, d⟩.

    Returns (field, energy, alpha) or None when no step is accepted.
    """
    c = Config.SOLVER["armijo_c"]
    shrink = Config.SOLVER["armijo_shrink"]
    slope = float(np.dot(r, d))
    if slope >= 0.0:
        return None
    alpha = alpha0
    for _ in range(Config.SOLVER["max_backtracks"]):
        trial = u.with_coeffs(u.coeffs + alpha * d)
        e_trial = assemble_energy(trial, prm, reaction)
        if e_trial <= energy + c * alpha * slope:
            return trial, e_trial, alpha
        alpha *= shrink
    # Energy differences at roundoff level: the full step may still reduce
    # the residual, but it must not raise the energy beyond roundoff.
    trial = u.with_coeffs(u.coeffs + d)
    e_trial = assemble_energy(trial, prm, reaction)
    if e_trial > energy + Config.SOLVER["energy_rtol"] * max(1.0, abs(energy)):
        return None
    if _sup(assemble_gradient(trial, prm, reaction), u.mesh) < _sup(r, u.mesh):
        return trial, e_trial, 1.0
    return None


# ── Minimization ────────────────────────────────────────────────


def descend(
    prm: ProblemParams,
    init: Field,
    reaction: Optional[Reaction] = None,
    tol: float = None,
    max_iter: int = None,
    step_tol: float = None,
    label: str = "I",
) -> DescentResult:
    """Preconditioned Armijo descent on the energy with the given reaction.

    Converged when the scaled residual is <= tol and the last direction is
    <= step_tol * max(1, sup |u|), or when the line search stalls with the
    scaled residual already within tol.
    """
    reaction = reaction or prm.reaction
    tol = tol or Config.SOLVER["tol"]
    max_iter = Config.SOLVER["max_iter"] if max_iter is None else max_iter
    step_tol = step_tol or Config.SOLVER["step_tol"]
    mesh = init.mesh

    u = init.copy()
    energy = assemble_energy(u, prm, reaction)
    alpha = 1.0
    res = math.inf
    history = []
    for it in range(max_iter + 1):
        r = assemble_gradient(u, prm, reaction)
        res = _sup(r, mesh) / max(1.0, residual_scale(u, prm, reaction))
        d = preconditioned_direction(u, prm, reaction, r)
        step = (float(np.max(np.abs(d))) if d.size else 0.0) / max(1.0, u.sup_norm())
        history.append((it, energy, res))
        logger.debug(f"[{label}] iter={it} energy={energy:.12e} residual={res:.3e} step={step:.3e}")
        if res <= tol and step <= step_tol:
            return DescentResult(u, energy, res, it, True, history)
        if it == max_iter:
            break
        accepted = armijo_step(u, energy, r, d, prm, reaction, min(1.0, 2.0 * alpha))
        if accepted is None:
            if res <= tol:
                logger.debug(f"[{label}] line search stalled at residual {res:.3e}, accepting")
                return DescentResult(u, energy, res, it, True, history)
            logger.warning(f"[{label}] line search failed at iter {it} (residual {res:.3e})")
            return DescentResult(u, energy, res, it, False, history)
        u, energy, alpha = accepted
    return DescentResult(u, energy, res, max_iter, False, history)


def minimize_energy(
    prm: ProblemParams,
    init: Field,
    tol: float = None,
    max_iter: int = None,
) -> Tuple[Field, dict]:
    """Local minimizer of I from ``init``.

    Raises NoConvergence carrying the best iterate and its energy when the
    scaled residual does not reach ``tol``.
    """
    result = descend(prm, init, tol=tol, max_iter=max_iter)
    if not result.converged:
        raise NoConvergence(
            f"minimization stopped after {result.iterations} iterations "
            f"with residual {result.residual:.3e}",
            best=result.field,
            iterations=result.iterations,
            residual=result.residual,
            energy=result.energy,
        )
    report = result.to_dict()
    report["min_node"] = float(np.min(result.field.coeffs))
    return result.field, report


# ── Multi-start and the threshold λ* ───────────────────────────


def witness_height(p_exp: float, q_exp: float) -> int:
    """Smallest integer t₀ > 1 with t₀^p/p > t₀^q/q."""
    t0 = 2
    while t0**p_exp / p_exp <= t0**q_exp / q_exp:
        t0 += 1
    return t0


def plateau_witness(mesh: Mesh, height: float, fraction: float = 0.8) -> Field:
    """``height`` on a centered box of measure ``fraction``, linear ramps to zero."""
    side = fraction ** (1.0 / mesh.dim)
    ramp = 0.5 * (1.0 - side)

    def profile(x):
        dist = np.minimum(x, 1.0 - x) / ramp
        return height * np.prod(np.clip(dist, 0.0, 1.0), axis=1)

    return mesh.field_from_function(profile)


WITNESS_FRACTIONS = (0.1, 0.5, 0.8)


def start_fields(
    prm: ProblemParams,
    mesh: Mesh,
    rng: np.random.Generator,
    n_random: int = 2,
    ladder: int = None,
):
    """Initial guesses: a small perturbation of 0, the best plateau witness, random fields.

    The witness is the lowest-energy plateau over the box fractions in
    WITNESS_FRACTIONS and the heights t₀·1.25ᵏ, k < ladder, which reach the
    size of minimizers far above the threshold. Random starts perturb the
    witness shape and spread around its height.
    """
    ladder = ladder or Config.SOLVER["witness_ladder"]
    starts = [("zero_perturbation", mesh.bubble().scaled(1e-3))]

    heights = witness_height(prm.p_exp, prm.q_exp) * 1.25 ** np.arange(ladder)
    best = (math.inf, None, None, None)
    for fraction in WITNESS_FRACTIONS:
        shape = plateau_witness(mesh, 1.0, fraction)
        energies = [assemble_energy(shape.scaled(h), prm) for h in heights]
        k = int(np.argmin(energies))
        if energies[k] < best[0]:
            best = (energies[k], shape, float(heights[k]), fraction)
    _, shape, height, fraction = best
    starts.append((f"witness_{height:.4g}_{fraction:g}", shape.scaled(height)))

    for k in range(n_random):
        noise = mesh.random_field(rng, nonnegative=True).coeffs
        noise /= max(float(np.max(noise)), 1e-300)
        amplitude = height * 1.25 ** rng.uniform(-4.0, 4.0)
        starts.append((f"random_{k}", Field(mesh, amplitude * shape.coeffs * (0.5 + 0.5 * noise))))
    return starts


def minimize_energy_multistart(
    prm: ProblemParams,
    mesh: Mesh,
    rng: np.random.Generator,
    tol: float = None,
    max_iter: int = None,
    n_random: int = 2,
) -> Tuple[Field, dict]:
    """Run minimize_energy from every start field and keep the lowest converged energy.

    Raises NoConvergence when a start that did not converge went more than
    eps_neg below every converged minimum (or when no start converged).
    """
    eps = Config.SWEEP["eps_neg"]
    runs = []
    best, best_energy, lowest = None, math.inf, None
    for name, start in start_fields(prm, mesh, rng, n_random=n_random):
        try:
            u, report = minimize_energy(prm, start, tol=tol, max_iter=max_iter)
        except NoConvergence as e:
            logger.warning(f"start {name} did not converge: {e}")
            runs.append(
                {
                    "start": name,
                    "converged": False,
                    "energy": e.energy,
                    "residual": e.residual,
                    "iterations": e.iterations,
                }
            )
            if lowest is None or e.energy < lowest.energy:
                lowest = e
            continue
        runs.append({"start": name, **report})
        if report["energy"] < best_energy:
            best, best_energy = u, report["energy"]
    if lowest is not None and lowest.energy < best_energy - eps:
        raise NoConvergence(
            f"a start reached I = {lowest.energy:.6e} without converging "
            f"(best converged minimum {best_energy:.6e})",
            best=lowest.best,
            iterations=lowest.iterations,
            residual=lowest.residual,
            energy=lowest.energy,
            starts=runs,
        )
    logger.info(f"λ={prm.lam:.6g}: min I = {best_energy:.6e} over {len(runs)} starts")
    return best, {"energy": best_energy, "starts": runs}


def lambda_indicator(
    prm: ProblemParams,
    mesh: Mesh,
    seed: int,
    eps_neg: float = None,
    tol: float = None,
    max_iter: int = None,
) -> Tuple[bool, float, Field, dict]:
    """Whether the multi-start minimum of I drops below -eps_neg.

    An iterate with I < -eps_neg already shows inf I < 0, so a start that
    got there without converging still counts as negative. The report then
    has ``converged`` false.
    """
    eps_neg = Config.SWEEP["eps_neg"] if eps_neg is None else eps_neg
    rng = np.random.default_rng(seed)
    try:
        u1, report = minimize_energy_multistart(prm, mesh, rng, tol=tol, max_iter=max_iter)
    except NoConvergence as e:
        if e.energy is None or not e.energy < -eps_neg:
            raise
        logger.warning(f"λ={prm.lam:.6g}: I reached {e.energy:.6e} without converging, counted as negative")
        return True, e.energy, e.best, {"energy": e.energy, "starts": e.starts, "converged": False}
    report["converged"] = True
    return report["energy"] < -eps_neg, report["energy"], u1, report


def find_lambda_star(
    prm_template: ProblemParams,
    mesh: Mesh,
    lambda_lo: float,
    lambda_hi: float,
    bisect_tol: float = None,
    seed: int = None,
    indicator: Callable = None,
    tol: float = None,
    max_iter: int = None,
) -> Tuple[float, List[dict]]:
    """Bisect the λ threshold of the negative-energy indicator.

    ``tol`` and ``max_iter`` go to every minimization. Returns the estimate
    and the list of evaluated (λ, min I, indicator) points.
    """
    bisect_tol = bisect_tol or Config.SWEEP["bisect_tol"]
    seed = Config.SOLVER["seed"] if seed is None else seed
    if not 0.0 <= lambda_lo < lambda_hi:
        raise BracketInvalid(f"need 0 <= lambda_lo < lambda_hi, got {lambda_lo}, {lambda_hi}")

    def evaluate(lam):
        if indicator is not None:
            flag, energy = indicator(lam)
        else:
            flag, energy, _, _ = lambda_indicator(
                prm_template.with_lambda(lam), mesh, seed, tol=tol, max_iter=max_iter
            )
        points.append({"lambda": lam, "min_I": energy, "negative": bool(flag)})
        return flag

    points: List[dict] = []
    if evaluate(lambda_lo):
        raise BracketInvalid(f"min I is already negative at lambda_lo={lambda_lo}")
    if not evaluate(lambda_hi):
        raise BracketInvalid(f"min I is not negative at lambda_hi={lambda_hi}")

    lo, hi = lambda_lo, lambda_hi
    while hi - lo > bisect_tol:
        mid = 0.5 * (lo + hi)
        if evaluate(mid):
            hi = mid
        else:
            lo = mid

    # Spot checks halfway between the bracket ends and the final interval.
    for lam in (0.5 * (lambda_lo + lo), 0.5 * (hi + lambda_hi)):
        if all(abs(pt["lambda"] - lam) > bisect_tol for pt in points):
            evaluate(lam)

    ordered = sorted(points, key=lambda pt: pt["lambda"])
    seen_negative = False
    for pt in ordered:
        if pt["negative"]:
            seen_negative = True
        elif seen_negative:
            raise BracketInvalid(f"indicator is not monotone near λ={pt['lambda']:.6g}")
    estimate = 0.5 * (lo + hi)
    logger.info(f"λ* ≈ {estimate:.6g} after {len(points)} evaluations")
    return estimate, ordered


# ── Estimates and checks ────────────────────────────────────────


def flux_monotonicity_check(
    pair: YoungPair,
    n_trials: int,
    rng: np.random.Generator = None,
    dim: int = 2,
) -> dict:
    """(a(|ξ|)ξ - a(|ψ|)ψ)·(ξ - ψ) over random pairs in R^dim.

    Magnitudes are log-uniform in [0.1, 10]. Also reports the largest
    |ξ - ψ| among pairs whose gap is below 1e-12.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    rng = rng or np.random.default_rng(Config.SOLVER["seed"])

    def sample():
        v = rng.standard_normal((n_trials, dim))
        v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300)
        return v * np.exp(rng.uniform(np.log(0.1), np.log(10.0), (n_trials, 1)))

    xi, psi = sample(), sample()
    diff = xi - psi
    gaps = np.einsum("nd,nd->n", flux(pair.phi, xi) - flux(pair.phi, psi), diff)
    dist = np.linalg.norm(diff, axis=1)
    tiny = gaps < 1e-12
    return {
        "trials": n_trials,
        "min_gap": float(np.min(gaps)),
        "max_dist_at_zero_gap": float(np.max(dist[tiny])) if tiny.any() else 0.0,
    }


def lambda1_estimate(
    pair: YoungPair,
    mesh: Mesh,
    n_restarts: int = 3,
    rng: np.random.Generator = None,
    max_iter: int = 500,
    tol: float = 1e-12,
) -> float:
    """Lowest value of ∫Φ(|∇u|) / ∫|u|^φ₀ found on the unit sphere of ‖·‖.

    The quotient does not decrease when u is scaled up from the sphere, so
    the infimum over ‖u‖ > 1 is approached on ‖u‖ = 1. Projected descent
    preconditioned by the stiffness matrix, one run per restart.
    """
    rng = rng or np.random.default_rng(Config.SOLVER["seed"])
    phi0 = pair.indices[0]
    bary, weights = mesh.quad_rule("gauss")
    interior = mesh.interior_nodes
    if interior.size == 0:
        raise ValueError("mesh has no interior nodes")
    solver = splu(interior_block(weighted_stiffness(mesh), mesh).tocsc())

    def project(u):
        return u.scaled(1.0 / gradient_luxemburg(u, pair))

    def quotient(u):
        values = mesh.at_quadrature(u.coeffs, "gauss")
        return modular(u, pair) / float(np.sum(weights * np.abs(values) ** phi0))

    def gradient(u, q_val):
        values = mesh.at_quadrature(u.coeffs, "gauss")
        den = float(np.sum(weights * np.abs(values) ** phi0))
        d_den = phi0 * mesh.scatter((weights * np.abs(values) ** (phi0 - 1.0) * np.sign(values)) @ bary)
        g = (flux_load(u, pair.phi) - q_val * d_den) / den
        g[mesh.boundary_mask] = 0.0
        return g

    best = math.inf
    for k in range(n_restarts):
        start = mesh.bubble()
        if k > 0:
            noise = 1.0 + 0.5 * rng.uniform(-1.0, 1.0, mesh.n_nodes)
            start = start.with_coeffs(np.where(mesh.boundary_mask, 0.0, start.coeffs * noise))
        u = project(start)
        q_val = quotient(u)
        alpha = 1.0
        for it in range(max_iter):
            g = gradient(u, q_val)
            d = np.zeros_like(g)
            d[interior] = -solver.solve(g[interior])
            slope = float(np.dot(g, d))
            step = min(1.0, 2.0 * alpha)
            accepted = False
            for _ in range(Config.SOLVER["max_backtracks"]):
                trial = project(u.with_coeffs(u.coeffs + step * d))
                q_trial = quotient(trial)
                if q_trial <= q_val + Config.SOLVER["armijo_c"] * step * slope:
                    accepted = True
                    break
                step *= Config.SOLVER["armijo_shrink"]
            if not accepted:
                break
            decrease = q_val - q_trial
            u, q_val, alpha = trial, q_trial, step
            if decrease <= tol * q_val:
                break
        logger.debug(f"λ₁ restart {k}: quotient {q_val:.10f} after {it + 1} iterations")
        best = min(best, q_val)
    return best


def coercivity_probe(
    prm: ProblemParams,
    mesh: Mesh,
    rng: np.random.Generator,
    truncated: Optional[Reaction] = None,
    ladder=(2.0, 4.0, 8.0, 16.0),
    n_fields: int = 5,
) -> dict:
    """I (and J when ``truncated`` is given) along a norm ladder of random fields.

    C is fitted as max(½‖u‖^φ₀ - I(u)) over the samples.
    """
    phi0 = prm.pair.indices[0]
    rows = []
    for _ in range(n_fields):
        base = mesh.random_field(rng)
        base = base.scaled(1.0 / gradient_luxemburg(base, prm.pair))
        row = {"I": [], "J": []}
        for rho in ladder:
            u = base.scaled(rho)
            row["I"].append(assemble_energy(u, prm))
            if truncated is not None:
                row["J"].append(assemble_energy(u, prm, truncated))
        rows.append(row)

    fitted_c = max(
        0.5 * rho**phi0 - row["I"][k] for row in rows for k, rho in enumerate(ladder)
    )

    def increasing(key):
        return all(np.all(np.diff(row[key][1:]) > 0.0) for row in rows if row[key])

    return {
        "ladder": list(ladder),
        "fitted_C": float(fitted_c),
        "I_increasing": bool(increasing("I")),
        "J_increasing": bool(increasing("J")) if truncated is not None else None,
        "samples": rows,
    }
