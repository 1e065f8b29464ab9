"""Randomized property checks over the scalar and field-level machinery.

Each check returns a ``PropertyResult`` with the smallest slack observed
(negative means violated beyond tolerance).
"""

import logging
from dataclasses import asdict, dataclass
from typing import List, Optional

import numpy as np

from app.config import Config
from app.services.assembly import (
    ProblemParams,
    assemble_energy,
    assemble_gradient,
    gradient_luxemburg,
    modular,
)
from app.services.mesh import Mesh, build_mesh_1d
from app.services.mountain_pass import Truncation
from app.services.solver import flux_monotonicity_check, plateau_witness
from app.services.young import (
    DEFAULT_TOL,
    YoungPair,
    convexity_gap,
    delta2_ratio,
    index_ratio,
    luxemburg_norm,
    modular_sum,
    phi_inverse,
    sqrt_convexity_slack,
    young_gap,
)

logger = logging.getLogger(__name__)


@dataclass
class PropertyResult:
    name: str
    family: str
    min_slack: float
    passed: bool
    detail: Optional[dict] = None

    def to_dict(self) -> dict:
        return asdict(self)


def _result(name, pair, slack, tol, detail=None):
    slack = float(slack)
    return PropertyResult(name, pair.phi.label(), slack, bool(slack >= -tol), detail)


def _log_uniform(rng, lo, hi, size):
    return np.exp(rng.uniform(np.log(lo), np.log(hi), size))


# ── Scalar level ────────────────────────────────────────────────


def check_oddness(pair: YoungPair, rng, n=1000) -> PropertyResult:
    t = rng.uniform(-1e3, 1e3, n)
    err = np.abs(pair.phi.phi(-t) + pair.phi.phi(t))
    return _result("phi_odd", pair, -float(np.max(err)), 0.0)


def check_round_trip(pair: YoungPair, rng, n=1000) -> PropertyResult:
    t = rng.uniform(-1e3, 1e3, n)
    back = phi_inverse(pair.phi, pair.phi.phi(t))
    err = np.abs(back - t) / np.maximum(1.0, np.abs(t))
    return _result("phi_inverse_round_trip", pair, -float(np.max(err)), 1e-9)


def check_index_sandwich(pair: YoungPair, n=2000, tol=DEFAULT_TOL) -> PropertyResult:
    low, high = pair.indices
    t = np.geomspace(Config.YOUNG["index_t_min"], Config.YOUNG["index_t_max"], n)
    ratio = index_ratio(pair, t)
    slack = min(float(np.min(ratio - low)), float(np.min(high - ratio)))
    return _result("index_sandwich", pair, slack, tol, {"phi0": low, "phi0_hi": high})


def check_young(pair: YoungPair, rng, n=None, tol=DEFAULT_TOL) -> PropertyResult:
    n = n or Config.VERIFY["young_pairs"]
    s = _log_uniform(rng, 1e-3, 1e3, n)
    t = _log_uniform(rng, 1e-3, 1e3, n)
    gap = young_gap(pair, s, t) / (1.0 + s * t)
    return _result("young_inequality", pair, np.min(gap), tol, {"pairs": n})


def check_delta2(pair: YoungPair, n=None, tol=1e-6) -> PropertyResult:
    n = n or Config.VERIFY["delta2_grid"]
    ratio = delta2_ratio(pair, np.geomspace(1e-3, 1e3, n))
    bound = 2.0 ** pair.indices[1]
    return _result("delta2", pair, bound - ratio, tol, {"ratio": ratio, "bound": bound})


def check_sqrt_convexity(pair: YoungPair, n=2000, tol=DEFAULT_TOL) -> PropertyResult:
    slack = sqrt_convexity_slack(pair, np.geomspace(1e-4, 1e4, n))
    return _result("sqrt_convexity", pair, slack, tol)


def check_convexity_gap(pair: YoungPair, rng, n=None, tol=DEFAULT_TOL) -> Optional[PropertyResult]:
    """Only meaningful when t -> Φ(√t) is convex; returns None otherwise."""
    if check_sqrt_convexity(pair).passed is False:
        return None
    n = n or Config.VERIFY["convexity_pairs"]
    x = rng.uniform(-10.0, 10.0, n)
    y = rng.uniform(-10.0, 10.0, n)
    scale = 1.0 + pair.big_phi(x) + pair.big_phi(y)
    return _result("convexity_gap", pair, np.min(convexity_gap(pair, x, y) / scale), tol, {"pairs": n})


def check_flux_monotonicity(pair: YoungPair, rng, n=None) -> PropertyResult:
    n = n or Config.VERIFY["flux_trials"]
    out = flux_monotonicity_check(pair, n, rng)
    passed = out["min_gap"] >= -1e-10 and out["max_dist_at_zero_gap"] < 1e-5
    return PropertyResult("flux_monotonicity", pair.phi.label(), out["min_gap"], bool(passed), out)


def check_luxemburg(pair: YoungPair, rng, n_vectors=50, size=64) -> PropertyResult:
    """Homogeneity ‖cv‖ = |c|‖v‖ and modular normalization at the returned k."""
    worst = 0.0
    for _ in range(n_vectors):
        values = rng.standard_normal(size) * _log_uniform(rng, 0.01, 100.0, 1)
        weights = rng.uniform(0.5, 1.5, size)
        weights /= weights.sum()
        k = luxemburg_norm(pair, values, weights)
        c = float(_log_uniform(rng, 0.1, 10.0, 1)[0]) * rng.choice([-1.0, 1.0])
        homog = abs(luxemburg_norm(pair, c * values, weights) - abs(c) * k) / (abs(c) * k)
        normal = abs(modular_sum(pair, values / k, weights) - 1.0)
        worst = max(worst, homog, normal)
    return _result("luxemburg_norm", pair, -worst, 1e-8)


# ── Field level ─────────────────────────────────────────────────


def check_norm_modular_sandwich(pair: YoungPair, mesh: Mesh, rng, n_fields=None, rel_tol=1e-3) -> List[PropertyResult]:
    """‖u‖^φ⁰ <= ∫Φ(|∇u|) <= ‖u‖^φ₀ for ‖u‖ < 1, reversed for ‖u‖ > 1."""
    n_fields = n_fields or Config.VERIFY["sandwich_fields"]
    low, high = pair.indices
    results = []
    for regime, (lo, hi) in (("below_one", (0.1, 0.9)), ("above_one", (1.1, 10.0))):
        worst = np.inf
        for _ in range(n_fields):
            u = mesh.random_field(rng)
            target = rng.uniform(lo, hi)
            u = u.scaled(target / gradient_luxemburg(u, pair))
            norm = gradient_luxemburg(u, pair)
            mod = modular(u, pair)
            if regime == "below_one":
                floor_, ceil_ = norm**high, norm**low
            else:
                floor_, ceil_ = norm**low, norm**high
            worst = min(worst, mod / floor_ - 1.0, 1.0 - mod / ceil_)
        results.append(_result(f"norm_modular_sandwich_{regime}", pair, worst, rel_tol, {"fields": n_fields}))
    return results


def _fd_error(energy, grad, u, v, h=1e-5):
    up = u.with_coeffs(u.coeffs + h * v)
    dn = u.with_coeffs(u.coeffs - h * v)
    fd = (energy(up) - energy(dn)) / (2.0 * h)
    exact = float(np.dot(grad(u), v))
    return abs(fd - exact) / max(abs(exact), 1e-8)


def consistency_fields(mesh: Mesh, rng, n_fields):
    """Random fields with nodal values bounded away from zero, and directions."""
    out = []
    for _ in range(n_fields):
        base = mesh.random_field(rng, nonnegative=True).coeffs
        base = 0.2 + 2.0 * base / max(float(np.max(base)), 1e-300)
        base[mesh.boundary_mask] = 0.0
        direction = mesh.random_field(rng).coeffs
        out.append((mesh.zero_field().with_coeffs(base), direction))
    return out


def check_gradient_consistency(prm: ProblemParams, mesh: Mesh, rng, n_fields=None, rel_tol=1e-6) -> List[PropertyResult]:
    """Central differences of I and J against the assembled derivatives."""
    n_fields = n_fields or Config.VERIFY["gradient_fields"]
    tr = Truncation(plateau_witness(mesh, 1.5), prm.p_exp, prm.q_exp)
    worst_i = worst_j = 0.0
    for u, v in consistency_fields(mesh, rng, n_fields):
        worst_i = max(worst_i, _fd_error(lambda w: assemble_energy(w, prm), lambda w: assemble_gradient(w, prm), u, v))
        worst_j = max(
            worst_j,
            _fd_error(lambda w: assemble_energy(w, prm, tr), lambda w: assemble_gradient(w, prm, tr), u, v),
        )
    return [
        _result("gradient_consistency_I", prm.pair, -worst_i, rel_tol, {"fields": n_fields}),
        _result("gradient_consistency_J", prm.pair, -worst_j, rel_tol, {"fields": n_fields}),
    ]


def check_order_interval_agreement(prm: ProblemParams, mesh: Mesh, rng, n_fields=10) -> PropertyResult:
    """J = I and J' = I' for fields with 0 <= u <= u₁."""
    u1 = plateau_witness(mesh, 2.0)
    tr = Truncation(u1, prm.p_exp, prm.q_exp)
    worst = 0.0
    for _ in range(n_fields):
        u = u1.with_coeffs(u1.coeffs * rng.uniform(0.0, 1.0, mesh.n_nodes))
        worst = max(
            worst,
            abs(assemble_energy(u, prm) - assemble_energy(u, prm, tr)),
            float(np.max(np.abs(assemble_gradient(u, prm) - assemble_gradient(u, prm, tr)))),
        )
    return _result("order_interval_agreement", prm.pair, -worst, 1e-10)


# ── Suite ───────────────────────────────────────────────────────


def run_property_suite(
    pair: YoungPair,
    rng: np.random.Generator,
    prm: Optional[ProblemParams] = None,
    mesh: Optional[Mesh] = None,
) -> List[PropertyResult]:
    """Scalar suite for ``pair``; field suites on ``mesh`` (1D, n=64 by default)."""
    mesh = mesh or build_mesh_1d(64)
    results = [
        check_oddness(pair, rng),
        check_round_trip(pair, rng),
        check_index_sandwich(pair),
        check_young(pair, rng),
        check_delta2(pair),
        check_sqrt_convexity(pair),
    ]
    gap = check_convexity_gap(pair, rng)
    if gap is not None:
        results.append(gap)
    results.append(check_flux_monotonicity(pair, rng))
    results.append(check_luxemburg(pair, rng))
    results.extend(check_norm_modular_sandwich(pair, mesh, rng))
    if prm is not None:
        results.extend(check_gradient_consistency(prm, mesh, rng))
        results.append(check_order_interval_agreement(prm, mesh, rng))
    failed = [r.name for r in results if not r.passed]
    logger.info(
        f"Property suite for {pair.phi.label()}: {len(results) - len(failed)}/{len(results)} passed"
        + (f", failed: {', '.join(failed)}" if failed else "")
    )
    return results
