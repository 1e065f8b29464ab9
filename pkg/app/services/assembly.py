"""Energy functionals on P1 fields and their nodal derivatives.

The energy of a field u is

    E(u) = ∫ Φ(|∇u|) - λ ∫ F(x, u)

where F is the primitive of the reaction term. ``FullReaction`` gives the
energy I with F(u) = u₊^p/p - u₊^q/q; the truncated reaction of the
mountain-pass stage plugs into the same assembly. Reaction integrals use
the mesh quadrature selected by ``ProblemParams.quadrature`` and the
derivative is the exact gradient of the assembled energy.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Optional

import numpy as np
import scipy.sparse as sps

from app.config import Config
from app.services.mesh import QUADRATURE_MODES, Field, Mesh
from app.services.young import PhiSpec, YoungPair, index_condition_report, luxemburg_norm

logger = logging.getLogger(__name__)

SECANT_FLOOR = 1e-14
GRAD_FLOOR = 1e-12
WEIGHT_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class ProblemParams:
    lam: float
    p_exp: float
    q_exp: float
    pair: YoungPair
    nominal_n: int = Config.SOLVER["nominal_n"]
    quadrature: str = Config.SOLVER["quadrature"]
    index_report: dict = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if not self.lam >= 0.0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.quadrature not in QUADRATURE_MODES:
            raise ValueError(f"quadrature must be one of {QUADRATURE_MODES}, got {self.quadrature!r}")
        report = index_condition_report(self.pair, self.p_exp, self.q_exp, self.nominal_n)
        if not report["exponents_ok"]:
            raise ValueError(
                f"need 1 < q < p < φ₀, got q={self.q_exp}, p={self.p_exp}, "
                f"φ₀≈{report['phi0']:.6f}"
            )
        if not report["growth_ok"]:
            logger.warning(
                f"φ⁰≈{report['phi0_hi']:.4f} exceeds the growth bound "
                f"{report['growth_bound']:.4f} for nominal N={self.nominal_n}"
            )
        object.__setattr__(self, "index_report", report)

    def with_lambda(self, lam: float) -> "ProblemParams":
        return replace(self, lam=lam)

    @property
    def reaction(self) -> "FullReaction":
        return FullReaction(self.p_exp, self.q_exp)


class Reaction:
    """Reaction term f(x, t) and its primitive F(x, t) at quadrature points.

    ``values`` has shape (n_el, n_q) and matches ``mesh.quad_rule(mode)``.
    """

    def primitive(self, values, mesh: Mesh, mode: str):
        raise NotImplementedError

    def source(self, values, mesh: Mesh, mode: str):
        raise NotImplementedError

    def secant(self, values, mesh: Mesh, mode: str):
        """max(-f(t)/t, 0), the absorbing part of the reaction as a coefficient."""
        t = np.maximum(values, SECANT_FLOOR)
        return np.where(values > 0.0, np.maximum(-self.source(values, mesh, mode) / t, 0.0), 0.0)


class FullReaction(Reaction):
    def __init__(self, p_exp: float, q_exp: float):
        self.p_exp = p_exp
        self.q_exp = q_exp

    def primitive(self, values, mesh=None, mode=None):
        pos = np.maximum(values, 0.0)
        return pos**self.p_exp / self.p_exp - pos**self.q_exp / self.q_exp

    def source(self, values, mesh=None, mode=None):
        pos = np.maximum(values, 0.0)
        return pos ** (self.p_exp - 1.0) - pos ** (self.q_exp - 1.0)


# ── Flux and modular ────────────────────────────────────────────


def flux(spec: PhiSpec, grad):
    """a(|ξ|)ξ written as φ(|ξ|) ξ/|ξ|, zero at ξ = 0. ``grad`` has shape (..., dim)."""
    grad = np.asarray(grad, dtype=float)
    mag = np.linalg.norm(grad, axis=-1)
    safe = np.where(mag > 0.0, mag, 1.0)
    scale = np.where(mag > 0.0, spec.phi(mag) / safe, 0.0)
    return scale[..., None] * grad


def gradient_magnitudes(u: Field):
    return np.linalg.norm(u.mesh.gradient(u.coeffs), axis=1)


def modular(u: Field, pair: YoungPair) -> float:
    """∫ Φ(|∇u|), exact for element-constant gradients."""
    return float(np.dot(u.mesh.volumes, pair.big_phi(gradient_magnitudes(u))))


def flux_load(u: Field, spec: PhiSpec):
    mesh = u.mesh
    fl = flux(spec, mesh.gradient(u.coeffs))
    local = mesh.volumes[:, None] * np.einsum("ed,ekd->ek", fl, mesh.grads)
    return mesh.scatter(local)


def reaction_integral(u: Field, reaction: Reaction, mode: str) -> float:
    """∫ F(x, u)."""
    mesh = u.mesh
    values = mesh.at_quadrature(u.coeffs, mode)
    _, weights = mesh.quad_rule(mode)
    return float(np.sum(weights * reaction.primitive(values, mesh, mode)))


def reaction_load(u: Field, reaction: Reaction, mode: str):
    """Nodal vector ∫ f(x, u) ψᵢ."""
    mesh = u.mesh
    bary, weights = mesh.quad_rule(mode)
    values = mesh.at_quadrature(u.coeffs, mode)
    return mesh.scatter((weights * reaction.source(values, mesh, mode)) @ bary)


def reaction_secant_diagonal(u: Field, reaction: Reaction, mode: str):
    mesh = u.mesh
    bary, weights = mesh.quad_rule(mode)
    values = mesh.at_quadrature(u.coeffs, mode)
    return mesh.scatter((weights * reaction.secant(values, mesh, mode)) @ bary)


# ── Energies ────────────────────────────────────────────────────


def assemble_energy(u: Field, prm: ProblemParams, reaction: Optional[Reaction] = None) -> float:
    reaction = reaction or prm.reaction
    return modular(u, prm.pair) - prm.lam * reaction_integral(u, reaction, prm.quadrature)


def assemble_gradient(u: Field, prm: ProblemParams, reaction: Optional[Reaction] = None):
    """Nodal vector rᵢ = ⟨E'(u), ψᵢ⟩, zero at boundary nodes."""
    reaction = reaction or prm.reaction
    r = flux_load(u, prm.pair.phi) - prm.lam * reaction_load(u, reaction, prm.quadrature)
    r[u.mesh.boundary_mask] = 0.0
    return r


def assemble_energy_I(u: Field, prm: ProblemParams) -> float:
    """I(u) = ∫Φ(|∇u|) - (λ/p)∫u₊^p + (λ/q)∫u₊^q."""
    return assemble_energy(u, prm)


def assemble_gradient_I(u: Field, prm: ProblemParams):
    return assemble_gradient(u, prm)


def weak_residual_norm(u: Field, prm: ProblemParams, rhs_mode: Optional[Reaction] = None) -> float:
    """Sup-norm of the nodal residual over interior basis functions.

    ``rhs_mode`` is None for the full problem or a truncated reaction.
    """
    return _interior_sup(assemble_gradient(u, prm, rhs_mode), u.mesh)


def residual_scale(u: Field, prm: ProblemParams, rhs_mode: Optional[Reaction] = None) -> float:
    """Largest interior entry of the absolute loads ∫|a(|∇u|)∇u·∇ψᵢ| + λ∫|f(x, u)|ψᵢ."""
    mesh = u.mesh
    reaction = rhs_mode or prm.reaction
    fl = flux(prm.pair.phi, mesh.gradient(u.coeffs))
    flux_abs = mesh.scatter(mesh.volumes[:, None] * np.abs(np.einsum("ed,ekd->ek", fl, mesh.grads)))
    bary, weights = mesh.quad_rule(prm.quadrature)
    values = mesh.at_quadrature(u.coeffs, prm.quadrature)
    source_abs = mesh.scatter((weights * np.abs(reaction.source(values, mesh, prm.quadrature))) @ bary)
    return _interior_sup(flux_abs + prm.lam * source_abs, mesh)


def scaled_residual_norm(u: Field, prm: ProblemParams, rhs_mode: Optional[Reaction] = None) -> float:
    """weak_residual_norm / max(1, residual_scale): relative once the loads exceed 1."""
    r = assemble_gradient(u, prm, rhs_mode)
    return _interior_sup(r, u.mesh) / max(1.0, residual_scale(u, prm, rhs_mode))


def _interior_sup(values, mesh: Mesh) -> float:
    interior = mesh.interior_nodes
    if interior.size == 0:
        return 0.0
    return float(np.max(np.abs(values[interior])))


# ── Matrices ────────────────────────────────────────────────────


def weighted_stiffness(mesh: Mesh, weights=None):
    """Σₑ wₑ |e| ∇ψᵢ·∇ψⱼ as a CSR matrix; unit weights give the stiffness matrix."""
    w = np.ones(mesh.n_elements) if weights is None else np.asarray(weights, dtype=float)
    local = np.einsum("eid,ejd->eij", mesh.grads, mesh.grads) * (w * mesh.volumes)[:, None, None]
    return _assemble_local(mesh, local)


def flux_tangent(u: Field, spec: PhiSpec):
    """Σₑ |e| ∇ψᵢ·Aₑ∇ψⱼ with Aₑ the Hessian of ξ ↦ Φ(|ξ|) at ξ = ∇u|ₑ,

        Aₑ = a(|ξ|) I + (φ'(|ξ|) - a(|ξ|)) ξξᵀ/|ξ|².

    |ξ| is floored at GRAD_FLOOR and both coefficients at WEIGHT_FLOOR
    times their maximum, so the interior block stays positive definite.
    """
    mesh = u.mesh
    grad = mesh.gradient(u.coeffs)
    mags = np.maximum(np.linalg.norm(grad, axis=1), GRAD_FLOOR)
    along = spec.a(mags)
    normal = spec.dphi(mags)
    floor = WEIGHT_FLOOR * float(max(np.max(along), np.max(normal)))
    along, normal = along + floor, normal + floor
    gn = np.einsum("ekd,ed->ek", mesh.grads, grad / mags[:, None])
    local = np.einsum("eid,ejd->eij", mesh.grads, mesh.grads) * (along * mesh.volumes)[:, None, None]
    local += np.einsum("ei,ej->eij", gn, gn) * ((normal - along) * mesh.volumes)[:, None, None]
    return _assemble_local(mesh, local)


def _assemble_local(mesh: Mesh, local):
    k = mesh.dim + 1
    rows = np.repeat(mesh.elements, k, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, k)).ravel()
    return sps.coo_matrix(
        (local.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)
    ).tocsr()


def interior_block(matrix, mesh: Mesh):
    idx = mesh.interior_nodes
    return matrix[idx][:, idx]


# ── Norms ───────────────────────────────────────────────────────


@dataclass
class FieldNorms:
    luxemburg: float
    modular: float
    lp: Dict[str, float]

    def to_dict(self) -> dict:
        return {"luxemburg": self.luxemburg, "modular": self.modular, **self.lp}


def lp_norm(u: Field, exponent: float) -> float:
    mesh = u.mesh
    values = mesh.at_quadrature(u.coeffs, "gauss")
    _, weights = mesh.quad_rule("gauss")
    return float(np.sum(weights * np.abs(values) ** exponent) ** (1.0 / exponent))


def gradient_luxemburg(u: Field, pair: YoungPair) -> float:
    """‖u‖ = Luxemburg norm of |∇u|."""
    return luxemburg_norm(pair, gradient_magnitudes(u), u.mesh.volumes)


def field_norms(u: Field, pair: YoungPair, exponents: Optional[Dict[str, float]] = None) -> FieldNorms:
    """Luxemburg norm of |∇u|, the modular and Lebesgue norms of u.

    ``exponents`` maps names to Lebesgue exponents; L^{φ₀} is always included.
    """
    exps = {"L_phi0": pair.indices[0]}
    for name, r in (exponents or {}).items():
        exps[name] = r
    return FieldNorms(
        luxemburg=gradient_luxemburg(u, pair),
        modular=modular(u, pair),
        lp={name: lp_norm(u, r) for name, r in exps.items()},
    )
