import math

import numpy as np
import pytest
from scipy import linalg

from app.config import Config
from app.services import solver
from app.services.assembly import (
    ProblemParams,
    assemble_energy,
    assemble_gradient,
    interior_block,
    weak_residual_norm,
    weighted_stiffness,
)
from app.services.mesh import build_mesh_1d
from app.services.solver import (
    BracketInvalid,
    DescentResult,
    NoConvergence,
    armijo_step,
    coercivity_probe,
    descent_metric,
    find_lambda_star,
    flux_monotonicity_check,
    lambda1_estimate,
    lambda_indicator,
    descend,
    minimize_energy,
    minimize_energy_multistart,
    plateau_witness,
    start_fields,
    witness_height,
)
from conftest import SEED


@pytest.fixture
def prm3(power3):
    return ProblemParams(lam=10.0, p_exp=2.5, q_exp=1.5, pair=power3)


def test_descent_metric_quadratic_case(power2, mesh_1d, rng):
    prm = ProblemParams(lam=0.0, p_exp=1.8, q_exp=1.2, pair=power2)
    u = mesh_1d.random_field(rng)
    metric = descent_metric(u, prm, prm.reaction).toarray()
    expected = 2.0 * interior_block(weighted_stiffness(mesh_1d), mesh_1d).toarray()
    np.testing.assert_allclose(metric, expected, rtol=1e-10, atol=1e-10)


def test_armijo_rejects_ascent_direction(prm3, mesh_1d):
    u = mesh_1d.bubble()
    r = assemble_gradient(u, prm3)
    assert armijo_step(u, 0.0, r, r, prm3, prm3.reaction) is None


def test_armijo_rejects_full_step_that_raises_energy(power2, mesh_1d, monkeypatch):
    # One backtrack: only the full-step fallback is left to decide.
    monkeypatch.setitem(Config.SOLVER, "max_backtracks", 1)
    prm = ProblemParams(lam=0.0, p_exp=1.8, q_exp=1.2, pair=power2)
    u = mesh_1d.field_from_function(lambda x: np.sin(32.0 * np.pi * x[:, 0]))
    target = mesh_1d.field_from_function(lambda x: 100.0 * np.sin(np.pi * x[:, 0]))
    energy = assemble_energy(u, prm)
    r = assemble_gradient(u, prm)
    d = target.coeffs - u.coeffs
    assert float(np.dot(r, d)) < 0.0
    assert assemble_energy(target, prm) > 10.0 * energy
    assert weak_residual_norm(target, prm) < weak_residual_norm(u, prm)
    assert armijo_step(u, energy, r, d, prm, prm.reaction) is None


def test_armijo_accepts_descent_step(power2, mesh_1d):
    prm = ProblemParams(lam=0.0, p_exp=1.8, q_exp=1.2, pair=power2)
    u = mesh_1d.field_from_function(lambda x: np.sin(np.pi * x[:, 0]))
    energy = assemble_energy(u, prm)
    r = assemble_gradient(u, prm)
    accepted = armijo_step(u, energy, r, -u.coeffs, prm, prm.reaction)
    assert accepted is not None
    moved, e_new, alpha = accepted
    assert e_new < energy
    assert alpha == 1.0
    assert moved.sup_norm() == pytest.approx(0.0, abs=1e-14)


def test_minimize_energy_small_lambda_reaches_zero(prm3, mesh_1d):
    u, report = minimize_energy(prm3, mesh_1d.bubble().scaled(1e-3))
    assert report["converged"]
    assert report["energy"] == pytest.approx(0.0, abs=1e-8)
    assert u.sup_norm() < 1e-3


def test_descent_result_to_dict(mesh_1d):
    result = DescentResult(mesh_1d.zero_field(), -1.0, 1e-9, 4, True)
    assert result.to_dict() == {"energy": -1.0, "residual": 1e-9, "iterations": 4, "converged": True}


@pytest.mark.parametrize("p, q, expected", [(2.5, 1.5, 2), (1.2, 1.1, 3)])
def test_witness_height(p, q, expected):
    assert witness_height(p, q) == expected


def test_plateau_witness_shape(mesh_1d, mesh_2d):
    w = plateau_witness(mesh_1d, 2.0)
    assert w.sup_norm() == pytest.approx(2.0)
    assert w.coeffs[0] == 0.0 and w.coeffs[-1] == 0.0
    middle = mesh_1d.n_nodes // 2
    assert np.all(np.diff(w.coeffs[: middle + 1]) >= 0.0)
    assert plateau_witness(mesh_2d, 3.0).sup_norm() == pytest.approx(3.0)


def test_start_fields_are_reproducible(prm3, mesh_1d):
    a = start_fields(prm3, mesh_1d, np.random.default_rng(SEED))
    b = start_fields(prm3, mesh_1d, np.random.default_rng(SEED))
    assert [name for name, _ in a] == [name for name, _ in b]
    assert a[0][0] == "zero_perturbation"
    for (_, u), (_, v) in zip(a, b):
        np.testing.assert_array_equal(u.coeffs, v.coeffs)


# ── Threshold bisection ─────────────────────────────────────────


def _fake_indicator(negative):
    return lambda lam: (negative(lam), -1.0 if negative(lam) else 0.0)


def test_find_lambda_star_monotone_indicator(prm3, mesh_1d):
    estimate, points = find_lambda_star(
        prm3, mesh_1d, 0.0, 10.0, bisect_tol=1e-2, indicator=_fake_indicator(lambda lam: lam > 3.0)
    )
    assert estimate == pytest.approx(3.0, abs=1e-2)
    lambdas = [pt["lambda"] for pt in points]
    assert lambdas == sorted(lambdas)
    assert lambdas[0] == 0.0 and lambdas[-1] == 10.0


def test_find_lambda_star_passes_solver_settings(prm3, mesh_1d, monkeypatch):
    seen = []

    def fake(prm, mesh, seed, eps_neg=None, tol=None, max_iter=None):
        seen.append((tol, max_iter))
        negative = prm.lam > 3.0
        return negative, -1.0 if negative else 0.0, None, {"converged": True}

    monkeypatch.setattr(solver, "lambda_indicator", fake)
    find_lambda_star(prm3, mesh_1d, 0.0, 10.0, bisect_tol=1.0, tol=1e-4, max_iter=17)
    assert len(seen) >= 2
    assert set(seen) == {(1e-4, 17)}


def test_find_lambda_star_detects_non_monotone_indicator(prm3, mesh_1d):
    def negative(lam):
        return 1.4 < lam < 1.6 or lam > 3.0

    with pytest.raises(BracketInvalid):
        find_lambda_star(prm3, mesh_1d, 0.0, 10.0, bisect_tol=1e-2, indicator=_fake_indicator(negative))


@pytest.mark.parametrize("lo, hi, negative", [(1.0, 10.0, lambda lam: True), (0.0, 10.0, lambda lam: False)])
def test_find_lambda_star_bad_bracket(prm3, mesh_1d, lo, hi, negative):
    with pytest.raises(BracketInvalid):
        find_lambda_star(prm3, mesh_1d, lo, hi, indicator=_fake_indicator(negative))


def test_find_lambda_star_rejects_reversed_bracket(prm3, mesh_1d):
    with pytest.raises(BracketInvalid):
        find_lambda_star(prm3, mesh_1d, 5.0, 1.0, indicator=_fake_indicator(lambda lam: False))


# ── Estimates ───────────────────────────────────────────────────


def test_flux_monotonicity_quadratic(power2, rng):
    out = flux_monotonicity_check(power2, 1000, rng)
    assert out["trials"] == 1000
    assert out["min_gap"] > 0.0
    with pytest.raises(ValueError):
        flux_monotonicity_check(power2, 0, rng)


def test_coercivity_probe(power3, mesh_1d, rng):
    prm = ProblemParams(lam=1.0, p_exp=2.5, q_exp=1.5, pair=power3)
    out = coercivity_probe(prm, mesh_1d, rng, n_fields=3)
    assert out["I_increasing"]
    assert out["J_increasing"] is None
    assert len(out["samples"]) == 3
    assert math.isfinite(out["fitted_C"])


@pytest.mark.slow
def test_lambda1_quadratic_matches_dirichlet_eigenvalue(power2):
    n = 400
    mesh = build_mesh_1d(n)
    h = 1.0 / n
    m = n - 1
    stiffness = (np.diag(np.full(m, 2.0)) - np.diag(np.ones(m - 1), 1) - np.diag(np.ones(m - 1), -1)) / h
    mass = (np.diag(np.full(m, 4.0)) + np.diag(np.ones(m - 1), 1) + np.diag(np.ones(m - 1), -1)) * h / 6.0
    oracle = float(linalg.eigh(stiffness, mass, eigvals_only=True, subset_by_index=[0, 0])[0])
    estimate = lambda1_estimate(power2, mesh, n_restarts=1)
    assert oracle == pytest.approx(math.pi**2, rel=1e-3)
    assert estimate == pytest.approx(oracle, rel=1e-4)
    assert estimate == pytest.approx(math.pi**2, rel=2e-2)


@pytest.mark.slow
def test_lambda_indicator_brackets_threshold(power3):
    mesh = build_mesh_1d(100)
    template = ProblemParams(lam=1.0, p_exp=2.5, q_exp=1.5, pair=power3)
    below, energy_below, _, _ = lambda_indicator(template.with_lambda(100.0), mesh, SEED)
    above, energy_above, _, report = lambda_indicator(template.with_lambda(1000.0), mesh, SEED)
    assert not below
    assert energy_below == pytest.approx(0.0, abs=1e-6)
    assert above
    assert energy_above < 0.0
    assert report["converged"]


# ── Multi-start ─────────────────────────────────────────────────


def _stalling_minimizer(stalled_energy):
    """Converges to 0 from the near-zero start, stalls at ``stalled_energy`` elsewhere."""

    def fake(prm, start, tol=None, max_iter=None):
        if start.sup_norm() < 1e-2:
            return start.scaled(0.0), {"energy": 0.0, "residual": 0.0, "iterations": 1, "converged": True}
        raise NoConvergence("stalled", best=start, iterations=7, residual=1e-3, energy=stalled_energy)

    return fake


def test_multistart_refuses_converged_minimum_above_stalled_start(prm3, mesh_1d, rng, monkeypatch):
    monkeypatch.setattr(solver, "minimize_energy", _stalling_minimizer(-5.0))
    with pytest.raises(NoConvergence) as info:
        minimize_energy_multistart(prm3, mesh_1d, rng)
    assert info.value.energy == -5.0
    runs = info.value.starts
    assert runs[0]["start"] == "zero_perturbation" and runs[0]["converged"]
    assert not any(run["converged"] for run in runs[1:])


def test_multistart_keeps_converged_minimum_below_stalled_starts(prm3, mesh_1d, rng, monkeypatch):
    monkeypatch.setattr(solver, "minimize_energy", _stalling_minimizer(3.0))
    u, report = minimize_energy_multistart(prm3, mesh_1d, rng)
    assert report["energy"] == 0.0
    assert u.sup_norm() == 0.0


def test_lambda_indicator_counts_stalled_negative_energy(prm3, mesh_1d, monkeypatch):
    monkeypatch.setattr(solver, "minimize_energy", _stalling_minimizer(-5.0))
    negative, energy, best, report = lambda_indicator(prm3, mesh_1d, SEED)
    assert negative
    assert energy == -5.0
    assert best is not None
    assert report["converged"] is False


def test_lambda_indicator_reraises_when_nothing_converges(prm3, mesh_1d, monkeypatch):
    def never(prm, start, tol=None, max_iter=None):
        raise NoConvergence("stalled", best=start, energy=1.0)

    monkeypatch.setattr(solver, "minimize_energy", never)
    with pytest.raises(NoConvergence):
        lambda_indicator(prm3, mesh_1d, SEED)


def test_witness_start_follows_energy_scale(power3, mesh_1d, rng):
    small = start_fields(ProblemParams(lam=10.0, p_exp=2.5, q_exp=1.5, pair=power3), mesh_1d, rng)
    large = start_fields(ProblemParams(lam=4500.0, p_exp=2.5, q_exp=1.5, pair=power3), mesh_1d, rng)
    assert small[1][1].sup_norm() == pytest.approx(2.0)
    assert large[1][1].sup_norm() > 10.0
    assert assemble_energy(large[1][1], ProblemParams(lam=4500.0, p_exp=2.5, q_exp=1.5, pair=power3)) < 0.0


@pytest.mark.slow
def test_descend_converges_on_large_minimizer(power3):
    mesh = build_mesh_1d(64)
    prm = ProblemParams(lam=600.0, p_exp=2.5, q_exp=1.5, pair=power3)
    witness = plateau_witness(mesh, 50.0, fraction=0.1)
    assert assemble_energy(witness, prm) < 0.0
    result = descend(prm, witness)
    assert result.converged
    assert result.residual <= Config.SOLVER["tol"]
    assert result.energy < -1.0
    assert result.field.sup_norm() > 2.0
