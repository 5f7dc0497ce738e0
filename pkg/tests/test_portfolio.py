import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import bisection_oracle

from insider_donsker import donsker as dk
from insider_donsker import portfolio as pf
from insider_donsker.donsker import InsiderSpec
from insider_donsker.errors import (
    DegenerateMarket,
    DegenerateVolatility,
    DensityFloor,
    InvalidRegime,
    NoRootInBracket,
)
from insider_donsker.market import MarketSpec, simulate_paths


# -- closed form ------------------------------------------------------------------


def test_log_pi_brownian_without_edge_is_merton():
    assert pf.log_pi_brownian(0.1, 0.2, 0.0).pi == pytest.approx(2.5, rel=1e-15)


def test_log_pi_brownian_gaussian_insider_example():
    spec = InsiderSpec.gaussian(1.0, 1.0)
    phi = dk.gaussian_phi(spec, 0.0, 0.5, 0.0)
    res = pf.log_pi_brownian(0.1, 0.2, phi)
    assert res.pi == pytest.approx(5.0, abs=1e-12)
    assert res.status == pf.CONVERGED and res.foc_residual < 1e-12
    assert pf.gaussian_insider_fraction(0.1, 0.2, 0.5, 0.0, 0.0, 1.0) == pytest.approx(5.0)


def test_log_pi_brownian_maximizes_objective_on_grid():
    spec = InsiderSpec.gaussian(1.0, 1.0)
    phi = dk.gaussian_phi(spec, 0.25, 0.3, -0.2)
    b0, s0 = 0.1, 0.2
    res = pf.log_pi_brownian(b0, s0, phi)
    grid = np.linspace(-20, 20, 10**4)
    obj = grid * b0 - 0.5 * grid**2 * s0**2 + s0 * phi * grid
    assert abs(grid[np.argmax(obj)] - res.pi) <= grid[1] - grid[0]


def test_degenerate_volatility():
    with pytest.raises(DegenerateVolatility):
        pf.log_pi_brownian(0.1, 1e-13, 0.0)


# -- first-order conditions -------------------------------------------------------------


def test_foc_bp_zero_edge_zero_drift():
    assert pf.solve_foc_bp(0.0, 0.2, 0.3, 1.0, 0.0, 0.0).pi == 0.0


@pytest.mark.parametrize("b0,s0,phi", [(0.1, 0.2, 0.3), (-0.05, 0.3, 0.0), (0.02, 0.1, -0.7)])
def test_foc_bp_small_jump_matches_brownian(b0, s0, phi):
    a = pf.solve_foc_bp(b0, s0, 1e-8, 1.0, phi, 0.2).pi
    assert abs(a - pf.log_pi_brownian(b0, s0, phi).pi) < 1e-5


def test_foc_bp_bisection_oracle_example():
    res = pf.solve_foc_bp(0.05, 0.2, 0.3, 0.1, 0.0, 0.0)
    ref = bisection_oracle(0.05, 0.2, [0.3], [0.1], 0.0, [0.0])
    assert abs(res.pi - ref) < 1e-8 and res.foc_residual < 1e-10


def test_foc_levy_single_mark_equals_bp():
    a = pf.solve_foc_bp(0.04, 0.25, -0.2, 0.7, 0.3, -0.1)
    b = pf.solve_foc_levy(0.04, 0.25, {1.0: -0.2}, {1.0: 0.7}, 0.3, {1.0: -0.1})
    assert a.pi == b.pi and a.foc_residual == b.foc_residual


def test_foc_levy_zero_jumps_equals_brownian():
    res = pf.solve_foc_levy(0.03, 0.15, {1.0: 0.0, -1.0: 0.0}, {1.0: 0.3, -1.0: 0.2}, 0.4, {})
    assert res.pi == pytest.approx(pf.log_pi_brownian(0.03, 0.15, 0.4).pi, rel=1e-12)


def test_foc_levy_two_marks_oracle():
    res = pf.solve_foc_levy(0.03, 0.15, {1.0: 0.2, -1.0: -0.1}, {1.0: 0.3, -1.0: 0.2}, 0.0, {1.0: 0.0, -1.0: 0.0})
    ref = bisection_oracle(0.03, 0.15, [0.2, -0.1], [0.3, 0.2], 0.0, [0.0, 0.0])
    assert abs(res.pi - ref) < 1e-8
    assert res.admissibility_margin == pytest.approx(min(1 + 0.2 * res.pi, 1 - 0.1 * res.pi))


def test_foc_poisson_pure_examples():
    assert pf.solve_foc_poisson_pure(0.0, 0.5, 2.0, 0.0).pi == 0.0
    base = pf.solve_foc_poisson_pure(0.2, 0.5, 2.0, 0.0)
    assert abs(base.pi - bisection_oracle(0.2, 0.0, [0.5], [2.0], 0.0, [0.0])) < 1e-8
    more = pf.solve_foc_poisson_pure(0.2, 0.5, 2.0, 0.1)
    assert abs(more.pi - bisection_oracle(0.2, 0.0, [0.5], [2.0], 0.0, [0.1])) < 1e-8
    assert more.pi > base.pi


def test_foc_poisson_pure_invalid_regime():
    with pytest.raises(InvalidRegime):
        pf.solve_foc_poisson_pure(1.0, 0.5, 2.0, 0.0)
    with pytest.raises(DegenerateMarket):
        pf.solve_foc_poisson_pure(0.1, 0.0, 2.0, 0.0)


def test_degenerate_market():
    with pytest.raises(DegenerateMarket):
        pf.solve_foc_bp(0.1, 0.0, 0.0, 1.0, 0.0, 0.0)


def test_no_solution_status_and_strict_mode():
    # no diffusion and b0 >= lambda gamma: f stays positive on the admissible interval
    res = pf.solve_foc_levy(1.5, 0.0, [0.5], [2.0], 0.0, [0.0])
    assert res.status == pf.NO_SOLUTION and math.isnan(res.pi)
    assert res.endpoint_values is not None and all(v > 0 for v in res.endpoint_values)
    with pytest.raises(NoRootInBracket):
        pf.solve_foc_levy(1.5, 0.0, [0.5], [2.0], 0.0, [0.0], strict=True)


def test_vectorised_root_matches_scalar_solver():
    rng = np.random.default_rng(3)
    n = 200
    b0 = rng.uniform(-0.1, 0.1, n)
    phi = rng.uniform(-1, 1, n)
    psi = rng.uniform(-0.5, 0.5, (n, 2))
    gam = np.array([0.2, -0.1])
    nu = np.array([0.3, 0.2])
    pi, resid, found, *_ = pf.foc_root(b0, 0.15, gam, nu, phi, psi)
    assert found.all() and np.max(resid) < 1e-10
    for i in range(0, n, 20):
        assert pi[i] == pytest.approx(pf.solve_foc_levy(b0[i], 0.15, gam, nu, phi[i], psi[i]).pi, abs=1e-12)


def test_multiple_roots_pick_the_best_objective():
    # Psi < -1 breaks monotonicity of f. Here f = 0.2 - 0.01 pi - 0.5 / (1 + pi),
    # whose roots are (19 -+ sqrt(241)) / 2; the solver keeps the better stationary point.
    args = (1.2, 0.1, np.array([1.0]), np.array([1.0]), 0.0, np.array([-1.5]))
    roots = [(19 - math.sqrt(241)) / 2, (19 + math.sqrt(241)) / 2]
    for r in roots:
        assert abs(pf.foc_value(r, *args)) < 1e-12
    best = max(roots, key=lambda r: float(pf.objective(r, *args)))
    res = pf.solve_foc_levy(1.2, 0.1, [1.0], [1.0], 0.0, [-1.5])
    assert res.status == pf.CONVERGED
    assert res.pi == pytest.approx(best, abs=1e-8)


admissible = st.tuples(
    st.floats(-0.1, 0.1),  # b0
    st.floats(0.05, 0.5),  # sigma0
    st.floats(-0.8, 0.8).filter(lambda g: abs(g) > 1e-3),  # gamma0
    st.floats(0.05, 3.0),  # lambda
    st.floats(-1.0, 1.0),  # phi
    st.floats(-0.9, 1.0),  # psi
)


@given(admissible)
def test_foc_bp_matches_oracle_property(p):
    b0, s0, g, lam, phi, psi = p
    res = pf.solve_foc_bp(b0, s0, g, lam, phi, psi)
    ref = bisection_oracle(b0, s0, [g], [lam], phi, [psi])
    assert res.status == pf.CONVERGED and abs(res.pi - ref) < 1e-8
    assert res.foc_residual < 1e-10 and res.admissibility_margin > 0


@given(admissible)
def test_objective_concave_and_root_is_argmax(p):
    b0, s0, g, lam, phi, psi = p
    args = (b0, s0, np.array([g]), np.array([lam]), phi, np.array([psi]))
    lo, hi = pf.admissible_interval(np.array([g]), np.array([lam]))
    rng = np.random.default_rng(0)
    pis = rng.uniform(max(float(lo), -100), min(float(hi), 100), 100)
    assert np.all(pf.objective_curvature(pis, *args) < 0)
    res = pf.solve_foc_bp(b0, s0, g, lam, phi, psi)
    grid = np.linspace(max(float(lo), res.pi - 1), min(float(hi), res.pi + 1), 10**4)
    obj = pf.objective(grid, *args)
    assert abs(grid[np.argmax(obj)] - res.pi) <= 2 * (grid[1] - grid[0])


@given(admissible)
def test_merton_reduction(p):
    b0, s0, g, lam, _, _ = p
    base = pf.solve_foc_bp(b0, s0, g, lam, 0.0, 0.0).pi
    d = [abs(pf.solve_foc_bp(b0, s0, g, lam, e, e).pi - base) / e for e in (1e-3, 1e-6)]
    # Lipschitz with the same constant at both scales
    assert d[1] <= 2 * d[0] + 1e-6 and d[0] < 1e3


def test_scale_invariance_of_policies():
    spec = InsiderSpec.brownian_poisson(1.0, 0.5, 1.0)
    m1 = MarketSpec(b0=0.05, sigma0=0.2, gamma0=0.3, x0=1.0, T=0.5)
    m100 = MarketSpec(b0=0.05, sigma0=0.2, gamma0=0.3, x0=100.0, T=0.5)
    p = simulate_paths(spec, m1, 20, 1, steps=32)
    st_ = p.state(8)
    a = pf.LogInsiderPolicy(spec, m1)(float(p.times[8]), p.realized_Y, st_)
    b = pf.LogInsiderPolicy(spec, m100)(float(p.times[8]), p.realized_Y, st_)
    assert np.array_equal(a, b)


# -- Hamiltonian and stationarity --------------------------------------------------


def test_hamiltonian_linear_form():
    mk = MarketSpec(b0=0.1, sigma0=0.2)
    adj = pf.AdjointState(p=1.0, q=0.0, r={})
    for pi in (-1.0, 0.5, 3.0):
        assert pf.hamiltonian(0.0, 2.0, 0.0, pi, adj, mk) == pytest.approx(0.2 * pi)
        assert pf.hamiltonian_grad_pi(0.0, 2.0, 0.0, pi, adj, mk) == pytest.approx(0.2)


def test_hamiltonian_with_running_utility_uses_density():
    mk = MarketSpec(b0=0.1, sigma0=0.2)
    adj = pf.AdjointState(p=1.0, q=0.0)
    st_ = dk.conditional_state(InsiderSpec.gaussian(), 0.0, 0.0, 0.0)
    h = pf.hamiltonian(0.0, 2.0, 0.0, 1.0, adj, mk, st_, f=0.5)
    assert h == pytest.approx(0.2 + 0.5 * st_.m)


def test_brownian_relation_makes_gradient_vanish():
    b0, s0 = 0.1, 0.2
    mk = MarketSpec(b0=b0, sigma0=s0)
    adj = pf.AdjointState(p=1.7, q=-(b0 / s0) * 1.7)
    for pi in (-3.0, 0.0, 2.5, 40.0):
        assert abs(pf.hamiltonian_grad_pi(0.0, 1.3, 0.0, pi, adj, mk)) < 1e-15


def test_poisson_relation_makes_gradient_vanish():
    b0, g, lam = 0.2, 0.5, 2.0
    ins = InsiderSpec.brownian_poisson(1.0, lam, 1.0)
    mk = MarketSpec(b0=b0, sigma0=0.0, gamma0=g)
    adj = pf.AdjointState(p=0.8, q=0.0, r={0: -(b0 / (lam * g)) * 0.8})
    res = pf.solve_foc_poisson_pure(b0, g, lam, 0.1)
    assert abs(pf.hamiltonian_grad_pi(0.0, 1.0, 0.0, res.pi, adj, mk, insider=ins)) < 1e-15
    assert abs(res.hamiltonian_grad) < 1e-15


def test_relation_adjoint_regimes():
    a = pf.relation_adjoint(2.0, 0.1, 0.2, [0.3], [1.0])
    assert a.q == pytest.approx(-1.0) and a.r == {0: 0.0}
    b = pf.relation_adjoint(2.0, 0.1, 0.0, [0.5], [2.0])
    assert b.q == 0.0 and b.r[0] == pytest.approx(-0.2)


# -- policies along paths ---------------------------------------------------------------


def test_log_insider_policy_gaussian_matches_closed_form():
    spec = InsiderSpec.gaussian(1.0, 1.0)
    mk = MarketSpec(b0=0.1, sigma0=0.2, T=0.5)
    p = simulate_paths(spec, mk, 10, 2, steps=64)
    k = 16
    got = pf.LogInsiderPolicy(spec, mk)(float(p.times[k]), p.realized_Y, p.state(k))
    want = pf.gaussian_insider_fraction(0.1, 0.2, p.realized_Y, p.B[:, k], p.times[k], 1.0)
    np.testing.assert_allclose(got, want, rtol=1e-13)


def test_log_insider_policy_with_jumps_solves_foc_per_path():
    spec = InsiderSpec.brownian_poisson(1.0, 0.5, 1.0)
    mk = MarketSpec(b0=0.05, sigma0=0.2, gamma0=0.3, T=0.5)
    p = simulate_paths(spec, mk, 6, 2, steps=32)
    k = 8
    t = float(p.times[k])
    got = pf.LogInsiderPolicy(spec, mk)(t, p.realized_Y, p.state(k))
    for i in range(6):
        y, b, n = p.realized_Y[i], p.B[i, k], p.n_tilde[i, k, 0]
        phi = dk.bp_phi(spec, t, y, (b, n))
        psi = dk.bp_psi(spec, t, y, (b, n))
        assert got[i] == pytest.approx(pf.solve_foc_bp(0.05, 0.2, 0.3, 0.5, phi, psi).pi, abs=1e-10)


def test_merton_policy_values():
    mk = MarketSpec(b0=0.1, sigma0=0.2)
    np.testing.assert_allclose(pf.MertonPolicy(mk)(0.0, np.zeros(3), None), 2.5, rtol=1e-15)
    spec = InsiderSpec.brownian_poisson(1.0, 0.1, 1.0)
    mj = MarketSpec(b0=0.05, sigma0=0.2, gamma0=0.3)
    got = pf.MertonPolicy(mj, spec)(0.0, np.zeros(2), None)
    assert got[0] == pytest.approx(pf.solve_foc_bp(0.05, 0.2, 0.3, 0.1, 0.0, 0.0).pi, abs=1e-12)


def test_policy_raises_on_density_floor():
    spec = InsiderSpec.gaussian(1.0, 1.0)
    mk = MarketSpec(b0=0.1, sigma0=0.2, T=0.5)
    p = simulate_paths(spec, mk, 1, 0, steps=8)
    with pytest.raises(DensityFloor):
        pf.LogInsiderPolicy(spec, mk)(0.0, np.array([50.0]), p.state(0))
