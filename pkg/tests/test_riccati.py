import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from mflq import portfolio, riccati
from mflq.exceptions import AssumptionError, NearSingularGain
from mflq.model import Coefficients, make_problem, normalize

from conftest import BENCHMARK, SCALAR_P0, equal_sharpe, random_instance, scalar_standard


def _coeffs(n, m, **kw):
    z = dict(A=np.zeros((n, n)), B=np.zeros((n, m)), C=np.zeros((n, n)), D=np.zeros((n, m)),
             a=np.zeros(n), b=np.zeros(n), Q=np.zeros((n, n)), R=np.zeros((m, m)), q=np.zeros(n), p=np.zeros(m))
    z.update({k: np.asarray(v, dtype=float) for k, v in kw.items()})
    return Coefficients(**z)


def test_rhs_zero_without_dynamics():
    co = _coeffs(2, 1, R=[[1.0]])
    assert np.allclose(riccati.riccati_rhs(np.eye(2), co), 0.0)


def test_rhs_scalar_value():
    co = _coeffs(1, 1, B=[[1.0]], D=[[1.0]], R=[[1.0]])
    assert riccati.riccati_rhs(np.eye(1), co)[0, 0] == pytest.approx(-0.5)


def test_rhs_portfolio_structure(mv_initial):
    S = mv_initial.Sigma
    B, D = np.diag(mv_initial.mu), np.diag(mv_initial.sigma)
    co = _coeffs(3, 3, B=B, D=D)
    expected = -S @ B @ np.linalg.inv(D @ S @ D) @ B @ S
    assert np.allclose(riccati.riccati_rhs(S, co), expected, atol=1e-12)


def test_rhs_near_singular_gain():
    co = _coeffs(1, 1, B=[[1.0]], D=[[0.0]])
    with pytest.raises(NearSingularGain):
        riccati.riccati_rhs(np.eye(1), co)


def test_constant_without_control():
    G = np.array([[2.0, 0.3], [0.3, 1.0]])
    spec = make_problem(1.0, 10, [0.0, 0.0], A=np.zeros((2, 2)), B=np.zeros((2, 1)), R=[[1.0]], G=G)
    sol = riccati.integrate(spec)
    assert np.allclose(sol.P, G, atol=1e-14)


def test_equal_sharpe_closed_form():
    theta, T = 0.4, 1.0
    sol = riccati.integrate(equal_sharpe(theta))
    exact = np.exp(-theta ** 2 * (T - sol.grid.nodes))[:, None, None] * BENCHMARK
    assert np.max(np.abs(sol.P - exact)) < 1e-12
    assert sol.min_eig_P == pytest.approx(np.exp(-theta ** 2 * T) * np.linalg.eigvalsh(BENCHMARK).min(), rel=1e-10)


def test_scalar_standard_bisection_oracle():
    root = brentq(lambda P: np.log(P) - 1.0 / P + 2.0, 0.1, 1.0, xtol=1e-15)
    assert root == pytest.approx(SCALAR_P0, abs=1e-14)
    assert riccati.integrate(scalar_standard()).P0[0, 0] == pytest.approx(root, abs=1e-9)


def test_terminal_exact_and_symmetric():
    spec = normalize(random_instance(np.random.default_rng(5), n=3, m=2))
    sol = riccati.integrate(spec)
    assert np.array_equal(sol.P[-1], spec.cost.G)
    assert np.max(np.abs(sol.P - np.swapaxes(sol.P, 1, 2))) <= 1e-10
    M = spec.dyn.D[0].T @ sol.P[0] @ spec.dyn.D[0] + spec.cost.R[0]
    Theta = -np.linalg.solve(M, spec.dyn.B[0].T @ sol.P[0] + spec.dyn.D[0].T @ sol.P[0] @ spec.dyn.C[0])
    assert np.allclose(sol.Theta[0], Theta, atol=1e-12)
    assert np.all(np.isfinite(sol.gain_cond))


def test_matches_adaptive_oracle():
    """Compare against scipy's adaptive integrator on a random instance."""
    spec = normalize(random_instance(np.random.default_rng(11), n=2, m=2))
    co = spec.coefficients(0)
    n = spec.n

    def f(t, y):
        return -riccati.riccati_rhs(y.reshape(n, n), co).ravel()

    ref = solve_ivp(f, (1.0, 0.0), spec.cost.G.ravel(), rtol=1e-12, atol=1e-13).y[:, -1].reshape(n, n)
    assert np.allclose(riccati.integrate(spec).P0, ref, atol=1e-9)


def test_rk4_order():
    """Error ratio under substep halving approaches 16."""
    theta, T = 1.0, 1.0
    spec = equal_sharpe(theta, steps=2)
    exact = np.exp(-theta ** 2 * T) * BENCHMARK
    errs = [np.abs(riccati.integrate(spec, substeps=s).P0 - exact).max() for s in (4, 8, 16)]
    ratios = [errs[0] / errs[1], errs[1] / errs[2]]
    assert all(12 <= r <= 20 for r in ratios), ratios


@given(st.floats(0.1, 5.0), st.floats(0.0, 3.0))
def test_scalar_monotone_in_G(g2, gap):
    P = [riccati.integrate(scalar_standard(steps=10, G=[[g]])).P0[0, 0] for g in (g2 + gap, g2)]
    assert P[0] >= P[1] - 1e-12


def test_positivity_bound_trivial():
    spec = make_problem(1.0, 4, [0.0], A=[[0.0]], B=[[0.0]], R=[[1.0]], G=[[1.0]])
    rep = riccati.check_uniform_positivity(riccati.integrate(spec), spec)
    assert rep.min_eig_P == pytest.approx(1.0) and rep.ok and rep.bound <= 1.0


def test_positivity_portfolio(mv_initial):
    spec = portfolio.build(mv_initial, 20)
    rep = riccati.check_uniform_positivity(riccati.integrate(spec), spec)
    assert rep.min_eig_P > 0 and rep.ok


@given(st.integers(0, 2 ** 31))
def test_positivity_random(seed):
    spec = normalize(random_instance(np.random.default_rng(seed), steps=10))
    sol = riccati.integrate(spec)
    rep = riccati.check_uniform_positivity(sol, spec)
    assert rep.ok and sol.min_eig_P > 0 and sol.min_eig_P >= rep.bound - 1e-8


def test_refuses_neither_case():
    spec = make_problem(1.0, 4, [1.0], A=[[0.0]], B=[[1.0]], R=[[0.0]], G=[[1.0]])
    with pytest.raises(AssumptionError):
        riccati.integrate(spec)


def test_csv_layout():
    sol = riccati.integrate(equal_sharpe(steps=4))
    buf = io.StringIO()
    riccati.write_csv(sol, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "t,P11,P12,P13,P22,P23,P33"
    assert len(lines) == 6
