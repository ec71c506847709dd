import io

import numpy as np
import pytest

from mflq import duality as du
from mflq.duality import FeedbackLaw
from mflq.exceptions import InputError
from mflq.model import make_problem, normalize
from mflq.simulate import (OpenLoopControl, PerturbedControl, SimulationConfig, difference, perturbation_test,
                           random_directions, simulate, write_paths_csv)

from conftest import random_instance, scalar_standard


def _abm(mu=0.3, sigma=0.5, x0=1.0, steps=10):
    """Arithmetic Brownian motion: dX = mu dt + sigma dW with no control channel."""
    return make_problem(1.0, steps, [x0], A=[[0.0]], B=[[0.0]], D=[[0.0]], a=[mu], b=[sigma], R=[[1.0]],
                        G=[[1.0]])


def _zero_control(spec):
    return OpenLoopControl(spec.grid.horizon, np.zeros((spec.grid.n_steps, spec.m)))


def test_deterministic_paths():
    spec = make_problem(1.0, 20, [0.5], A=[[0.0]], B=[[0.0]], D=[[0.0]], a=[1.0], Q=[[1.0]], R=[[1.0]],
                        G=[[2.0]], xi=[0.25])
    rep = simulate(spec, _zero_control(spec), SimulationConfig(n_paths=8, n_steps=100))
    assert rep.mean_XT[0] == pytest.approx(1.5, abs=1e-13)
    assert rep.se_XT[0] == pytest.approx(0.0, abs=1e-13)
    t = np.arange(100) / 100
    running = np.sum((0.5 + t) ** 2) / 100  # left-endpoint rule
    assert rep.cost == pytest.approx(running + 2.0 * 1.25 ** 2, abs=1e-12)
    assert rep.se_cost == pytest.approx(0.0, abs=1e-12)


def test_arithmetic_brownian_moments():
    spec = _abm()
    rep = simulate(spec, _zero_control(spec), SimulationConfig(n_paths=40_000, master_seed=3))
    assert abs(rep.mean_XT[0] - 1.3) <= 4 * rep.se_XT[0]
    assert rep.se_XT[0] == pytest.approx(0.5 / np.sqrt(40_000), rel=0.02)
    # E (X_T - 0)^2 = 1.3^2 + 0.25
    assert abs(rep.cost_decomposition["terminal_G"] - (1.69 + 0.25)) <= 4 * 0.02


def test_antithetic_mean_exact_for_additive_noise():
    spec = _abm()
    rep = simulate(spec, _zero_control(spec), SimulationConfig(n_paths=1000, antithetic=True, block_size=256))
    assert rep.mean_XT[0] == pytest.approx(1.3, abs=1e-12)
    with pytest.raises(InputError):
        SimulationConfig(n_paths=1001, antithetic=True)


def test_steps_must_refine_grid():
    spec = _abm(steps=10)
    with pytest.raises(InputError):
        simulate(spec, _zero_control(spec), SimulationConfig(n_paths=4, n_steps=15))


def test_mean_terminal_state_hits_any_target():
    spec = scalar_standard(x0=[1.0], xi=[0.5])
    sol = du.solve(spec)
    c = sol.certificate
    d = np.array([-0.7])
    law = du.feedback_for_target(sol.spec, sol.riccati, sol.aux, c.Psi, c.psi, d)
    rep = simulate(spec, law, SimulationConfig(n_paths=20_000, n_steps=400, master_seed=1))
    assert abs(rep.mean_XT[0] - d[0]) <= 4 * rep.se_XT[0] + 5e-3


def test_zero_perturbation_is_exact():
    spec = scalar_standard(x0=[1.0])
    law = du.solve(spec).feedback
    cfg = SimulationConfig(n_paths=500, n_steps=100)
    base = simulate(spec, law, cfg)
    v = random_directions(spec, 1)[0]
    rep = simulate(spec, PerturbedControl(law, v, 0.0), cfg)
    assert difference(rep, base) == (0.0, 0.0)


def test_directions_unit_norm():
    spec = random_instance(np.random.default_rng(0), n=2, m=2, steps=20)
    V = random_directions(spec, 5, seed=4)
    assert np.allclose(np.sum(V ** 2, axis=(1, 2)) * spec.grid.step, 1.0)


def test_convex_three_point():
    spec = scalar_standard(x0=[1.0], xi=[0.3], Gbar=[[0.5]])
    law = du.solve(spec).feedback
    cfg = SimulationConfig(n_paths=4000, n_steps=100, master_seed=5)
    base = simulate(spec, law, cfg)
    v = random_directions(spec, 1, seed=2)[0]
    plus = simulate(spec, PerturbedControl(law, v, 0.3), cfg)
    minus = simulate(spec, PerturbedControl(law, v, -0.3), cfg)
    second = plus.cost + minus.cost - 2 * base.cost
    se = np.std(plus.influence + minus.influence - 2 * base.influence, ddof=1) / np.sqrt(cfg.n_paths)
    assert second >= -3 * se
    assert second > 0


def test_se_scales_with_paths():
    spec = scalar_standard(x0=[1.0])
    law = du.solve(spec).feedback
    se = [simulate(spec, law, SimulationConfig(n_paths=n, n_steps=50, master_seed=9)).se_cost
          for n in (4000, 8000)]
    assert se[1] / se[0] == pytest.approx(1 / np.sqrt(2), rel=0.2)


@pytest.mark.parametrize("antithetic", [False, True])
def test_reproducible_across_workers(antithetic):
    spec = random_instance(np.random.default_rng(6), n=2, m=1, steps=10)
    law = du.solve(spec).feedback
    reps = [simulate(spec, law, SimulationConfig(n_paths=1000, n_steps=50, master_seed=2 ** 40 + 7,
                                                 antithetic=antithetic, n_workers=w, block_size=128))
            for w in (1, 2, 8)]
    for r in reps[1:]:
        assert r.to_dict() == reps[0].to_dict()
        assert np.array_equal(r.influence, reps[0].influence)


def test_seed_changes_draws():
    spec = _abm()
    a, b = (simulate(spec, _zero_control(spec), SimulationConfig(n_paths=100, master_seed=s)) for s in (0, 1))
    assert a.mean_XT[0] != b.mean_XT[0]


def test_normalised_cost_matches_original():
    spec = random_instance(np.random.default_rng(10), n=2, m=2, steps=10)
    sol = du.solve(spec)
    law = sol.feedback
    p = spec.cost.p[sol.riccati.fine_cells]
    shifted = FeedbackLaw(law.horizon, law.Theta, law.u0 - p)
    cfg = SimulationConfig(n_paths=2000, n_steps=40, master_seed=4)
    orig = simulate(spec, law, cfg)
    norm = simulate(normalize(spec), shifted, cfg)
    assert np.allclose(orig.mean_XT, norm.mean_XT, atol=1e-10)
    assert orig.cost == pytest.approx(norm.cost, rel=1e-10, abs=1e-10)


def test_perturbation_rows():
    spec = scalar_standard(x0=[1.0])
    law = du.solve(spec).feedback
    base, rows = perturbation_test(spec, law, SimulationConfig(n_paths=2000, n_steps=100), n_dirs=3)
    assert len(rows) == 6 and all(r.ok for r in rows)
    assert {r.eps for r in rows} == {0.1, 0.5}
    assert np.isfinite(base.cost)


def test_paths_csv():
    spec = _abm(steps=4)
    rep = simulate(spec, _zero_control(spec), SimulationConfig(n_paths=10, keep_paths=3, block_size=4))
    assert rep.paths.shape == (3, 5, 1)
    assert np.all(rep.paths[:, 0, 0] == 1.0)
    buf = io.StringIO()
    write_paths_csv(rep, 1.0, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "path,t,x1" and len(lines) == 1 + 3 * 5


def test_overflow_flagged():
    spec = make_problem(1.0, 4, [1.0], A=[[1e100]], B=[[0.0]], D=[[0.0]], R=[[1.0]], G=[[1.0]])
    rep = simulate(spec, _zero_control(spec), SimulationConfig(n_paths=4))
    assert rep.overflow
