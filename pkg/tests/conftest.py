import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mflq import portfolio
from mflq.model import make_problem

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

BENCHMARK = np.array(portfolio.SIGMA_BENCHMARK)
SCALAR_P0 = 0.6422007040598737  # root of ln P - 1/P = -2


def scalar_standard(steps=50, **kw):
    """A = C = Q = 0, B = D = G = R = 1, T = 1."""
    x0 = kw.pop("x0", [1.0])
    args = dict(A=[[0.0]], B=[[1.0]], C=[[0.0]], D=[[1.0]], R=[[1.0]], G=[[1.0]])
    args.update(kw)
    return make_problem(1.0, steps, x0, **args)


def equal_sharpe(theta=0.4, Sigma=BENCHMARK, steps=50, T=1.0, x0=None, **kw):
    """Singular case with ``mu_i / sigma_i = theta``; ``P(t) = exp(-theta^2 (T - t)) Sigma``."""
    Sigma = np.asarray(Sigma, dtype=float)
    n = Sigma.shape[0]
    sig = np.linspace(0.1, 0.3, n)
    x0 = np.ones(n) if x0 is None else x0
    return make_problem(T, steps, x0, A=np.zeros((n, n)), B=np.diag(theta * sig), D=np.diag(sig),
                        R=np.zeros((n, n)), G=Sigma, **kw)


def random_instance(rng, n=None, m=None, steps=50, time_varying=False):
    """Random standard-case instance: PD G and R, PSD Q, generic affine terms."""
    n = int(rng.integers(1, 5)) if n is None else n
    m = int(rng.integers(1, n + 1)) if m is None else m

    def spd(k, shift):
        X = rng.normal(size=(k, k))
        return X @ X.T / k + shift * np.eye(k)

    def path(shape, scale):
        if time_varying:
            return scale * rng.normal(size=(steps,) + shape)
        return scale * rng.normal(size=shape)

    Q = spd(n, 0.0)
    Q = Q - min(0.0, np.linalg.eigvalsh(Q).min()) * np.eye(n)
    return make_problem(
        1.0, steps, rng.normal(size=n), A=path((n, n), 0.5), B=path((n, m), 1.0), C=path((n, n), 0.3),
        D=path((n, m), 0.3), a=path((n,), 1.0), b=path((n,), 1.0), Q=Q, R=spd(m, 0.5), G=spd(n, 0.5),
        Gbar=0.3 * spd(n, 0.0), q=rng.normal(size=n), p=rng.normal(size=m), xi=rng.normal(size=n),
        eta=rng.normal(size=n),
    )


@pytest.fixture(scope="session")
def mv_initial():
    return portfolio.reference_market("initial")


@pytest.fixture(scope="session")
def mv_benchmark():
    return portfolio.reference_market("benchmark")


@pytest.fixture(scope="session")
def mv_solution(mv_initial):
    return portfolio.solve_mv(mv_initial, steps=50)


# -- acceptance summary ----------------------------------------------------------

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}")
