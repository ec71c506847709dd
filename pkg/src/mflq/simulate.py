"""Euler-Maruyama Monte Carlo for the controlled state equation.

Paths are generated in fixed-size blocks.  Block ``k`` draws its Brownian
increments from a Philox generator keyed by ``(master_seed, k)`` and always
draws a full ``(block_size, n_steps)`` array, so the increments of a path
depend only on the seed and the path index.  Reductions run over the
concatenated per-path arrays in path order, making reports bit-identical for
any number of worker threads.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InputError

__all__ = [
    "SimulationConfig",
    "SimulationReport",
    "OpenLoopControl",
    "PerturbedControl",
    "PerturbationRow",
    "simulate",
    "difference",
    "random_directions",
    "perturbation_test",
    "write_paths_csv",
]


@dataclass(frozen=True)
class SimulationConfig:
    """Monte Carlo settings.

    ``n_steps`` defaults to the problem grid and must be a multiple of it.
    ``block_size`` fixes the random-stream layout, so changing it changes
    the draws; ``n_workers`` never does.
    """

    n_paths: int = 10_000
    n_steps: int | None = None
    master_seed: int = 0
    antithetic: bool = False
    n_workers: int = 1
    block_size: int = 4096
    keep_paths: int = 0

    def __post_init__(self):
        if int(self.n_paths) != self.n_paths or self.n_paths < 2:
            raise InputError("n_paths must be an integer >= 2")
        if self.n_steps is not None and (int(self.n_steps) != self.n_steps or self.n_steps < 1):
            raise InputError("n_steps must be a positive integer")
        if self.n_workers < 1 or self.block_size < 2:
            raise InputError("n_workers must be >= 1 and block_size >= 2")
        if self.antithetic and (self.block_size % 2 or self.n_paths % 2):
            raise InputError("antithetic sampling needs even n_paths and block_size")
        if not 0 <= self.master_seed < 2 ** 64:
            raise InputError("master_seed must fit in 64 bits")

    def steps_for(self, spec):
        N = spec.grid.n_steps
        steps = N if self.n_steps is None else int(self.n_steps)
        if steps % N:
            raise InputError(f"simulation steps {steps} must be a multiple of the grid steps {N}")
        return steps


@dataclass(frozen=True, eq=False)
class SimulationReport:
    mean_XT: np.ndarray
    se_XT: np.ndarray
    cost: float
    se_cost: float
    cost_decomposition: dict
    n_paths: int
    n_steps: int
    master_seed: int
    overflow: bool = False
    influence: np.ndarray = field(default=None, repr=False)
    paths: np.ndarray = field(default=None, repr=False)

    def to_dict(self):
        return {
            "mean_XT": self.mean_XT.tolist(), "se_XT": self.se_XT.tolist(),
            "cost": self.cost, "se_cost": self.se_cost,
            "cost_decomposition": dict(self.cost_decomposition),
            "n_paths": self.n_paths, "n_steps": self.n_steps, "master_seed": self.master_seed,
            "overflow": self.overflow,
        }


# -- controls ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OpenLoopControl:
    """Deterministic control, piecewise constant on ``values.shape[0]`` equal intervals."""

    horizon: float
    values: np.ndarray

    def gains(self, t):
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        k = np.clip(np.floor(np.asarray(t) / self.horizon * v.shape[0] + 1e-9).astype(int), 0, v.shape[0] - 1)
        return np.zeros(np.shape(t) + (v.shape[1], 0)), v[k]


@dataclass(frozen=True, eq=False)
class PerturbedControl:
    """``base + eps * v`` with ``v`` a deterministic piecewise-constant direction."""

    base: object
    direction: np.ndarray
    eps: float

    def gains(self, t):
        Th, u0 = self.base.gains(t)
        _, v = OpenLoopControl(self._horizon(), self.direction).gains(t)
        return Th, u0 + self.eps * v

    def _horizon(self):
        return getattr(self.base, "horizon")


def _tables(spec, control, steps):
    """Per-step gain and offset at the left end of each simulation step."""
    t = np.arange(steps) * (spec.grid.horizon / steps)
    Th, u0 = control.gains(t)
    n, m = spec.n, spec.m
    if Th.shape[-1] == 0:
        Th = np.zeros((steps, m, n))
    if Th.shape != (steps, m, n) or u0.shape != (steps, m):
        raise InputError(f"control has shape {Th.shape[1:]}/{u0.shape[1:]}, expected {(m, n)}/{(m,)}")
    return Th, u0


# -- core ------------------------------------------------------------------------

def _block_normals(seed, block, size, steps, antithetic):
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(seed) >> 32, int(block)])
    gen = np.random.Generator(np.random.Philox(ss))
    if antithetic:
        Z = gen.standard_normal((size // 2, steps))
        out = np.empty((size, steps))
        out[0::2], out[1::2] = Z, -Z
        return out
    return gen.standard_normal((size, steps))


def _run_block(spec, tabs, cfg, steps, block, count):
    d, c = spec.dyn, spec.cost
    Th, U0 = tabs
    N = spec.grid.n_steps
    dt = spec.grid.horizon / steps
    sq = np.sqrt(dt)
    Z = _block_normals(cfg.master_seed, block, cfg.block_size, steps, cfg.antithetic)[:count]
    X = np.broadcast_to(spec.x0, (count, spec.n)).copy()
    runQ = np.zeros(count)
    runR = np.zeros(count)
    keep = max(0, min(count, cfg.keep_paths - block * cfg.block_size))
    traj = np.empty((keep, steps + 1, spec.n)) if keep else None
    if keep:
        traj[:, 0] = X[:keep]
    ratio = steps // N
    hasQ = np.any(c.Q != 0, axis=(1, 2))
    hasR = np.any(c.R != 0, axis=(1, 2))
    for s in range(steps):
        k = s // ratio
        u = X @ Th[s].T + U0[s]
        if hasQ[k]:
            eX = X - c.q[k]
            runQ += np.sum((eX @ c.Q[k]) * eX, axis=1) * dt
        if hasR[k]:
            eU = u - c.p[k]
            runR += np.sum((eU @ c.R[k]) * eU, axis=1) * dt
        drift = X @ d.A[k].T + u @ d.B[k].T + d.a[k]
        diff = X @ d.C[k].T + u @ d.D[k].T + d.b[k]
        X += drift * dt + diff * (sq * Z[:, s])[:, None]
        if keep:
            traj[:, s + 1] = X[:keep]
    eT = X - c.xi
    termG = np.sum((eT @ c.G) * eT, axis=1)
    return X, runQ, runR, termG, traj


def _se(values, antithetic):
    if antithetic:
        values = 0.5 * (values[0::2] + values[1::2])
    return np.std(values, axis=0, ddof=1) / np.sqrt(values.shape[0])


def _reduce(spec, cfg, steps, parts):
    X = np.concatenate([p[0] for p in parts])
    runQ, runR, termG = (np.concatenate([p[i] for p in parts]) for i in (1, 2, 3))
    c = spec.cost
    mean = X.mean(axis=0)
    mf = c.meanfield(mean, spec.normalized) + (c.constant if spec.normalized else 0.0)
    grad = c.meanfield_grad(mean, spec.normalized)
    per_path = runQ + runR + termG
    infl = per_path + X @ grad
    decomp = {"running_Q": float(runQ.mean()), "running_R": float(runR.mean()),
              "terminal_G": float(termG.mean()), "terminal_meanfield": float(mf)}
    trajs = [p[4] for p in parts if p[4] is not None]
    overflow = not (np.all(np.isfinite(X)) and np.all(np.isfinite(per_path)))
    return SimulationReport(
        mean_XT=mean, se_XT=_se(X, cfg.antithetic), cost=float(sum(decomp.values())),
        se_cost=float(_se(infl, cfg.antithetic)), cost_decomposition=decomp,
        n_paths=int(cfg.n_paths), n_steps=int(steps), master_seed=int(cfg.master_seed),
        overflow=bool(overflow), influence=infl, paths=np.concatenate(trajs) if trajs else None,
    )


def simulate(spec, control, cfg=None):
    """Monte Carlo estimate of ``E X(T)`` and of the cost under ``control``.

    ``control`` is any object with ``gains(t) -> (Theta, u0)`` over an array
    of times (a :class:`mflq.duality.FeedbackLaw`, :class:`OpenLoopControl`
    or :class:`PerturbedControl`).  The mean-field term uses the plug-in
    sample mean (bias ``O(1/n_paths)``); its standard error comes from the
    delta method, folded into the per-path influence values.
    """
    cfg = cfg or SimulationConfig()
    steps = cfg.steps_for(spec)
    tabs = _tables(spec, control, steps)
    bs = cfg.block_size
    blocks = [(b, min(bs, cfg.n_paths - b * bs)) for b in range(-(-cfg.n_paths // bs))]
    work = lambda bc: _run_block(spec, tabs, cfg, steps, *bc)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if cfg.n_workers == 1:
            parts = [work(bc) for bc in blocks]
        else:
            with ThreadPoolExecutor(max_workers=cfg.n_workers) as ex:
                parts = list(ex.map(work, blocks))
        return _reduce(spec, cfg, steps, parts)


def difference(rep, base, antithetic=False):
    """Common-random-number cost difference ``rep - base`` and its standard error."""
    return rep.cost - base.cost, float(_se(rep.influence - base.influence, antithetic))


# -- perturbations ---------------------------------------------------------------

@dataclass(frozen=True)
class PerturbationRow:
    direction: int
    eps: float
    diff: float
    se_diff: float

    @property
    def ok(self):
        return self.diff >= -3.0 * self.se_diff

    def to_dict(self):
        return {"direction": self.direction, "eps": self.eps, "diff": self.diff,
                "se_diff": self.se_diff, "ok": self.ok}


def random_directions(spec, n_dirs, seed=0):
    """Piecewise-constant directions on the grid cells with unit L2 norm on ``[0, T]``."""
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((n_dirs, spec.grid.n_steps, spec.m))
    norms = np.sqrt(np.sum(V ** 2, axis=(1, 2)) * spec.grid.step)
    return V / norms[:, None, None]


def perturbation_test(spec, control, cfg=None, n_dirs=20, eps_list=(0.1, 0.5), direction_seed=0,
                      directions=None):
    """Cost differences ``J(u + eps v) - J(u)`` under common random numbers."""
    cfg = cfg or SimulationConfig()
    base = simulate(spec, control, cfg)
    V = random_directions(spec, n_dirs, direction_seed) if directions is None else directions
    rows = []
    for i, v in enumerate(V):
        for eps in eps_list:
            rep = simulate(spec, PerturbedControl(control, v, float(eps)), cfg)
            dJ, se = difference(rep, base, cfg.antithetic)
            rows.append(PerturbationRow(i, float(eps), float(dJ), se))
    return base, rows


def write_paths_csv(report, horizon, fh):
    """``path, t, x1..xn`` rows for the retained trajectories."""
    if report.paths is None:
        return
    k, S, n = report.paths.shape
    t = np.arange(S) * (horizon / (S - 1))
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["path", "t"] + [f"x{i + 1}" for i in range(n)])
    for p in range(k):
        for s in range(S):
            w.writerow([p, repr(float(t[s]))] + [repr(float(x)) for x in report.paths[p, s]])
