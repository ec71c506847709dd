"""Linear backward systems for the Lagrangian decomposition.

With deterministic data the adjoint BSDEs lose their martingale parts and
become linear ODEs, integrated backward from ``T``:

* H-system: ``dH/dt = -(Ahat^T H + Chat^T P b + P a - Q q)``; ``H^0(T) = -G xi``,
  homogeneous ``H^i(T) = e_i``.
* K-system (``K = P^{-1} H``): ``dK/dt = -((-A - P^{-1}Q - P^{-1} S C) K + a
  + P^{-1} S b - P^{-1} Q q)`` with ``S = Chat^T P``; ``K^0(T) = -xi``,
  homogeneous ``K^i(T) = G^{-1} e_i``.

The particular solution and the ``n`` homogeneous ones are advanced together
as one ``n x (n+1)`` matrix ODE (column 0 carries the forcing).  Each RK4
step reuses the Riccati stage values, which makes the combined scheme the
classical RK4 of the coupled (P, H) system.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._linalg import min_eig, sym
from .exceptions import SingularG, SingularP

__all__ = [
    "Gains",
    "BackwardPaths",
    "AuxiliarySolution",
    "gains_at",
    "stage_gains",
    "node_gains",
    "solve_H_system",
    "solve_K_system",
    "solve_H_terminal",
    "solve_auxiliary",
    "offset_control",
    "offset_control_k",
    "consistency_check",
    "write_csv",
]

P_EIG_MIN = 1e-12


class Gains(NamedTuple):
    """Coefficients and Riccati-derived quantities at a stack of time points."""

    P: np.ndarray
    cells: np.ndarray
    M: np.ndarray
    Theta: np.ndarray
    Ahat: np.ndarray
    Chat: np.ndarray


def gains_at(spec, P, cells):
    d, c = spec.dyn, spec.cost
    B, C, D = d.B[cells], d.C[cells], d.D[cells]
    Dt = np.swapaxes(D, -1, -2)
    M = sym(Dt @ P @ D + c.R[cells])
    Theta = -np.linalg.solve(M, np.swapaxes(B, -1, -2) @ P + Dt @ P @ C)
    return Gains(P, cells, M, Theta, d.A[cells] + B @ Theta, C + D @ Theta)


def stage_gains(spec, ric):
    """Gains at every RK4 stage, flattened to ``(N*substeps*4, ...)``."""
    Ns = ric.P_stages.shape[0]
    n = spec.n
    cells = np.repeat(np.arange(Ns) // ric.substeps, 4)
    return gains_at(spec, ric.P_stages.reshape(Ns * 4, n, n), cells)


def node_gains(spec, ric, side):
    """Gains at grid nodes using the cell to the right (``side='left'``
    endpoints, nodes 0..N-1) or to the left (``side='right'``, nodes 1..N)."""
    N = spec.grid.n_steps
    cells = np.arange(N)
    P = ric.P[:-1] if side == "left" else ric.P[1:]
    return gains_at(spec, P, cells)


@dataclass(frozen=True, eq=False)
class BackwardPaths:
    """A width-``n+1`` backward solution: column 0 particular, 1..n homogeneous."""

    nodes: np.ndarray
    fine: np.ndarray
    stages: np.ndarray

    @property
    def particular(self):
        return self.nodes[..., 0]

    @property
    def homogeneous(self):
        return self.nodes[..., 1:]


def _linear_backward(F, f, yT, h):
    """RK4 for ``dy/dtau = F y + f e_0^T`` in reversed time ``tau = T - t``.

    ``F`` has shape ``(Ns, 4, n, n)`` (one matrix per step and stage) and
    ``f`` shape ``(Ns, 4, n)``; the forcing enters column 0 only.
    """
    Ns = F.shape[0]
    y = np.array(yT, dtype=float)
    fine = np.empty((Ns + 1,) + y.shape)
    stages = np.empty((Ns, 4) + y.shape)
    fine[Ns] = y

    def rhs(j, s, z):
        out = F[j, s] @ z
        out[:, 0] += f[j, s]
        return out

    for j in range(Ns - 1, -1, -1):
        k1 = rhs(j, 0, y)
        y2 = y + 0.5 * h * k1
        k2 = rhs(j, 1, y2)
        y3 = y + 0.5 * h * k2
        k3 = rhs(j, 2, y3)
        y4 = y + h * k3
        k4 = rhs(j, 3, y4)
        stages[j] = (y, y2, y3, y4)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        fine[j] = y
    return fine, stages


def _paths(fine, stages, substeps):
    nodes = fine[::substeps].copy()
    for arr in (fine, stages, nodes):
        arr.flags.writeable = False
    return BackwardPaths(nodes, fine, stages)


def _h_forcing(spec, g):
    c, d = spec.cost, spec.dyn
    a, b, q, Q = d.a[g.cells], d.b[g.cells], c.q[g.cells], c.Q[g.cells]
    Pb = np.einsum("lij,lj->li", g.P, b)
    return (np.einsum("lji,lj->li", g.Chat, Pb) + np.einsum("lij,lj->li", g.P, a)
            - np.einsum("lij,lj->li", Q, q))


def _h_system(spec, ric, yT, forcing=True):
    g = stage_gains(spec, ric)
    Ns, n = ric.P_stages.shape[0], spec.n
    F = np.swapaxes(g.Ahat, -1, -2).reshape(Ns, 4, n, n)
    f = _h_forcing(spec, g).reshape(Ns, 4, n) if forcing else np.zeros((Ns, 4, n))
    return _linear_backward(F, f, yT, ric.fine_step)


def solve_H_system(spec, ric):
    """Particular ``H^0`` and homogeneous ``H^i`` paths stacked column-wise."""
    n = spec.n
    yT = np.column_stack([-spec.cost.G @ spec.cost.xi, np.eye(n)])
    return _paths(*_h_system(spec, ric, yT), ric.substeps)


def solve_H_terminal(spec, ric, terminal):
    """Single H-system solve with terminal value ``terminal`` (e.g. ``lam - G xi``).

    Used as a direct check of the superposition ``H = H^0 + sum lam_i H^i``.
    """
    fine, stages = _h_system(spec, ric, np.asarray(terminal, dtype=float)[:, None])
    return _paths(fine, stages, ric.substeps)


def _check_P(P):
    lo = min_eig(P)
    if not lo >= P_EIG_MIN:
        raise SingularP(f"lambda_min(P) = {lo:.3g} < {P_EIG_MIN:g}", lam_min=lo)


def solve_K_system(spec, ric):
    """Particular ``K^0`` and homogeneous ``K^i`` paths stacked column-wise.

    Needs ``P`` invertible along the whole path and ``G`` invertible.
    """
    c, d = spec.cost, spec.dyn
    n = spec.n
    if not min_eig(c.G) >= P_EIG_MIN:
        raise SingularG("G is not invertible; the K-system terminal G^{-1} e_i is undefined")
    _check_P(ric.P_stages)
    _check_P(ric.P_fine)
    g = stage_gains(spec, ric)
    Ns = ric.P_stages.shape[0]
    A, C, Q = d.A[g.cells], d.C[g.cells], c.Q[g.cells]
    a, b, q = d.a[g.cells], d.b[g.cells], c.q[g.cells]
    S = np.swapaxes(g.Chat, -1, -2) @ g.P
    Pinv = np.linalg.inv(g.P)
    F = -A - Pinv @ Q - Pinv @ S @ C
    f = (a + np.einsum("lij,lj->li", Pinv @ S, b) - np.einsum("lij,lj->li", Pinv @ Q, q))
    yT = np.column_stack([-c.xi, np.linalg.inv(c.G)])
    fine, stages = _linear_backward(F.reshape(Ns, 4, n, n), f.reshape(Ns, 4, n), yT, ric.fine_step)
    return _paths(fine, stages, ric.substeps)


@dataclass(frozen=True, eq=False)
class AuxiliarySolution:
    """H- and K-system paths plus the derived node tables ``S``, ``Rscript``.

    ``K`` is ``None`` when ``G`` is singular (only the H route exists then).
    ``u0`` is the lambda-free offset control on the nodes.
    """

    H: BackwardPaths
    K: BackwardPaths | None
    S: np.ndarray
    Rscript: np.ndarray
    u0: np.ndarray

    @property
    def H0(self):
        return self.H.particular

    @property
    def Hi(self):
        return self.H.homogeneous

    @property
    def K0(self):
        return None if self.K is None else self.K.particular

    @property
    def Ki(self):
        return None if self.K is None else self.K.homogeneous


def _rscript(P, D, M):
    PD = P @ D
    return sym(P - PD @ np.linalg.solve(M, np.swapaxes(PD, -1, -2)))


def solve_auxiliary(spec, ric):
    H = solve_H_system(spec, ric)
    try:
        K = solve_K_system(spec, ric)
    except SingularG:
        K = None
    N = spec.grid.n_steps
    cells = np.minimum(np.arange(N + 1), N - 1)
    g = gains_at(spec, ric.P, cells)
    S = np.swapaxes(g.Chat, -1, -2) @ g.P
    Rs = _rscript(g.P, spec.dyn.D[cells], g.M)
    aux = AuxiliarySolution(H, K, S, Rs, None)
    object.__setattr__(aux, "u0", offset_control(spec, ric, aux, np.zeros(spec.n)))
    return aux


def _offset(spec, g, H):
    d = spec.dyn
    B, D, b = d.B[g.cells], d.D[g.cells], d.b[g.cells]
    rhs = np.einsum("lji,lj->li", B, H) + np.einsum("lji,lj->li", D, np.einsum("lij,lj->li", g.P, b))
    return -np.linalg.solve(g.M, rhs[..., None])[..., 0]


def offset_control(spec, ric, aux, lam, fine=False):
    """``u0 = -(D^T P D + R)^{-1} (B^T H + D^T P b)`` with ``H = H^0 + sum lam_i H^i``.

    Tabulated on the grid nodes, or on the fine RK4 grid with ``fine=True``.
    """
    lam = np.asarray(lam, dtype=float)
    if fine:
        Hp, P, cells = aux.H.fine, ric.P_fine, ric.fine_cells
    else:
        N = spec.grid.n_steps
        Hp, P, cells = aux.H.nodes, ric.P, np.minimum(np.arange(N + 1), N - 1)
    H = Hp[..., 0] + Hp[..., 1:] @ lam
    return _offset(spec, gains_at(spec, P, cells), H)


def offset_control_k(spec, ric, aux, lam):
    """The same offset assembled from the K route, ``H`` replaced by ``P K``."""
    if aux.K is None:
        raise SingularG("K-system unavailable")
    lam = np.asarray(lam, dtype=float)
    N = spec.grid.n_steps
    cells = np.minimum(np.arange(N + 1), N - 1)
    K = aux.K.nodes[..., 0] + aux.K.nodes[..., 1:] @ lam
    g = gains_at(spec, ric.P, cells)
    return _offset(spec, g, np.einsum("lij,lj->li", ric.P, K))


def consistency_check(ric, aux):
    """Max over nodes and columns of ``||P K^i - H^i||``."""
    if aux.K is None:
        return np.nan
    dev = ric.P @ aux.K.nodes - aux.H.nodes
    return float(np.max(np.linalg.norm(dev, axis=-2)))


def write_csv(times, path, fh, prefix="y"):
    """Dump a vector path: ``t, y1, ..., yn``."""
    path = np.asarray(path)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t"] + [f"{prefix}{i + 1}" for i in range(path.shape[1])])
    for t, row in zip(times, path):
        w.writerow([repr(float(t))] + [repr(float(x)) for x in row])
