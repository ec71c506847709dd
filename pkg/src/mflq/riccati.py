"""Backward matrix Riccati integration and the optimal feedback kernel.

With deterministic coefficients the martingale part of the stochastic Riccati
equation vanishes and ``P`` solves the terminal-value ODE::

    dP/dt = -g1(P),   P(T) = G,
    g1(P) = -Theta^T (D^T P D + R) Theta + P A + A^T P + C^T P C + Q,
    Theta = -(D^T P D + R)^{-1} (B^T P + D^T P C).

Integration runs backward with classical RK4 on a fine grid of ``substeps``
sub-intervals per cell.  Stage values are kept so the linear auxiliary
systems can be advanced with exactly the same stages (see ``auxiliary``).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ._linalg import min_eig, sym
from .exceptions import AssumptionError, BlowUp, NearSingularGain, PositivityViolated
from .model import NEITHER, validate

__all__ = [
    "RiccatiSolution",
    "PositivityReport",
    "riccati_rhs",
    "gain",
    "integrate",
    "check_uniform_positivity",
    "write_csv",
]

GAIN_EIG_MIN = 1e-12
BLOWUP_NORM = 1e12


def _gain_matrix(P, D, R):
    M = sym(D.T @ P @ D + R)
    lo = min_eig(M) if M.size else np.inf
    if not lo >= GAIN_EIG_MIN:
        raise NearSingularGain(f"lambda_min(D^T P D + R) = {lo:.3g} < {GAIN_EIG_MIN:g}", lam_min=lo)
    return M


def gain(P, coeffs):
    """Return ``(Theta, M)`` with ``M = D^T P D + R`` at a single time."""
    M = _gain_matrix(P, coeffs.D, coeffs.R)
    N = coeffs.B.T @ P + coeffs.D.T @ P @ coeffs.C
    return -np.linalg.solve(M, N), M


def riccati_rhs(P, coeffs):
    """Generator ``g1(P)`` (with the martingale part set to zero)."""
    A, C, Q = coeffs.A, coeffs.C, coeffs.Q
    Theta, M = gain(P, coeffs)
    N = coeffs.B.T @ P + coeffs.D.T @ P @ C
    # -Theta^T M Theta == N^T Theta
    return sym(N.T @ Theta + P @ A + A.T @ P + C.T @ P @ C + Q)


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    """Riccati path on grid nodes plus fine-grid and RK4 stage values.

    ``P``, ``Theta``, ``Ahat``, ``Chat`` and ``gain_cond`` are tabulated on the
    ``N + 1`` grid nodes; at node ``t_k`` the coefficients of cell ``k`` are
    used (cell ``N - 1`` at ``t_N``).  ``P_fine`` has ``N * substeps + 1``
    entries and ``P_stages[j]`` holds the four RK4 stage inputs of the fine
    step ``[t_j, t_{j+1}]`` taken backward from ``t_{j+1}``.
    """

    grid: object
    substeps: int
    P: np.ndarray
    Theta: np.ndarray
    Ahat: np.ndarray
    Chat: np.ndarray
    gain_cond: np.ndarray
    min_eig_P: float
    P_fine: np.ndarray
    P_stages: np.ndarray

    @property
    def Lambda(self):
        return np.zeros_like(self.P)

    @property
    def fine_step(self):
        return self.grid.step / self.substeps

    @property
    def fine_times(self):
        return np.arange(self.P_fine.shape[0]) * self.fine_step

    @property
    def P0(self):
        return self.P[0]

    @property
    def fine_cells(self):
        """Cell index of each fine node (last node reuses the last cell)."""
        j = np.arange(self.P_fine.shape[0])
        return np.minimum(j // self.substeps, self.grid.n_steps - 1)


def _tabulate_gains(spec, P, cells):
    """Batched Theta, Ahat, Chat and cond(M) for a stack of P matrices."""
    d, c = spec.dyn, spec.cost
    A, B, C, D, R = d.A[cells], d.B[cells], d.C[cells], d.D[cells], c.R[cells]
    Dt = np.swapaxes(D, -1, -2)
    M = sym(Dt @ P @ D + R)
    N = np.swapaxes(B, -1, -2) @ P + Dt @ P @ C
    Theta = -np.linalg.solve(M, N)
    w = np.abs(np.linalg.eigvalsh(M))
    cond = w.max(axis=-1) / w.min(axis=-1)
    return Theta, A + B @ Theta, C + D @ Theta, cond


def integrate(spec, substeps=8, case=None):
    """Integrate the Riccati equation backward from ``P(T) = G``.

    Refuses instances outside both assumption sets.  Raises NearSingularGain
    if ``D^T P D + R`` loses definiteness at any RK4 stage and BlowUp if
    ``||P||_F`` exceeds 1e12.
    """
    case = case or validate(spec)
    if case.variant == NEITHER:
        raise AssumptionError("neither the standard nor the singular assumptions hold")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    grid = spec.grid
    N, n = grid.n_steps, spec.n
    Ns = N * substeps
    h = grid.step / substeps

    P_fine = np.empty((Ns + 1, n, n))
    stages = np.empty((Ns, 4, n, n))
    P = np.array(spec.cost.G, dtype=float)
    P_fine[Ns] = P
    # dP/dt = -g1, so a backward step of size h adds h * g1
    for j in range(Ns - 1, -1, -1):
        co = spec.coefficients(j // substeps)
        k1 = riccati_rhs(P, co)
        P2 = sym(P + 0.5 * h * k1)
        k2 = riccati_rhs(P2, co)
        P3 = sym(P + 0.5 * h * k2)
        k3 = riccati_rhs(P3, co)
        P4 = sym(P + h * k3)
        k4 = riccati_rhs(P4, co)
        stages[j] = (P, P2, P3, P4)
        P = sym(P + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
        nrm = np.linalg.norm(P)
        if not np.isfinite(nrm) or nrm > BLOWUP_NORM:
            raise BlowUp(f"||P||_F = {nrm:.3g} at t = {j * h:.6g}")
        P_fine[j] = P
    # stages never evaluate the gain at t_0 itself
    _gain_matrix(P_fine[0], spec.dyn.D[0], spec.cost.R[0])

    P_nodes = P_fine[::substeps].copy()
    cells = np.minimum(np.arange(N + 1), N - 1)
    Theta, Ahat, Chat, cond = _tabulate_gains(spec, P_nodes, cells)
    for arr in (P_fine, stages, P_nodes, Theta, Ahat, Chat, cond):
        arr.flags.writeable = False
    return RiccatiSolution(
        grid=grid, substeps=substeps, P=P_nodes, Theta=Theta, Ahat=Ahat, Chat=Chat,
        gain_cond=cond, min_eig_P=float(np.linalg.eigvalsh(P_fine).min()),
        P_fine=P_fine, P_stages=stages,
    )


@dataclass(frozen=True)
class PositivityReport:
    min_eig_P: float
    bound: float
    alpha: float
    beta: float
    delta: float
    ok: bool

    def to_dict(self):
        return dict(self.__dict__)


def positivity_constants(spec):
    """Constants ``(alpha, beta)`` of the a-priori estimate behind the bound.

    From Ito's formula, ``E|X_s|^2 = E|X_T|^2 - E int_s^T 2<AX+Bu, X> + |CX+Du|^2``.
    With Frobenius sup-norms ``a_=|A|, b_=|B|, c_=|C|, d_=|D|`` and Young's
    inequality ``2<Bu, X> <= b_(|u|^2 + |X|^2)`` and ``|CX+Du|^2 <= 2c_^2|X|^2 + 2d_^2|u|^2``::

        alpha = b_ + 2 d_^2,      beta = 2 a_ + b_ + 2 c_^2.
    """
    sup = lambda M: float(np.max(np.linalg.norm(M, axis=(-2, -1)))) if M.size else 0.0
    nA, nB, nC, nD = (sup(getattr(spec.dyn, k)) for k in "ABCD")
    return nB + 2.0 * nD ** 2, 2.0 * nA + nB + 2.0 * nC ** 2


def check_uniform_positivity(sol, spec, case=None, tol=1e-8):
    """Compare ``min eig P`` with the bound ``delta e^{-beta T} / max(1, alpha)``.

    ``delta = min(delta_R, delta_G)`` so the bound is zero outside the
    standard case.  Raises PositivityViolated when ``G`` is positive definite
    and the computed minimum falls below ``max(0, bound) - tol``.
    """
    case = case or validate(spec)
    alpha, beta = positivity_constants(spec)
    delta = max(0.0, min(case.delta_R, case.delta_G))
    bound = delta * np.exp(-beta * spec.grid.horizon) / max(1.0, alpha)
    ok = sol.min_eig_P >= max(0.0, bound) - tol
    if case.uniform_positivity and not ok:
        raise PositivityViolated(f"min eig P = {sol.min_eig_P:.6g} below bound {bound:.6g}")
    if case.uniform_positivity:
        ok = ok and sol.min_eig_P > 0.0
    return PositivityReport(sol.min_eig_P, float(bound), alpha, beta, delta, bool(ok))


def write_csv(sol, fh):
    """Write ``t, P11, P12, ..., Pnn`` (upper triangle, row-major) rows."""
    n = sol.P.shape[1]
    iu = np.triu_indices(n)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["t"] + [f"P{i + 1}{j + 1}" for i, j in zip(*iu)])
    for t, P in zip(sol.grid.nodes, sol.P):
        w.writerow([repr(float(t))] + [repr(float(x)) for x in P[iu]])
