"""Dual quadratic forms, solvability tests and the optimal target mean.

Fixing the terminal mean ``E X(T) = d`` and pricing the constraint with a
multiplier ``lam`` gives the dual function::

    V1(x, d, lam) = -lam^T Psi lam + 2 lam^T (psi - d) + Delta + <Gbar d, d> - 2 <zeta, d>

whose maximiser is ``lam = Psi^{-1} (psi - d)``.  ``(Psi, psi, Delta)`` come
from the H-system; the K-system gives a second expansion ``(Phi, phi, delta)``
with ``Psi = G^{-1} - Phi``, ``psi = phi`` and ``Delta = delta``.  Minimising
the resulting quadratic in ``d`` yields ``d* = (Gbar + Psi^{-1})^{-1}
(Psi^{-1} psi + zeta)``.

All functions expect a normalised spec (see :func:`mflq.model.normalize`);
:func:`solve` takes care of that.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from . import auxiliary, riccati
from ._linalg import PSD_TOL, min_eig, sqrtm_psd, sym, sym_inv, sym_solve
from .exceptions import Infeasible, MFLQError, SingularHessian, Unsolvable
from .model import normalize, validate

__all__ = [
    "FeasibilityCertificate",
    "Verdicts",
    "DualCertificate",
    "FeedbackLaw",
    "Solution",
    "feasibility",
    "compute_psi",
    "compute_phi",
    "solvability",
    "optimize",
    "dual_value",
    "dual_function",
    "feedback_for_target",
    "solve",
]

QUADRATURES = ("rk4", "trapezoid")
FEASIBILITY_TOL = 1e-10
_RK4_WEIGHTS = np.array([1.0, 2.0, 2.0, 1.0]) / 6.0


# -- feasibility -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FeasibilityCertificate:
    """Fundamental solution ``Y`` of ``dY/dt = -Y A``, ``Y(T) = I``, and the
    reachability integral ``int_0^T ||Z D + Y B|| dt`` (``Z = 0`` here)."""

    Y: np.ndarray
    Z: np.ndarray
    integral_norm: float
    feasible_for_all_d: bool

    def to_dict(self):
        return {"integral_norm": self.integral_norm, "feasible_for_all_d": self.feasible_for_all_d}


def feasibility(spec):
    grid, d = spec.grid, spec.dyn
    N, n, h = grid.n_steps, spec.n, grid.step
    Y = np.empty((N + 1, n, n))
    Y[N] = np.eye(n)
    # A is constant on each cell, so Y(t_k) = Y(t_{k+1}) expm(A_k h) exactly
    for k in range(N - 1, -1, -1):
        Y[k] = Y[k + 1] @ expm(d.A[k] * h)
    left = np.linalg.norm(Y[:-1] @ d.B, axis=(-2, -1))
    right = np.linalg.norm(Y[1:] @ d.B, axis=(-2, -1))
    integral = float(0.5 * h * np.sum(left + right))
    Y.flags.writeable = False
    return FeasibilityCertificate(Y, np.zeros_like(Y), integral, integral > FEASIBILITY_TOL)


# -- quadrature ----------------------------------------------------------------

def _integrate(spec, ric, paths, integrand, quadrature):
    """Integrate ``integrand(gains, Y)`` over ``[0, T]``.

    ``rk4`` evaluates at the Riccati/auxiliary RK4 stage values and combines
    them with the RK4 weights, which is exactly RK4 on the ODE augmented with
    the running integral.  ``trapezoid`` uses the grid nodes, with cell ``k``
    coefficients at both ends of cell ``k``.
    """
    if quadrature == "rk4":
        Ns = ric.P_stages.shape[0]
        g = auxiliary.stage_gains(spec, ric)
        Y = paths.stages.reshape((Ns * 4,) + paths.stages.shape[2:])
        vals = integrand(g, Y)
        vals = vals.reshape((Ns, 4) + vals.shape[1:])
        return ric.fine_step * np.einsum("s,js...->...", _RK4_WEIGHTS, vals)
    if quadrature == "trapezoid":
        lo = integrand(auxiliary.node_gains(spec, ric, "left"), paths.nodes[:-1])
        hi = integrand(auxiliary.node_gains(spec, ric, "right"), paths.nodes[1:])
        return 0.5 * spec.grid.step * np.sum(lo + hi, axis=0)
    raise ValueError(f"quadrature must be one of {QUADRATURES}, got {quadrature!r}")


def _psi_integrand(spec, g, H):
    d, c = spec.dyn, spec.cost
    B, D, a, b = d.B[g.cells], d.D[g.cells], d.a[g.cells], d.b[g.cells]
    Q, q = c.Q[g.cells], c.q[g.cells]
    Pb = np.einsum("lij,lj->li", g.P, b)
    W = np.swapaxes(B, -1, -2) @ H
    W[..., 0] += np.einsum("lji,lj->li", D, Pb)
    J = -np.swapaxes(W, -1, -2) @ np.linalg.solve(g.M, W)
    Ha = np.einsum("lik,li->lk", H, a)
    J[:, 0, 0] += np.einsum("li,lij,lj->l", q, Q, q) + np.einsum("li,li->l", Pb, b) + 2.0 * Ha[:, 0]
    J[:, 0, 1:] += Ha[:, 1:]
    J[:, 1:, 0] += Ha[:, 1:]
    return J


def compute_psi(spec, ric, aux, quadrature="rk4"):
    """``(Psi, psi, Delta)`` from the H-system expansion of the dual function."""
    c, x = spec.cost, spec.x0
    I = _integrate(spec, ric, aux.H, lambda g, H: _psi_integrand(spec, g, H), quadrature)
    H0 = aux.H.nodes[0]
    Psi = sym(-I[1:, 1:])
    psi = H0[:, 1:].T @ x + I[0, 1:]
    Gxi = c.G @ c.xi
    Delta = float(Gxi @ c.xi + x @ ric.P0 @ x + 2.0 * H0[:, 0] @ x + I[0, 0])
    return Psi, psi, Delta


def _phi_integrand(spec, g, K):
    d, c = spec.dyn, spec.cost
    C, D, b = d.C[g.cells], d.D[g.cells], d.b[g.cells]
    Q, q = c.Q[g.cells], c.q[g.cells]
    Rs = auxiliary._rscript(g.P, D, g.M)
    Kt = -C @ K
    Kt[..., 0] += b
    Kq = K.copy()
    Kq[..., 0] += q
    return np.swapaxes(Kt, -1, -2) @ Rs @ Kt + np.swapaxes(Kq, -1, -2) @ Q @ Kq


def compute_phi(spec, ric, aux, quadrature="rk4"):
    """``(Phi, phi, delta)`` from the K-system expansion.

    Raises SingularG / SingularP (via the K-system) when that route is unavailable.
    """
    if aux.K is None:
        auxiliary.solve_K_system(spec, ric)  # raises the specific error
    Kb = aux.K.nodes[0].copy()
    Kb[:, 0] += spec.x0
    I = _integrate(spec, ric, aux.K, lambda g, K: _phi_integrand(spec, g, K), quadrature)
    Gram = Kb.T @ ric.P0 @ Kb + I
    Phi = sym(Gram[1:, 1:])
    phi = Gram[0, 1:] + spec.cost.xi
    return Phi, phi, float(Gram[0, 0])


# -- solvability ---------------------------------------------------------------

@dataclass(frozen=True)
class Verdicts:
    """Eigenvalue verdicts (threshold ``PSD_TOL``) for the sufficient conditions.

    ``literal`` is ``Gbar - Phi^{-1} > 0``, the form that applies when the
    reported matrix already carries the ``-G^{-1}`` shift.  ``chain_ok`` is
    false if one of ``prop1..prop3`` holds while ``type2`` fails.
    """

    type1: bool
    type2: bool | None
    literal: bool | None
    prop1: bool
    prop2: bool | None
    prop3: bool | None
    chain_ok: bool
    hessian_min_eig: float

    @property
    def any(self):
        return bool(self.type1 or self.type2 or self.prop1 or self.prop2 or self.prop3)

    def to_dict(self):
        return dict(self.__dict__)


def _pd(M):
    return bool(min_eig(M) > PSD_TOL)


def _safe_inv(M):
    try:
        return sym_inv(M)
    except (MFLQError, np.linalg.LinAlgError):
        return None


def solvability(Psi, Phi, G, Gbar):
    """Evaluate every sufficient condition; ``Phi`` may be ``None`` (no K route)."""
    Psi_inv = _safe_inv(Psi)
    hess_min = min_eig(Gbar + Psi_inv) if Psi_inv is not None else -np.inf
    type1 = bool(hess_min > PSD_TOL)
    prop1 = _pd(Gbar + G)
    type2 = literal = prop2 = prop3 = None
    if Phi is not None:
        Ginv = sym_inv(G)
        S = _safe_inv(Phi - Ginv)
        type2 = S is not None and _pd(Gbar - S)
        Pinv = _safe_inv(Phi)
        literal = Pinv is not None and _pd(Gbar - Pinv)
        phi_pd = _pd(Phi)
        prop2 = phi_pd and min_eig(Gbar + G) >= -PSD_TOL
        Gh = sqrtm_psd(G)
        inner = _safe_inv(np.eye(G.shape[0]) - Gh @ Phi @ Gh)
        prop3 = phi_pd and inner is not None and _pd(Gbar + Gh @ inner @ Gh)
    holds = [p for p in (prop1, prop2, prop3) if p]
    chain_ok = not holds or bool(type2)
    return Verdicts(type1, type2, literal, prop1, prop2, prop3, chain_ok, float(hess_min))


# -- optimisation --------------------------------------------------------------

def dual_value(Psi, psi, Delta, Gbar, zeta, d, constant=0.0):
    """``V(x, d) = <Psi^{-1}(psi - d), psi - d> + Delta + <Gbar d, d> - 2 <zeta, d>``."""
    r = psi - d
    return float(r @ sym_solve(Psi, r, "Psi") + Delta + d @ Gbar @ d - 2.0 * zeta @ d + constant)


def _phi_value(Phi, phi, delta, G, Gbar, zeta, d, constant=0.0):
    r = phi - d
    S = Phi - sym_inv(G)
    return float(-r @ sym_solve(S, r, "Phi - G^-1") + delta + d @ Gbar @ d - 2.0 * zeta @ d + constant)


def dual_function(spec, ric, lam, d, quadrature="rk4"):
    """Evaluate ``V1(x, d, lam)`` from a single H-system solve with terminal ``lam - G xi``.

    Independent of the superposition behind ``(Psi, psi, Delta)``.
    """
    c = spec.cost
    lam, d = np.asarray(lam, dtype=float), np.asarray(d, dtype=float)
    Hp = auxiliary.solve_H_terminal(spec, ric, lam - c.G @ c.xi)
    I = _integrate(spec, ric, Hp, lambda g, H: _psi_integrand(spec, g, H), quadrature)
    x = spec.x0
    base = c.xi @ c.G @ c.xi + x @ ric.P0 @ x + 2.0 * Hp.nodes[0][:, 0] @ x + I[0, 0]
    return float(base - 2.0 * lam @ d + d @ c.Gbar @ d - 2.0 * c.zeta @ d + c.constant)


@dataclass(frozen=True, eq=False)
class DualCertificate:
    Psi: np.ndarray
    psi: np.ndarray
    Delta: float
    Phi: np.ndarray | None
    phi: np.ndarray | None
    delta: float | None
    Ginv_mean: np.ndarray
    lambda_star: np.ndarray
    d_star: np.ndarray
    d_half: np.ndarray
    value: float
    value_phi_route: float | None
    verdicts: Verdicts
    feasibility: FeasibilityCertificate
    quadrature: str = "rk4"

    @property
    def value_psi_route(self):
        return self.value

    @property
    def solvable_type1(self):
        return self.verdicts.type1

    @property
    def solvable_type2(self):
        return self.verdicts.type2

    @property
    def prop_conditions(self):
        v = self.verdicts
        return (v.prop1, v.prop2, v.prop3)

    def to_dict(self):
        arr = lambda a: None if a is None else np.asarray(a).tolist()
        return {
            "Psi": arr(self.Psi), "psi": arr(self.psi), "Delta": self.Delta,
            "Phi": arr(self.Phi), "phi": arr(self.phi), "delta": self.delta,
            "lambda_star": arr(self.lambda_star), "d_star": arr(self.d_star),
            "d_half": arr(self.d_half),
            "value_psi_route": self.value, "value_phi_route": self.value_phi_route,
            "verdicts": self.verdicts.to_dict(),
            "feasibility": self.feasibility.to_dict(),
            "quadrature": self.quadrature,
        }


def optimize(spec, Psi, psi, Delta, Phi=None, phi=None, delta=None, feas=None, quadrature="rk4"):
    """Minimise ``V(x, d)`` over ``d`` in closed form and assemble the certificate.

    Raises Unsolvable when no sufficient condition holds and SingularHessian
    when ``Gbar + Psi^{-1}`` is not positive definite.
    """
    c = spec.cost
    feas = feas or feasibility(spec)
    verdicts = solvability(Psi, Phi, c.G, c.Gbar)
    if not verdicts.any:
        raise Unsolvable("no sufficient solvability condition holds", verdicts=verdicts.to_dict())
    if verdicts.hessian_min_eig < PSD_TOL:
        raise SingularHessian(f"lambda_min(Gbar + Psi^-1) = {verdicts.hessian_min_eig:.3g}")
    Psi_inv = sym_inv(Psi, "Psi")
    rhs = Psi_inv @ psi + c.zeta
    d_star = sym_solve(c.Gbar + Psi_inv, rhs, "Gbar + Psi^-1")
    lam = Psi_inv @ (psi - d_star)
    value = dual_value(Psi, psi, Delta, c.Gbar, c.zeta, d_star, c.constant)
    vphi = None
    if Phi is not None:
        vphi = _phi_value(Phi, phi, delta, c.G, c.Gbar, c.zeta, d_star, c.constant)
    return DualCertificate(
        Psi=Psi, psi=psi, Delta=Delta, Phi=Phi, phi=phi, delta=delta,
        Ginv_mean=sym_inv(c.G) if min_eig(c.G) > PSD_TOL else None,
        lambda_star=lam, d_star=d_star, d_half=0.5 * d_star, value=value,
        value_phi_route=vphi, verdicts=verdicts, feasibility=feas, quadrature=quadrature,
    )


# -- feedback ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FeedbackLaw:
    """``u(t, X) = Theta(t) X + u0(t)`` tabulated on the fine RK4 grid.

    Values are held constant on each fine interval ``[t_j, t_{j+1})``.
    """

    horizon: float
    Theta: np.ndarray
    u0: np.ndarray
    lam: np.ndarray = field(default=None)
    target: np.ndarray = field(default=None)

    @property
    def n_intervals(self):
        return self.Theta.shape[0] - 1

    def index(self, t):
        j = np.floor(np.asarray(t) / self.horizon * self.n_intervals + 1e-9).astype(int)
        return np.clip(j, 0, self.n_intervals)

    def gains(self, t):
        j = self.index(t)
        return self.Theta[j], self.u0[j]

    def __call__(self, t, X):
        Th, u0 = self.gains(t)
        return X @ Th.T + u0


def feedback_for_target(spec, ric, aux, Psi, psi, d, p=None):
    """Feedback law steering ``E X(T)`` to ``d`` (uses ``lam = Psi^{-1}(psi - d)``).

    ``spec`` is normalised, so its controls are ``u - p``; pass the original
    ``p`` path to get the law in the caller's coordinates.
    """
    lam = sym_solve(Psi, psi - np.asarray(d, dtype=float), "Psi")
    g = auxiliary.gains_at(spec, ric.P_fine, ric.fine_cells)
    u0 = auxiliary.offset_control(spec, ric, aux, lam, fine=True)
    if p is not None:
        u0 = u0 + np.asarray(p)[ric.fine_cells]
    Theta, u0 = g.Theta.copy(), u0.copy()
    Theta.flags.writeable = u0.flags.writeable = False
    return FeedbackLaw(spec.grid.horizon, Theta, u0, lam, np.array(d, dtype=float))


# -- pipeline ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Solution:
    """Everything the pipeline produced.  ``spec`` is the normalised problem,
    ``original`` the one passed in; feedback laws act in the original
    coordinates."""

    original: object
    spec: object
    case: object
    riccati: object
    aux: object
    certificate: DualCertificate
    feedback: FeedbackLaw
    half_feedback: FeedbackLaw


def solve(spec, substeps=8, quadrature="rk4", require_feasible=True):
    """Full pipeline: validate, Riccati, auxiliary systems, dual forms, optimum.

    Raises Infeasible when the reachability integral vanishes.
    """
    original, spec = spec, normalize(spec)
    case = validate(spec)
    feas = feasibility(spec)
    if require_feasible and not feas.feasible_for_all_d:
        raise Infeasible(f"integral_norm={feas.integral_norm:.6g}", integral_norm=feas.integral_norm)
    ric = riccati.integrate(spec, substeps=substeps, case=case)
    aux = auxiliary.solve_auxiliary(spec, ric)
    Psi, psi, Delta = compute_psi(spec, ric, aux, quadrature)
    Phi = phi = delta = None
    if aux.K is not None:
        Phi, phi, delta = compute_phi(spec, ric, aux, quadrature)
    cert = optimize(spec, Psi, psi, Delta, Phi, phi, delta, feas, quadrature)
    p = original.cost.p
    fb = feedback_for_target(spec, ric, aux, Psi, psi, cert.d_star, p)
    half = feedback_for_target(spec, ric, aux, Psi, psi, cert.d_half, p)
    return Solution(original, spec, case, ric, aux, cert, fb, half)
