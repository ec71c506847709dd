"""Multi-asset mean-variance allocation as a mean-field LQ instance.

Each of ``n`` accounts holds one asset with ``dS_i / S_i = mu_i dt + sigma_i dW``
(a single Brownian driver).  Wealth ``X_i`` invested with amount ``pi_i`` has
``dX_i = mu_i pi_i dt + sigma_i pi_i dW``.  The investor maximises::

    Jpref(pi) = E <2 upsilon, X(T)> - E <Sigma (X(T) - E X(T)), X(T) - E X(T)>

which equals ``-J + <upsilon, Sigma^{-1} upsilon>`` for the LQ cost with
``G = Sigma``, ``Gbar = -Sigma`` and ``xi = Sigma^{-1} upsilon``.  The LQ
solver minimises ``J``; this module translates back.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from . import duality
from ._linalg import SYM_TOL, check_symmetric, min_eig, sym_inv
from .exceptions import InputError, MFLQError, SingularSigma
from .model import make_problem

__all__ = [
    "MVModel",
    "ClosedForm",
    "SweepRow",
    "reference_market",
    "build",
    "closed_form_value",
    "preference_value",
    "solve_mv",
    "pd_interval",
    "default_range",
    "sweep",
    "sweep_verdict",
    "bond_steepness",
    "mv_from_dict",
    "load_mv",
    "write_sweep_csv",
]

MU = (0.08, 0.03, 0.05)
SIGMA = (0.20, 0.05, 0.25)
SIGMA3_ALT = 0.30
UPSILON = (1.5, 1.0, 0.5)
X0 = (15.0, 10.0, 5.0)
SIGMA_INITIAL = ((3.5, 0.6, -0.5), (0.6, 2.6, -0.3), (-0.5, -0.3, 1.5))
SIGMA_BENCHMARK = ((3.5, -0.5, -0.5), (-0.5, 2.6, -0.5), (-0.5, -0.5, 1.5))


@dataclass(frozen=True, eq=False)
class MVModel:
    """Market primitives and preferences.

    Parameters
    ----------
    mu, sigma : array_like, shape (n,)
        Appreciation rates and volatilities (``sigma > 0``).
    upsilon : array_like, shape (n,)
        Return-preference weights.
    Sigma : array_like, shape (n, n)
        Symmetric positive-definite risk-aversion matrix.
    x0 : array_like, shape (n,)
        Initial wealth per account.
    T : float
        Horizon in years.
    """

    mu: np.ndarray
    sigma: np.ndarray
    upsilon: np.ndarray
    Sigma: np.ndarray
    x0: np.ndarray
    T: float = 1.0

    def __post_init__(self):
        for name in ("mu", "sigma", "upsilon", "x0"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        n = self.mu.shape[0]
        Sigma = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        if any(getattr(self, k).shape != (n,) for k in ("sigma", "upsilon", "x0")) or Sigma.shape != (n, n):
            raise InputError("mu, sigma, upsilon, x0 must have length n and Sigma shape (n, n)")
        if np.any(self.sigma <= 0):
            raise InputError("volatilities must be positive")
        if not self.T > 0:
            raise InputError("horizon must be positive")
        Sigma = check_symmetric(Sigma, "Sigma", SYM_TOL)
        if min_eig(Sigma) <= 0:
            raise SingularSigma(f"Sigma not positive definite (min eig {min_eig(Sigma):.3g})")
        object.__setattr__(self, "Sigma", Sigma)
        object.__setattr__(self, "T", float(self.T))

    @property
    def n(self):
        return self.mu.shape[0]

    @property
    def xi(self):
        return np.linalg.solve(self.Sigma, self.upsilon)

    def with_sigma_matrix(self, Sigma):
        return MVModel(self.mu, self.sigma, self.upsilon, Sigma, self.x0, self.T)

    def permuted(self, perm):
        perm = np.asarray(perm)
        return MVModel(self.mu[perm], self.sigma[perm], self.upsilon[perm],
                       self.Sigma[np.ix_(perm, perm)], self.x0[perm], self.T)

    def to_dict(self):
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist(), "upsilon": self.upsilon.tolist(),
                "Sigma": self.Sigma.tolist(), "x0": self.x0.tolist(), "T": self.T}


def reference_market(Sigma="benchmark", use_sigma3=False, T=1.0):
    """Three-account reference market (stock, bond, second stock).

    ``Sigma`` is ``"initial"``, ``"benchmark"`` or an explicit matrix.  The
    third volatility is 0.25 unless ``use_sigma3`` selects 0.30.
    """
    if isinstance(Sigma, str):
        table = {"initial": SIGMA_INITIAL, "benchmark": SIGMA_BENCHMARK}
        if Sigma not in table:
            raise InputError(f"unknown Sigma preset {Sigma!r}")
        Sigma = table[Sigma]
    sig = np.array(SIGMA)
    if use_sigma3:
        sig[2] = SIGMA3_ALT
    return MVModel(MU, sig, UPSILON, Sigma, X0, T)


def build(mv, steps=100):
    """LQ instance: ``B = diag(mu)``, ``D = diag(sigma)``, ``G = Sigma``,
    ``Gbar = -Sigma``, ``xi = Sigma^{-1} upsilon``, everything else zero."""
    n = mv.n
    return make_problem(
        mv.T, steps, mv.x0, A=np.zeros((n, n)), B=np.diag(mv.mu), D=np.diag(mv.sigma),
        R=np.zeros((n, n)), G=mv.Sigma, Gbar=-mv.Sigma, xi=mv.xi,
    )


@dataclass(frozen=True)
class ClosedForm:
    """Closed-form value of ``-J`` at the optimum under two readings of ``Phi``.

    ``value`` uses the shifted matrix ``Sigma^{-1} P0 Sigma^{-1} - Sigma^{-1}``
    (negative definite); ``value_unshifted`` plugs ``Sigma^{-1} P0 Sigma^{-1}``
    into the same expression.  ``d_star`` is the optimal terminal mean.
    """

    value: float
    value_unshifted: float
    Phi: np.ndarray
    phi: np.ndarray
    d_star: np.ndarray


def _closed(Sigma, Phi, phi, y, P0):
    Phi_inv = sym_inv(Phi, "Phi")
    Mt = -Sigma - Phi_inv
    v = Phi_inv @ phi
    return float(v @ np.linalg.solve(Mt, v) + phi @ v - y @ P0 @ y), -np.linalg.solve(Mt, v)


def closed_form_value(mv, P0):
    Si = sym_inv(mv.Sigma, "Sigma")
    y = mv.x0 - mv.xi
    phi = Si @ P0 @ y + mv.xi
    Phi = Si @ P0 @ Si - Si
    value, d = _closed(mv.Sigma, Phi, phi, y, P0)
    try:
        value_u, _ = _closed(mv.Sigma, Phi + Si, phi, y, P0)
    except (MFLQError, np.linalg.LinAlgError):
        value_u = float("nan")
    return ClosedForm(value, value_u, Phi, phi, d)


def preference_value(mv, lq_value):
    """Translate the minimised LQ cost into the maximised preference functional."""
    return float(-lq_value + mv.upsilon @ mv.xi)


def solve_mv(mv, steps=50, substeps=8, quadrature="rk4"):
    return duality.solve(build(mv, steps), substeps=substeps, quadrature=quadrature)


# -- sweeps ----------------------------------------------------------------------

def _with_element(Sigma, i, j, value):
    S = np.array(Sigma, dtype=float)
    S[i, j] = S[j, i] = value
    return S


def pd_interval(Sigma, i, j):
    """Interval of values for element ``(i, j)`` (and its mirror) keeping ``Sigma`` PD.

    The set is convex because ``Sigma`` is affine in the element.  Diagonal
    elements have no upper limit (``inf``).
    """
    Sigma = np.asarray(Sigma, dtype=float)
    s0 = Sigma[i, j]
    f = lambda s: min_eig(_with_element(Sigma, i, j, s))
    if f(s0) <= 0:
        raise SingularSigma("Sigma must be positive definite at its current value")
    scale = 1.0 + np.abs(Sigma).max()

    def edge(direction):
        step = scale
        while f(s0 + direction * step) > 0:
            step *= 2.0
            if step > 1e8:
                return direction * np.inf
        return brentq(f, s0, s0 + direction * step, xtol=1e-12)

    hi = np.inf if i == j else edge(1.0)
    return edge(-1.0), hi


def default_range(Sigma, i, j, shrink=0.95):
    """Sampling range: diagonal ``[max(s - 1, edge + margin), s + 1]``,
    off-diagonal the central ``shrink`` fraction of the PD interval."""
    s0 = float(np.asarray(Sigma)[i, j])
    lo, hi = pd_interval(Sigma, i, j)
    if i == j:
        return max(s0 - 1.0, lo + (1.0 - shrink) * (s0 - lo)), s0 + 1.0
    mid, half = 0.5 * (lo + hi), 0.5 * shrink * (hi - lo)
    return mid - half, mid + half


@dataclass(frozen=True)
class SweepRow:
    element: str
    value: float
    J: float
    J_displayed: float
    solvable: bool
    skipped: bool


def element_name(i, j):
    return f"Sigma{i + 1}{j + 1}"


def _sweep_point(mv, i, j, value, steps, substeps):
    name = element_name(i, j)
    S = _with_element(mv.Sigma, i, j, value)
    try:
        m = mv.with_sigma_matrix(S)
    except SingularSigma:
        return SweepRow(name, float(value), float("nan"), float("nan"), False, True)
    try:
        sol = solve_mv(m, steps=steps, substeps=substeps)
    except MFLQError:
        return SweepRow(name, float(value), float("nan"), float("nan"), False, False)
    cert = sol.certificate
    return SweepRow(name, float(value), preference_value(m, cert.value), -cert.value,
                    bool(cert.verdicts.type2), False)


def sweep(mv, element, values, steps=20, substeps=8):
    """Evaluate the optimal preference value along one element of ``Sigma``.

    ``element`` is a 0-based ``(i, j)``; the mirror ``(j, i)`` moves with it.
    Values that make ``Sigma`` indefinite give ``skipped`` rows.
    """
    i, j = element
    if not (0 <= i < mv.n and 0 <= j < mv.n):
        raise InputError(f"element {element} out of range for n={mv.n}")
    return [_sweep_point(mv, i, j, v, steps, substeps) for v in values]


def sweep_verdict(rows, diagonal):
    """Diagonal: strictly decreasing ``J``; off-diagonal: argmin strictly interior."""
    J = np.array([r.J for r in rows if not r.skipped and np.isfinite(r.J)])
    if J.size < 3:
        return {"points": int(J.size), "ok": False}
    if diagonal:
        return {"points": int(J.size), "pattern": "decreasing", "ok": bool(np.all(np.diff(J) < 0))}
    k = int(np.argmin(J))
    return {"points": int(J.size), "pattern": "interior-minimum", "argmin": k,
            "ok": bool(0 < k < J.size - 1)}


def bond_steepness(mv, h=1e-3, steps=20, substeps=8):
    """Central-difference slopes of the preference value along each diagonal element."""
    slopes = []
    for i in range(mv.n):
        s = mv.Sigma[i, i]
        up, dn = sweep(mv, (i, i), [s + h, s - h], steps, substeps)
        slopes.append((up.J - dn.J) / (2.0 * h))
    slopes = np.array(slopes)
    k = int(np.argmax(np.abs(slopes)))
    return {"slopes": slopes.tolist(), "steepest": element_name(k, k),
            "bond_steepest": bool(mv.n > 1 and k == 1)}


# -- I/O ---------------------------------------------------------------------------

_MV_KEYS = {"mu", "sigma", "upsilon", "Sigma", "x0", "T", "steps"}


def mv_from_dict(data):
    """``{"mu", "sigma", "upsilon", "Sigma", "x0", "T"?, "steps"?}`` -> (MVModel, steps)."""
    if not isinstance(data, dict):
        raise InputError("market file must hold a JSON object")
    unknown = set(data) - _MV_KEYS
    if unknown:
        raise InputError(f"unknown keys: {sorted(unknown)}")
    try:
        mv = MVModel(data["mu"], data["sigma"], data["upsilon"], data["Sigma"], data["x0"], data.get("T", 1.0))
    except KeyError as exc:
        raise InputError(f"missing required key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"bad market data: {exc}") from None
    steps = data.get("steps", 50)
    if not isinstance(steps, int) or steps < 2:
        raise InputError("steps must be an integer >= 2")
    return mv, steps


def load_mv(path):
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"malformed JSON: {exc}") from None
    return mv_from_dict(data)


def write_sweep_csv(rows, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["element", "value", "J", "solvable", "skipped", "J_displayed"])
    for r in rows:
        w.writerow([r.element, repr(r.value), repr(r.J), int(r.solvable), int(r.skipped), repr(r.J_displayed)])
