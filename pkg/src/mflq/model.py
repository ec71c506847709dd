"""Problem instances for the mean-field stochastic LQ problem.

All coefficients are deterministic and piecewise constant on the cells of a
uniform :class:`TimeGrid`.  Path-valued fields are stored with a leading cell
axis of length ``n_steps``; cell ``k`` covers ``[t_k, t_{k+1})``.

The cost of a control ``u`` is::

    E{ int_0^T <Q(X-q), X-q> + <R(u-p), u-p> dt + <G(X_T - xi), X_T - xi> }
      + <Gbar(E X_T - eta), E X_T - eta>

After :func:`normalize` the control offset ``p`` is folded into ``a`` and
``b`` and the mean-field term becomes ``<Gbar m, m> - 2 <zeta, m>`` with
``zeta = Gbar eta``; the dropped constant ``<Gbar eta, eta>`` is kept in
``CostSpec.constant``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ._linalg import PSD_TOL, SYM_TOL, check_symmetric, min_eig, sym
from .exceptions import AsymmetryError, DimensionError, InputError

__all__ = [
    "TimeGrid",
    "DynamicsSpec",
    "CostSpec",
    "ProblemSpec",
    "CaseTag",
    "Coefficients",
    "validate",
    "normalize",
    "problem_from_dict",
    "problem_to_dict",
    "load_problem",
]

STANDARD = "Standard"
SINGULAR = "Singular"
BOTH = "Both"
NEITHER = "Neither"


def _frozen(x):
    arr = np.array(x, dtype=float)
    arr.flags.writeable = False
    return arr


def _set(obj, name, value):
    object.__setattr__(obj, name, value)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``0 = t_0 < ... < t_N = T``."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if not np.isfinite(self.horizon) or self.horizon <= 0:
            raise InputError(f"horizon must be positive, got {self.horizon}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise InputError(f"n_steps must be an integer >= 2, got {self.n_steps}")
        _set(self, "horizon", float(self.horizon))
        _set(self, "n_steps", int(self.n_steps))

    @property
    def step(self):
        return self.horizon / self.n_steps

    @property
    def nodes(self):
        return np.arange(self.n_steps + 1) * self.step


class Coefficients(NamedTuple):
    """Coefficient values on a single grid cell."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    a: np.ndarray
    b: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    q: np.ndarray
    p: np.ndarray


@dataclass(frozen=True, eq=False)
class DynamicsSpec:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "C", "D", "a", "b"):
            _set(self, name, _frozen(getattr(self, name)))
        N, n, m = self.B.shape[0], self.B.shape[1], self.B.shape[2] if self.B.ndim == 3 else -1
        expect = {"A": (N, n, n), "B": (N, n, m), "C": (N, n, n), "D": (N, n, m), "a": (N, n), "b": (N, n)}
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def n(self):
        return self.B.shape[1]

    @property
    def m(self):
        return self.B.shape[2]


@dataclass(frozen=True, eq=False)
class CostSpec:
    Q: np.ndarray
    R: np.ndarray
    G: np.ndarray
    Gbar: np.ndarray
    q: np.ndarray
    p: np.ndarray
    xi: np.ndarray
    eta: np.ndarray
    zeta: np.ndarray = None
    constant: float = 0.0

    def __post_init__(self):
        for name in ("Q", "R", "G", "Gbar"):
            _set(self, name, _frozen(check_symmetric(getattr(self, name), name=name)))
        for name in ("q", "p", "xi", "eta"):
            _set(self, name, _frozen(getattr(self, name)))
        if self.zeta is None:
            _set(self, "zeta", _frozen(np.zeros_like(self.xi)))
        else:
            _set(self, "zeta", _frozen(self.zeta))
        _set(self, "constant", float(self.constant))

    def meanfield(self, m, normalized):
        """Mean-field part of the cost evaluated at terminal mean ``m``."""
        m = np.asarray(m, dtype=float)
        if normalized:
            return float(m @ self.Gbar @ m - 2.0 * self.zeta @ m)
        e = m - self.eta
        return float(e @ self.Gbar @ e)

    def meanfield_grad(self, m, normalized):
        m = np.asarray(m, dtype=float)
        if normalized:
            return 2.0 * (self.Gbar @ m - self.zeta)
        return 2.0 * self.Gbar @ (m - self.eta)


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    grid: TimeGrid
    dyn: DynamicsSpec
    cost: CostSpec
    x0: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        _set(self, "x0", _frozen(self.x0))
        N, n, m = self.grid.n_steps, self.dyn.n, self.dyn.m
        if self.dyn.A.shape[0] != N:
            raise DimensionError(f"coefficient paths have {self.dyn.A.shape[0]} cells, grid has {N}")
        expect = {
            "Q": (N, n, n), "R": (N, m, m), "G": (n, n), "Gbar": (n, n), "q": (N, n),
            "p": (N, m), "xi": (n,), "eta": (n,), "zeta": (n,),
        }
        for name, shape in expect.items():
            if getattr(self.cost, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self.cost, name).shape}, expected {shape}")
        if self.x0.shape != (n,):
            raise DimensionError(f"x0 has shape {self.x0.shape}, expected {(n,)}")

    @property
    def n(self):
        return self.dyn.n

    @property
    def m(self):
        return self.dyn.m

    def coefficients(self, k):
        d, c = self.dyn, self.cost
        return Coefficients(d.A[k], d.B[k], d.C[k], d.D[k], d.a[k], d.b[k], c.Q[k], c.R[k], c.q[k], c.p[k])

    def replace(self, **changes):
        """Copy with top-level, dynamics or cost fields replaced by keyword."""
        dyn_names = {f.name for f in dataclasses.fields(DynamicsSpec)}
        cost_names = {f.name for f in dataclasses.fields(CostSpec)}
        dyn = {k: changes.pop(k) for k in list(changes) if k in dyn_names}
        cost = {k: changes.pop(k) for k in list(changes) if k in cost_names}
        if dyn:
            changes["dyn"] = dataclasses.replace(self.dyn, **dyn)
        if cost:
            changes["cost"] = dataclasses.replace(self.cost, **cost)
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class CaseTag:
    variant: str
    delta_R: float
    delta_G: float
    delta_DtD: float
    uniform_positivity: bool = field(default=False)

    @property
    def solvable_case(self):
        return self.variant != NEITHER

    def to_dict(self):
        return dataclasses.asdict(self)


def validate(spec, tol=PSD_TOL):
    """Classify ``spec`` against the standing assumptions.

    Returns the strongest :class:`CaseTag` supported.  ``Standard`` needs
    ``R >= delta I`` uniformly, ``Singular`` needs both ``G`` and ``D^T D``
    uniformly positive; both need ``Q, R, G`` positive semidefinite.
    """
    c, d = spec.cost, spec.dyn
    for name in ("Q", "R", "G", "Gbar"):
        M = getattr(c, name)
        skew = np.max(np.abs(M - np.swapaxes(M, -1, -2))) if M.size else 0.0
        if skew > SYM_TOL:
            raise AsymmetryError(f"{name} asymmetric by {skew:.3g}")
    if c.Q.shape[1] != spec.n or c.R.shape[1] != spec.m or d.D.shape[2] != spec.m:
        raise DimensionError("inconsistent dimensions")

    delta_R = min_eig(c.R)
    delta_G = min_eig(c.G)
    DtD = np.einsum("kim,kil->kml", d.D, d.D)
    delta_DtD = min_eig(DtD)
    psd_ok = min_eig(c.Q) >= -tol and delta_R >= -tol and delta_G >= -tol

    standard = psd_ok and delta_R >= tol
    singular = psd_ok and delta_G >= tol and delta_DtD >= tol
    if standard and singular:
        variant = BOTH
    elif standard:
        variant = STANDARD
    elif singular:
        variant = SINGULAR
    else:
        variant = NEITHER
    return CaseTag(variant, delta_R, delta_G, delta_DtD, uniform_positivity=bool(delta_G >= tol))


def normalize(spec):
    """Fold ``p`` into ``(a, b)`` and reduce ``eta`` to the linear weight ``zeta``.

    Idempotent: a normalised spec is returned unchanged.
    """
    if spec.normalized:
        return spec
    d, c = spec.dyn, spec.cost
    a = d.a + np.einsum("knm,km->kn", d.B, c.p)
    b = d.b + np.einsum("knm,km->kn", d.D, c.p)
    zeta = c.zeta + c.Gbar @ c.eta
    constant = c.constant + float(c.eta @ c.Gbar @ c.eta)
    return spec.replace(a=a, b=b, p=np.zeros_like(c.p), zeta=zeta, constant=constant, normalized=True)


# -- JSON problem files ----------------------------------------------------

_MATRIX_KEYS = {"A": "nn", "B": "nm", "C": "nn", "D": "nm", "Q": "nn", "R": "mm"}
_VECTOR_KEYS = {"a": "n", "b": "n", "q": "n", "p": "m"}
_CONST_MATRIX = ("G", "Gbar")
_CONST_VECTOR = ("xi", "eta")


def _path(value, N, shape, key):
    arr = np.asarray(value, dtype=float)
    if arr.shape == shape:
        return np.broadcast_to(arr, (N,) + shape).copy()
    if arr.shape == (N,) + shape:
        return arr
    raise DimensionError(f"'{key}' has shape {arr.shape}; expected {shape} or {(N,) + shape}")


def problem_from_dict(data):
    """Build a :class:`ProblemSpec` from the JSON problem-file layout.

    Matrix entries are a single row-major matrix (constant in time) or a list
    of ``steps`` matrices, one per cell; vectors likewise.  Omitted entries
    default to zero.
    """
    try:
        T, N, n, m = float(data["horizon"]), int(data["steps"]), int(data["n"]), int(data["m"])
        x0 = data["x0"]
    except KeyError as exc:
        raise InputError(f"missing required key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise InputError(f"bad header value: {exc}") from None
    known = {"horizon", "steps", "n", "m", "x0", *_MATRIX_KEYS, *_VECTOR_KEYS, *_CONST_MATRIX, *_CONST_VECTOR}
    unknown = set(data) - known
    if unknown:
        raise InputError(f"unknown keys: {sorted(unknown)}")
    dims = {"n": n, "m": m}
    grid = TimeGrid(T, N)
    vals = {}
    for key, dd in _MATRIX_KEYS.items():
        shape = (dims[dd[0]], dims[dd[1]])
        vals[key] = _path(data.get(key, np.zeros(shape)), N, shape, key)
    for key, dd in _VECTOR_KEYS.items():
        vals[key] = _path(data.get(key, np.zeros(dims[dd])), N, (dims[dd],), key)
    for key in _CONST_MATRIX:
        vals[key] = np.asarray(data.get(key, np.zeros((n, n))), dtype=float)
    for key in _CONST_VECTOR:
        vals[key] = np.asarray(data.get(key, np.zeros(n)), dtype=float)
    dyn = DynamicsSpec(vals["A"], vals["B"], vals["C"], vals["D"], vals["a"], vals["b"])
    cost = CostSpec(vals["Q"], vals["R"], vals["G"], vals["Gbar"], vals["q"], vals["p"], vals["xi"], vals["eta"])
    return ProblemSpec(grid, dyn, cost, np.asarray(x0, dtype=float))


def _compact(path):
    """Collapse a time-constant path back to a single entry."""
    return path[0].tolist() if np.all(path == path[0]) else path.tolist()


def problem_to_dict(spec):
    if spec.normalized:
        raise InputError("serialise the original (un-normalised) spec")
    d, c = spec.dyn, spec.cost
    out = {"horizon": spec.grid.horizon, "steps": spec.grid.n_steps, "n": spec.n, "m": spec.m,
           "x0": spec.x0.tolist()}
    for key in ("A", "B", "C", "D", "a", "b"):
        out[key] = _compact(getattr(d, key))
    for key in ("Q", "R", "q", "p"):
        out[key] = _compact(getattr(c, key))
    for key in ("G", "Gbar", "xi", "eta"):
        out[key] = getattr(c, key).tolist()
    return out


def load_problem(path):
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"malformed JSON: {exc}") from None
    if not isinstance(data, dict):
        raise InputError("problem file must hold a JSON object")
    return problem_from_dict(data)


def make_problem(horizon, steps, x0, A, B, C=None, D=None, a=None, b=None, Q=None, R=None,
                 G=None, Gbar=None, q=None, p=None, xi=None, eta=None):
    """Keyword front end to :func:`problem_from_dict` for in-code construction."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    B = np.asarray(B, dtype=float)
    n = x0.shape[0]
    m = B.shape[-1]
    data = {"horizon": horizon, "steps": steps, "n": n, "m": m, "x0": x0, "A": A, "B": B}
    for key, val in dict(C=C, D=D, a=a, b=b, Q=Q, R=R, G=G, Gbar=Gbar, q=q, p=p, xi=xi, eta=eta).items():
        if val is not None:
            data[key] = val
    return problem_from_dict(data)
