"""Small symmetric-matrix helpers shared by the solver modules."""

import numpy as np

from .exceptions import AsymmetryError, IllConditioned

SYM_TOL = 1e-12
PSD_TOL = 1e-10
COND_MAX = 1e12


def sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def check_symmetric(M, name="matrix", tol=SYM_TOL):
    """Return the symmetrised copy of ``M`` (works on stacks).

    Raises AsymmetryError when the largest entry of ``M - M^T`` exceeds ``tol``.
    """
    M = np.asarray(M, dtype=float)
    if M.shape[-1] != M.shape[-2]:
        raise AsymmetryError(f"{name} is not square: shape {M.shape}")
    skew = np.max(np.abs(M - np.swapaxes(M, -1, -2))) if M.size else 0.0
    if skew > tol:
        raise AsymmetryError(f"{name} asymmetric by {skew:.3g} > {tol:g}")
    return sym(M)


def min_eig(M):
    """Smallest eigenvalue of the symmetric part; stacks reduce to one scalar."""
    M = np.asarray(M, dtype=float)
    if M.shape[-1] == 0:
        return np.inf
    return float(np.min(np.linalg.eigvalsh(sym(M))))


def is_psd(M, tol=PSD_TOL):
    return min_eig(M) >= -tol


def is_pd(M, tol=PSD_TOL):
    return min_eig(M) >= tol


def sym_cond(M):
    w = np.abs(np.linalg.eigvalsh(sym(M)))
    lo = w.min()
    return np.inf if lo == 0.0 else float(w.max() / lo)


def sym_solve(M, rhs, name="matrix", cond_max=COND_MAX):
    """Solve ``M x = rhs`` for symmetric ``M``, refusing ill-conditioned systems."""
    M = sym(np.asarray(M, dtype=float))
    cond = sym_cond(M)
    if not np.isfinite(cond) or cond > cond_max:
        raise IllConditioned(f"{name} has condition number {cond:.3g} > {cond_max:g}", cond=cond)
    return np.linalg.solve(M, rhs)


def sym_inv(M, name="matrix", cond_max=COND_MAX):
    M = np.asarray(M, dtype=float)
    return sym(sym_solve(M, np.eye(M.shape[0]), name=name, cond_max=cond_max))


def sqrtm_psd(M):
    w, V = np.linalg.eigh(sym(M))
    return sym((V * np.sqrt(np.clip(w, 0.0, None))) @ V.T)
