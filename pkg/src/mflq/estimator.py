"""scikit-learn style front ends.

``fit`` runs the full solve pipeline on a problem description and
``predict`` evaluates the optimal feedback at given states and time.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import duality, portfolio
from .model import ProblemSpec, problem_from_dict
from .simulate import SimulationConfig, simulate

__all__ = ["MeanFieldLQ", "MeanVariancePortfolio"]


def _as_spec(X):
    if isinstance(X, ProblemSpec):
        return X
    if isinstance(X, dict):
        return problem_from_dict(X)
    raise TypeError(f"expected a ProblemSpec or problem dict, got {type(X).__name__}")


class _FeedbackMixin:
    def _check_states(self, X):
        check_is_fitted(self, "solution_")
        X = check_array(X, ensure_2d=False, dtype=float)
        X = np.atleast_2d(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def predict(self, X, t=0.0):
        """Optimal control ``Theta(t) x + u0(t)`` for each row ``x`` of ``X``."""
        X = self._check_states(X)
        return self.solution_.feedback(float(t), X)

    def simulate(self, n_paths=10_000, n_steps=None, seed=0, n_workers=1):
        check_is_fitted(self, "solution_")
        cfg = SimulationConfig(n_paths=n_paths, n_steps=n_steps, master_seed=seed, n_workers=n_workers)
        return simulate(self.solution_.original, self.solution_.feedback, cfg)


class MeanFieldLQ(_FeedbackMixin, BaseEstimator):
    """Mean-field LQ solver with a terminal mean-field cost.

    Parameters
    ----------
    substeps : int, default=8
        RK4 substeps per grid cell for the backward systems.
    quadrature : {"rk4", "trapezoid"}, default="rk4"
        Rule for the time integrals in the dual quadratic forms.

    Attributes
    ----------
    solution_ : mflq.duality.Solution
    certificate_ : mflq.duality.DualCertificate
    d_star_ : ndarray of shape (n,)
        Optimal terminal mean.
    lambda_star_ : ndarray of shape (n,)
    value_ : float
        Optimal cost.
    n_features_in_ : int
        State dimension.
    """

    def __init__(self, substeps=8, quadrature="rk4"):
        self.substeps = substeps
        self.quadrature = quadrature

    def fit(self, X, y=None):
        spec = _as_spec(X)
        sol = duality.solve(spec, substeps=self.substeps, quadrature=self.quadrature)
        self.solution_ = sol
        self.certificate_ = sol.certificate
        self.d_star_ = sol.certificate.d_star
        self.lambda_star_ = sol.certificate.lambda_star
        self.value_ = sol.certificate.value
        self.n_features_in_ = spec.n
        return self

    def value(self):
        check_is_fitted(self, "solution_")
        return self.value_


class MeanVariancePortfolio(_FeedbackMixin, BaseEstimator):
    """Optimal multi-account mean-variance allocation.

    ``fit`` takes an :class:`mflq.portfolio.MVModel`; ``predict`` returns the
    amounts invested in each asset for given wealth vectors.

    Attributes
    ----------
    J_ : float
        Optimal preference value.
    d_star_ : ndarray of shape (n,)
        Optimal expected terminal wealth per account.
    """

    def __init__(self, steps=50, substeps=8):
        self.steps = steps
        self.substeps = substeps

    def fit(self, X, y=None):
        if not isinstance(X, portfolio.MVModel):
            raise TypeError("expected an MVModel")
        sol = portfolio.solve_mv(X, steps=self.steps, substeps=self.substeps)
        self.solution_ = sol
        self.d_star_ = sol.certificate.d_star
        self.J_ = portfolio.preference_value(X, sol.certificate.value)
        self.n_features_in_ = X.n
        return self
