"""Mean-field stochastic LQ control with a terminal mean-field cost.

Deterministic-coefficient solver: backward Riccati integration, linear
auxiliary systems, dual quadratic forms with solvability certificates,
optimal feedback synthesis and Monte Carlo verification, plus a
multi-asset mean-variance application.
"""

from .duality import Solution, solve
from .estimator import MeanFieldLQ, MeanVariancePortfolio
from .exceptions import MFLQError
from .model import ProblemSpec, load_problem, make_problem, normalize, validate
from .portfolio import MVModel, reference_market
from .simulate import SimulationConfig, simulate

__version__ = "0.1.0"

__all__ = [
    "MFLQError",
    "MVModel",
    "MeanFieldLQ",
    "MeanVariancePortfolio",
    "ProblemSpec",
    "SimulationConfig",
    "Solution",
    "load_problem",
    "make_problem",
    "normalize",
    "reference_market",
    "simulate",
    "solve",
    "validate",
]
