"""Closed-form predictors for the two-branch model.

The optimal predictor knows which branch a row belongs to; the marginal
one only sees ``X' = (X3, ..., X10)`` and averages the two branches with
``gamma = (alpha + beta) / 2``, which is the best any predictor blind to
``delta(X1, X2)`` can do.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sim import Model8Params

# Irreducible error of the two-branch model with unit-variance noise.
OPTIMAL_MSE = 2.0


@dataclass(frozen=True)
class OracleSpec:
    alpha: np.ndarray
    beta: np.ndarray

    @classmethod
    def from_params(cls, params: Model8Params) -> "OracleSpec":
        return cls(np.asarray(params.alpha, dtype=np.float64), np.asarray(params.beta, dtype=np.float64))

    @property
    def gamma(self) -> np.ndarray:
        return (self.alpha + self.beta) / 2


def optimal_predict(x, spec: OracleSpec):
    """``delta(x1, x2) alpha.x' + (1 - delta) beta.x'`` for a row or a matrix of rows."""
    x = np.asarray(x, dtype=np.float64)
    X = np.atleast_2d(x)
    x1, x2 = X[:, 0], X[:, 1]
    if not (np.isin(x1, (0.0, 1.0)).all() and np.isin(x2, (0.0, 1.0)).all()):
        raise ValueError("x1 and x2 must be binary (0 or 1)")
    x_prime = X[:, 2:]
    out = np.where(x1 == x2, x_prime @ spec.alpha, x_prime @ spec.beta)
    return float(out[0]) if x.ndim == 1 else out


def marginal_predict(x_prime, spec: OracleSpec):
    """``gamma . x'`` for one 8-vector or a matrix of them."""
    x_prime = np.asarray(x_prime, dtype=np.float64)
    out = x_prime @ spec.gamma
    return float(out) if x_prime.ndim == 1 else out


class OptimalPredictor:
    """Predictor handle over full rows ``(x1, x2, x3, ..., x10)``."""

    def __init__(self, spec: OracleSpec):
        self.spec = spec

    def predict(self, X) -> np.ndarray:
        return optimal_predict(np.atleast_2d(X), self.spec)


class MarginalPredictor:
    """Predictor handle over full rows; ignores the first two columns."""

    def __init__(self, spec: OracleSpec):
        self.spec = spec

    def predict(self, X) -> np.ndarray:
        return marginal_predict(np.atleast_2d(np.asarray(X, dtype=np.float64))[:, 2:], self.spec)
