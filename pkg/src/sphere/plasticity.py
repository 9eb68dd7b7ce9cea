"""Direct weight-update rules: classical Hebbian and Oja.

Full-batch matrix form; used for baseline comparisons and fixed-point
sanity checks, not for the block-wise training loop.
"""

import enum
from dataclasses import dataclass, replace

import numpy as np

from .linalg import NumericsError, as_matrix

DIVERGENCE_NORM_CAP = 1e12


class Rule(enum.Enum):
    HEBB = "hebb"
    OJA = "oja"


class DivergenceError(RuntimeError):
    """Weights became non-finite or unboundedly large."""


@dataclass
class RuleState:
    w: np.ndarray
    eta: float
    rule: Rule

    def __post_init__(self):
        self.w = as_matrix(self.w)
        if self.eta <= 0:
            raise NumericsError("learning rate must be positive")


def _checked(state: RuleState, w_new: np.ndarray) -> RuleState:
    if not np.all(np.isfinite(w_new)) or np.linalg.norm(w_new) > DIVERGENCE_NORM_CAP:
        raise DivergenceError(f"weights diverged under {state.rule.value} rule")
    return replace(state, w=w_new)


def hebbian_step(state: RuleState, x) -> RuleState:
    """W <- W + eta * X^T Y with Y = X W (unconstrained, grows without bound)."""
    x = as_matrix(x)
    if x.shape[1] != state.w.shape[0]:
        raise NumericsError("input width does not match weight rows")
    y = x @ state.w
    return _checked(state, state.w + state.eta * (x.T @ y))


def oja_step(state: RuleState, x) -> RuleState:
    """W <- W + eta * (X^T Y - W Y^T Y) with Y = X W."""
    x = as_matrix(x)
    if x.shape[1] != state.w.shape[0]:
        raise NumericsError("input width does not match weight rows")
    y = x @ state.w
    return _checked(state, state.w + state.eta * (x.T @ y - state.w @ (y.T @ y)))
