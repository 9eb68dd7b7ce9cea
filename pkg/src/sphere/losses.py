"""Loss functions for structural-projection Hebbian training and their
analytic weight gradients in the linear case Y = X @ W.

Two evaluation paths exist on purpose:

* the training path (``normalize=True``, the default for ``sphere_loss`` /
  ``orth_loss`` / ``total_loss``) row-normalizes its inputs first, which
  bounds loss magnitudes across datasets;
* the linear-analysis path (``sphere_grad_linear``, ``orth_grad_linear``
  and ``normalize=False``) uses the raw matrices so it matches the
  closed-form SVD oracle exactly.
"""

from dataclasses import dataclass

import numpy as np

from .linalg import DEFAULT_EPS, NumericsError, as_matrix, frob_norm_sq, gram, row_normalize


class SingularGramError(NumericsError):
    """Input Gram matrix is singular or numerically near-singular."""


@dataclass
class LossBundle:
    """Scalar losses for one batch: total = sphere + lam * orth."""

    sphere: float
    orth: float
    total: float
    lam: float


def hebb_loss(y) -> float:
    """Classical Hebbian equivalent loss, -1/2 ||Y||_F^2."""
    return -0.5 * frob_norm_sq(y)


def anti_hebb_loss(y) -> float:
    """Anti-Hebbian equivalent loss, +1/2 ||Y||_F^2."""
    return 0.5 * frob_norm_sq(y)


def hebb_grad_linear(x, w) -> np.ndarray:
    """Gradient of hebb_loss(X @ W) with respect to W: -X.T @ Y."""
    x = as_matrix(x)
    w = as_matrix(w)
    return -x.T @ (x @ w)


def oja_equiv_loss(y, x, cond_cap: float = 1e10) -> float:
    """Oja-rule equivalent loss,
    1/4 Tr((K_Y - K_X) K_X^{-1} (K_Y - K_X)).

    Raises SingularGramError when X @ X.T is singular or its condition
    number exceeds `cond_cap` (the inverse term is the numerically fragile
    part of this objective).
    """
    y = as_matrix(y, dtype=np.float64)
    x = as_matrix(x, dtype=np.float64)
    if y.shape[0] != x.shape[0]:
        raise NumericsError("batch-size mismatch between Y and X")
    kx = gram(x)
    sv = np.linalg.svd(kx, compute_uv=False)
    if sv[0] == 0 or sv[-1] / sv[0] < 1.0 / cond_cap:
        raise SingularGramError("singular input Gram")
    diff = gram(y) - kx
    return 0.25 * float(np.trace(diff @ np.linalg.solve(kx, diff)))


def sphere_loss(z, x, normalize: bool = True, eps: float = DEFAULT_EPS) -> float:
    """Structural-matching loss ||K_Z - K_X||_F^2 on the batch Grams.

    With ``normalize=True`` both arguments are row-normalized first
    (training path); with ``normalize=False`` the raw Grams are compared
    (oracle / linear-analysis path).
    """
    z = as_matrix(z)
    x = as_matrix(x)
    if z.shape[0] != x.shape[0]:
        raise NumericsError("batch-size mismatch between Z and X")
    if normalize:
        z = row_normalize(z, eps)
        x = row_normalize(x, eps)
    return frob_norm_sq(gram(z) - gram(x))


def sphere_grad_linear(x, w) -> np.ndarray:
    """Analytic gradient of ||Y Y^T - X X^T||_F^2 wrt W for Y = X @ W:
    4 X^T (Y Y^T - X X^T) Y.  Uses raw (unnormalized) X."""
    x = as_matrix(x)
    w = as_matrix(w)
    if x.shape[1] != w.shape[0]:
        raise NumericsError("shape mismatch: X cols != W rows")
    y = x @ w
    return 4.0 * x.T @ ((y @ y.T - x @ x.T) @ y)


def orth_loss(z, normalize: bool = True, eps: float = DEFAULT_EPS) -> float:
    """Column-orthogonality penalty ||Z^T Z - I||_F^2."""
    z = as_matrix(z)
    if normalize:
        z = row_normalize(z, eps)
    m = z.shape[1]
    return frob_norm_sq(z.T @ z - np.eye(m, dtype=z.dtype))


def orth_grad_linear(x, w) -> np.ndarray:
    """Weight gradient of the orthogonality penalty for Y = X @ W:
    X^T Y (Y^T Y - I).

    This is the expression used throughout training.  It equals exactly
    1/4 of the derivative of ||Y^T Y - I||_F^2 (the direction is
    identical; only the constant differs).
    """
    x = as_matrix(x)
    w = as_matrix(w)
    if x.shape[1] != w.shape[0]:
        raise NumericsError("shape mismatch: X cols != W rows")
    y = x @ w
    m = w.shape[1]
    return x.T @ (y @ (y.T @ y - np.eye(m, dtype=y.dtype)))


def total_loss(z, x, lam: float, normalize: bool = True, eps: float = DEFAULT_EPS) -> LossBundle:
    """Combined objective sphere + lam * orth as a LossBundle."""
    if lam < 0:
        raise NumericsError("lambda must be nonnegative")
    s = sphere_loss(z, x, normalize=normalize, eps=eps)
    o = orth_loss(z, normalize=normalize, eps=eps)
    return LossBundle(sphere=s, orth=o, total=s + lam * o, lam=lam)
