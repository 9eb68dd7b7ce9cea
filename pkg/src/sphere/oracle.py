"""Closed-form ground truth for the structural-matching loss, plus
representation-similarity diagnostics (linear CKA and SVD-component
alignment).

For a data matrix X with singular values sigma_1 >= sigma_2 >= ..., the
minimizer of ||Y Y^T - X X^T||_F^2 over B x M outputs is the projection of
X onto its top-M right singular vectors, with minimal loss
sum_{i>M} sigma_i^4.  Everything the training loop learns is checked
against this yardstick.
"""

from dataclasses import dataclass

import numpy as np

from .linalg import NumericsError, as_matrix, svd


class DegenerateInputError(NumericsError):
    """Similarity is undefined for zero-variance (all-constant) input."""


@dataclass
class OracleResult:
    """Optimal projection and minimal loss for a given width M."""

    y_star: np.ndarray
    min_loss: float
    gram_rank_m: np.ndarray


def principal_projection(x, m: int) -> OracleResult:
    """Best width-M output under the raw structural-matching loss.

    Returns Y* = X @ V_M (top-M right singular vectors, sign-normalized),
    the minimal loss sum_{i>M} sigma_i^4, and the best rank-M approximation
    of X @ X.T.
    """
    x = as_matrix(x, dtype=np.float64)
    n = x.shape[1]
    if not 1 <= m < n:
        raise NumericsError(f"require 1 <= M < N, got M={m}, N={n}")
    res = svd(x)
    y_star = x @ res.v[:, :m]
    min_loss = float(np.sum(res.s[m:] ** 4))
    um = res.u[:, :m]
    gram_rank_m = (um * res.s[:m] ** 2) @ um.T
    return OracleResult(y_star=y_star, min_loss=min_loss, gram_rank_m=gram_rank_m)


def _centered_gram(a: np.ndarray) -> np.ndarray:
    g = a @ a.T
    g = g - g.mean(axis=0, keepdims=True)
    g = g - g.mean(axis=1, keepdims=True)
    return g


def cka(a, b) -> float:
    """Linear centered kernel alignment between two representations.

    Both arguments are (batch x features) with the same batch; the score is
    in [0, 1] and invariant to orthogonal transforms and isotropic scaling
    of either argument.
    """
    a = as_matrix(a, dtype=np.float64)
    b = as_matrix(b, dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        raise NumericsError("batch-size mismatch")
    if a.shape[0] < 2:
        raise NumericsError("cka requires at least 2 samples")
    ga = _centered_gram(a)
    gb = _centered_gram(b)
    na = np.linalg.norm(ga)
    nb = np.linalg.norm(gb)
    if na == 0 or nb == 0:
        raise DegenerateInputError("zero-variance input, similarity undefined")
    return float(np.sum(ga * gb) / (na * nb))


def svd_alignment(a, b, k: int = 36) -> np.ndarray:
    """k x k matrix of |cosine| between right singular vectors of A and B.

    Entry (i, j) is |v_i(A) . v_j(B)|; both matrices must have the same
    column dimension.  k is clamped nowhere: exceeding the available rank
    is an error.
    """
    a = as_matrix(a, dtype=np.float64)
    b = as_matrix(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise NumericsError("column dimensions must agree")
    ra = min(a.shape)
    rb = min(b.shape)
    if k > min(ra, rb):
        raise NumericsError(f"k={k} exceeds available components ({min(ra, rb)})")
    va = svd(a).v[:, :k]
    vb = svd(b).v[:, :k]
    return np.abs(va.T @ vb)
