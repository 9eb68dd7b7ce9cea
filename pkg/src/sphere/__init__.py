"""Block-wise unsupervised representation learning under a Gram-matrix
structural-matching loss with an orthogonality constraint, verified against
a closed-form SVD oracle."""

__version__ = "0.1.0"
