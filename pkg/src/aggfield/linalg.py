"""Sparse symmetric positive definite factorization utilities.

scipy has no native sparse Cholesky, but SuperLU in symmetric mode with
diagonal pivoting disabled produces U = D L^T for SPD input, which gives a
genuine Cholesky factor, a log-determinant, and a half-solve for sampling.
"""

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu, spsolve_triangular


class NotPositiveDefiniteError(ValueError):
    """Raised when a matrix expected to be SPD fails to factorize."""


class SparseCholesky:
    """Cached sparse Cholesky factorization of an SPD matrix.

    Internally A[q][:, q] = C C^T where q inverts SuperLU's fill-reducing
    column permutation and C = L sqrt(diag(U)).

    Attributes
    ----------
    n : int
        Matrix dimension.
    logdet : float
        Log-determinant of A.
    """

    def __init__(self, A):
        A = sp.csc_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"matrix must be square, got {A.shape}")
        self.n = A.shape[0]
        try:
            self._lu = splu(
                A,
                diag_pivot_thresh=0.0,
                permc_spec="MMD_AT_PLUS_A",
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:
            raise NotPositiveDefiniteError(f"sparse factorization failed: {exc}") from exc
        d = self._lu.U.diagonal()
        if not np.all(np.isfinite(d)) or np.any(d <= 0.0):
            raise NotPositiveDefiniteError(
                "matrix is not positive definite (nonpositive pivot encountered)"
            )
        self.logdet = float(np.sum(np.log(d)))
        self._perm_inv = np.argsort(self._lu.perm_c)
        self._half_t = None  # C^T, built lazily for sampling

    def solve(self, b):
        """Solve A x = b for vector or matrix right-hand side."""
        b = np.asarray(b, dtype=float)
        return self._lu.solve(b)

    def half_solve_t(self, z):
        """Return x with x[q] = C^{-T} z, so that x ~ N(0, A^{-1}) for z ~ N(0, I).

        z may be a vector or an (n, k) matrix of columns.
        """
        if self._half_t is None:
            d = self._lu.U.diagonal()
            self._half_t = (self._lu.L @ sp.diags(np.sqrt(d))).T.tocsr()
        z = np.asarray(z, dtype=float)
        xq = spsolve_triangular(self._half_t, z, lower=False)
        x = np.empty_like(xq)
        x[self._perm_inv] = xq
        return x


def block_diag_sparse(blocks):
    """Sparse block-diagonal assembly (thin wrapper, fixed csc output)."""
    return sp.block_diag(blocks, format="csc")
