"""Sparse symmetric positive-definite factorization.

SuperLU is run with a symmetric fill-reducing ordering and pivoting disabled,
which for an SPD matrix yields ``P^T Q P = L D L^T`` with unit-lower ``L``.
A non-positive pivot means the matrix is not positive definite.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve_triangular, splu


class NotPositiveDefinite(np.linalg.LinAlgError):
    pass


DENSE_BELOW = 500


class SPDFactor:
    """Factorization of an SPD matrix with logdet, solves and sampling.

    Parameters
    ----------
    Q : sparse or dense (n, n) array
        Symmetric positive-definite matrix.
    dense_below : int
        Matrices smaller than this use a dense Cholesky factorization.
    """

    def __init__(self, Q, dense_below: int = DENSE_BELOW):
        n = Q.shape[0]
        if Q.shape != (n, n):
            raise ValueError(f"expected a square matrix, got {Q.shape}")
        self.n = n
        self._dense = None
        self._lu = None
        if n == 0:
            self._d = np.empty(0)
            return
        if n < dense_below:
            A = Q.toarray() if sp.issparse(Q) else np.asarray(Q, dtype=float)
            self._factor_dense(A)
            return
        Q = sp.csc_matrix(Q, dtype=float)
        try:
            lu = splu(
                Q,
                permc_spec="MMD_AT_PLUS_A",
                diag_pivot_thresh=0.0,
                options=dict(SymmetricMode=True),
            )
        except RuntimeError as exc:  # exactly singular
            raise NotPositiveDefinite(str(exc)) from exc
        d = lu.U.diagonal()
        if np.array_equal(lu.perm_r, lu.perm_c):
            if not np.all(d > 0) or not np.all(np.isfinite(d)):
                raise NotPositiveDefinite("non-positive pivot in symmetric factorization")
            self._lu = lu
            self._d = d
        else:
            # SuperLU deviated from the symmetric permutation; fall back to dense.
            self._factor_dense(Q.toarray())

    def _factor_dense(self, A):
        if not np.all(np.isfinite(A)):
            raise NotPositiveDefinite("matrix has non-finite entries")
        try:
            self._dense = sla.cho_factor(A, lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefinite(str(exc)) from exc
        self._d = np.diag(self._dense[0]) ** 2

    def logdet(self) -> float:
        return float(np.sum(np.log(self._d)))

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        if self.n == 0:
            return b.copy()
        if self._lu is not None:
            return self._lu.solve(b)
        return sla.cho_solve(self._dense, b, check_finite=False)

    def inv_diag(self, block: int = 256) -> np.ndarray:
        """Diagonal of the inverse, by solving against identity columns in blocks."""
        if self._dense is not None:
            Linv = sla.solve_triangular(self._dense[0], np.eye(self.n), lower=True, check_finite=False)
            return np.einsum("ij,ij->j", Linv, Linv)
        out = np.empty(self.n)
        for start in range(0, self.n, block):
            stop = min(start + block, self.n)
            E = np.zeros((self.n, stop - start))
            E[np.arange(start, stop), np.arange(stop - start)] = 1.0
            X = self.solve(E)
            out[start:stop] = X[np.arange(start, stop), np.arange(stop - start)]
        return out

    def quad_inv(self, R) -> np.ndarray:
        """Per-row quadratic forms ``r Q^{-1} r^T`` for the rows of ``R``."""
        R = sp.csr_matrix(R)
        if R.shape[0] == 0:
            return np.empty(0)
        if self._dense is not None:
            W = sla.solve_triangular(self._dense[0], R.T.toarray(), lower=True, check_finite=False)
            return np.einsum("ij,ij->j", W, W)
        X = self.solve(R.T.toarray())
        return np.asarray(R.multiply(X.T).sum(axis=1)).ravel()

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Draw from N(0, Q^{-1}); returns shape (n,) or (size, n)."""
        k = 1 if size is None else size
        w = rng.standard_normal((self.n, k))
        if self._lu is not None:
            # Q[p, p] = L D L^T with p = argsort(perm_c)  =>  x[p] = L^{-T} D^{-1/2} w
            Lt = sp.csr_matrix(self._lu.L.T)
            y = spsolve_triangular(Lt, w / np.sqrt(self._d)[:, None], lower=False)
            x = y[self._lu.perm_c]
        else:
            x = sla.solve_triangular(self._dense[0], w, lower=True, trans="T")
        x = x.T
        return x[0] if size is None else x


class SparseTemplate:
    """Fixed union sparsity pattern of several matrices, for fast weighted sums.

    ``combine(w)`` returns ``sum_k w[k] * mats[k]`` as CSC without re-running
    sparse addition.
    """

    def __init__(self, mats):
        mats = [sp.coo_matrix(m) for m in mats]
        shape = mats[0].shape
        if any(m.shape != shape for m in mats):
            raise ValueError("all matrices must share a shape")
        self.shape = shape
        rows = np.concatenate([m.row for m in mats])
        cols = np.concatenate([m.col for m in mats])
        # column-major linear keys give CSC order directly
        keys = np.unique(cols.astype(np.int64) * shape[0] + rows)
        self.indices = (keys % shape[0]).astype(np.int32)
        col_of = keys // shape[0]
        self.indptr = np.searchsorted(col_of, np.arange(shape[1] + 1)).astype(np.int32)
        # row-major flat positions for dense output
        self.flat = self.indices.astype(np.int64) * shape[1] + col_of
        self.data = np.zeros((len(mats), len(keys)))
        for k, m in enumerate(mats):
            pos = np.searchsorted(keys, m.col.astype(np.int64) * shape[0] + m.row)
            np.add.at(self.data[k], pos, m.data)

    def combine(self, weights) -> sp.csc_matrix:
        vals = np.asarray(weights, dtype=float) @ self.data
        return sp.csc_matrix((vals, self.indices, self.indptr), shape=self.shape)

    def combine_dense(self, weights) -> np.ndarray:
        out = np.zeros(self.shape[0] * self.shape[1])
        out[self.flat] = np.asarray(weights, dtype=float) @ self.data
        return out.reshape(self.shape)

    def combine_auto(self, weights, dense_below: int = DENSE_BELOW):
        """Dense array below the dense-factorization threshold, CSC otherwise."""
        if self.shape[0] < dense_below:
            return self.combine_dense(weights)
        return self.combine(weights)
