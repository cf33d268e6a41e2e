"""Structured linear algebra kernels used across the predictors.

Two recurring structures are handled here: low-rank-plus-diagonal covariances
Sigma = S K S' + D (solved via Sherman-Morrison-Woodbury without forming the
n x n matrix) and sparse symmetric positive definite precisions (solved and
log-determinant-ed via sparse LU).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.linalg import cho_factor, cho_solve
from scipy.sparse.linalg import splu


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a matrix fails factorization even after one jitter retry."""


@dataclass(frozen=True)
class CholFactor:
    """Lower-triangular Cholesky factor with solve/logdet helpers."""

    L: np.ndarray

    def solve(self, b) -> np.ndarray:
        return cho_solve((self.L, True), np.asarray(b, dtype=float))

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.L))))


def chol_factor_jittered(A: np.ndarray) -> tuple[CholFactor, float]:
    """Cholesky of a symmetric matrix, retrying once with diagonal jitter.

    On the first failure 1e-8 * mean(diag(A)) is added to the diagonal; a
    second failure raises NotPositiveDefiniteError. Returns the factor and
    the jitter actually applied (0.0 in the clean case).
    """
    A = np.asarray(A, dtype=float)
    try:
        c, _ = cho_factor(A, lower=True)
        return CholFactor(np.tril(c)), 0.0
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-8 * float(np.mean(np.diag(A)))
    if jitter <= 0:
        jitter = 1e-12
    try:
        c, _ = cho_factor(A + jitter * np.eye(A.shape[0]), lower=True)
        return CholFactor(np.tril(c)), jitter
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(
            f"matrix of order {A.shape[0]} not positive definite "
            f"(jitter {jitter:.3e} did not help)"
        ) from exc


def _as_dense_mult(S):
    """Return a callable pair (S @ x, S.T @ x) treating S dense or sparse."""
    if sparse.issparse(S):
        return S.dot, S.T.dot
    S = np.asarray(S, dtype=float)
    return S.dot, S.T.dot


class LowRankPlusDiag:
    """Covariance Sigma = S K S' + diag(d) held in factored form.

    S is (n, r) dense or sparse, K an (r, r) positive definite matrix, d a
    positive length-n vector. All operations run through the (r, r) capacity
    matrix M = K^-1 + S' D^-1 S, so nothing of size n x n is ever formed.
    """

    def __init__(self, S, K, d):
        self.S = S
        self.d = np.asarray(d, dtype=float)
        if np.any(self.d <= 0):
            raise ValueError("diagonal entries must be positive")
        self.n = self.d.size
        K = np.asarray(K, dtype=float)
        self.r = K.shape[0]
        self.K_chol, _ = chol_factor_jittered(K)
        if sparse.issparse(S):
            self._Dinv_S = sparse.csr_matrix(S.multiply(1.0 / self.d[:, None]))
            StDinvS = (S.T @ self._Dinv_S).toarray()
        else:
            S = np.asarray(S, dtype=float)
            self.S = S
            self._Dinv_S = S / self.d[:, None]
            StDinvS = S.T @ self._Dinv_S
        Kinv = self.K_chol.solve(np.eye(self.r))
        self.M = Kinv + StDinvS
        self.M_chol, _ = chol_factor_jittered(self.M)

    def solve(self, b) -> np.ndarray:
        """Sigma^-1 b for a vector or a stack of columns."""
        b = np.asarray(b, dtype=float)
        squeeze = b.ndim == 1
        B = b[:, None] if squeeze else b
        Dinv_b = B / self.d[:, None]
        t = self.S.T @ Dinv_b
        out = Dinv_b - self._Dinv_S @ self.M_chol.solve(t)
        return out[:, 0] if squeeze else out

    def logdet(self) -> float:
        """log|Sigma| via the matrix determinant lemma."""
        return (self.M_chol.logdet() + self.K_chol.logdet()
                + float(np.sum(np.log(self.d))))

    def quad_form(self, b) -> float:
        """b' Sigma^-1 b."""
        b = np.asarray(b, dtype=float)
        return float(b @ self.solve(b))

    def trace_inv(self) -> float:
        """tr(Sigma^-1) = tr(D^-1) - tr(M^-1 S' D^-2 S)."""
        if sparse.issparse(self.S):
            W = (self._Dinv_S.T @ self._Dinv_S).toarray()
        else:
            W = self._Dinv_S.T @ self._Dinv_S
        return float(np.sum(1.0 / self.d) - np.trace(self.M_chol.solve(W)))

    def gaussian_loglik(self, resid) -> float:
        """Mean-zero Gaussian log density of `resid` under Sigma."""
        resid = np.asarray(resid, dtype=float)
        return -0.5 * (self.n * math.log(2.0 * math.pi) + self.logdet()
                       + self.quad_form(resid))


@dataclass(frozen=True)
class SparseLU:
    """Sparse LU of a symmetric positive definite matrix."""

    lu: object
    n: int

    def solve(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if b.ndim == 1:
            return self.lu.solve(b)
        return np.column_stack([self.lu.solve(b[:, j]) for j in range(b.shape[1])])

    def logdet(self) -> float:
        """log det, valid only for positive determinants (checked)."""
        diagU = self.lu.U.diagonal()
        diagL = self.lu.L.diagonal()
        sign = _perm_parity(self.lu.perm_r) * _perm_parity(self.lu.perm_c)
        sign *= int(np.prod(np.sign(diagU))) * int(np.prod(np.sign(diagL)))
        if sign <= 0:
            raise NotPositiveDefiniteError("sparse matrix has nonpositive determinant")
        return float(np.sum(np.log(np.abs(diagU))) + np.sum(np.log(np.abs(diagL))))


def _perm_parity(perm: np.ndarray) -> int:
    """+1/-1 parity of a permutation, by cycle decomposition."""
    perm = np.asarray(perm)
    seen = np.zeros(perm.size, dtype=bool)
    parity = 1
    for i in range(perm.size):
        if seen[i]:
            continue
        j, length = i, 0
        while not seen[j]:
            seen[j] = True
            j = perm[j]
            length += 1
        if length % 2 == 0:
            parity = -parity
    return parity


def sparse_spd_factor(A) -> SparseLU:
    """LU-factor a sparse symmetric positive definite matrix (COLAMD order)."""
    A = sparse.csc_matrix(A)
    return SparseLU(splu(A, permc_spec="COLAMD"), A.shape[0])


class SparseLowRank:
    """Sigma = S K S' + diag(d) where K^-1 (not K) is sparse and given.

    Used by the lattice/mesh predictors: Kinv is the sparse coefficient
    precision, S the sparse basis design. `kinv_logdet` must be log|K^-1|.
    Solves and log-determinants go through M = K^-1 + S' D^-1 S, factored
    once with sparse LU.
    """

    def __init__(self, S, Kinv, kinv_logdet: float, d):
        self.S = sparse.csr_matrix(S)
        self.d = np.asarray(d, dtype=float)
        if np.any(self.d <= 0):
            raise ValueError("diagonal entries must be positive")
        self.n = self.d.size
        self._Dinv_S = sparse.csr_matrix(self.S.multiply(1.0 / self.d[:, None]))
        M = (sparse.csc_matrix(Kinv) + self.S.T @ self._Dinv_S).tocsc()
        self.M_factor = sparse_spd_factor(M)
        self._logdet = (self.M_factor.logdet() - kinv_logdet
                        + float(np.sum(np.log(self.d))))

    def solve(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        squeeze = b.ndim == 1
        B = b[:, None] if squeeze else b
        Dinv_b = B / self.d[:, None]
        out = Dinv_b - self._Dinv_S @ self.M_factor.solve(self.S.T @ Dinv_b)
        return out[:, 0] if squeeze else out

    def logdet(self) -> float:
        return self._logdet

    def quad_form(self, b) -> float:
        b = np.asarray(b, dtype=float)
        return float(b @ self.solve(b))

    def gaussian_loglik(self, resid) -> float:
        resid = np.asarray(resid, dtype=float)
        return -0.5 * (self.n * math.log(2.0 * math.pi) + self.logdet()
                       + self.quad_form(resid))


def gls_beta(X: np.ndarray, z: np.ndarray, sigma_solve) -> np.ndarray:
    """Generalized least squares: (X' Sigma^-1 X)^-1 X' Sigma^-1 z.

    `sigma_solve` maps a column stack b to Sigma^-1 b.
    """
    X = np.asarray(X, dtype=float)
    Siv_X = sigma_solve(X)
    A = X.T @ Siv_X
    c = Siv_X.T @ np.asarray(z, dtype=float)
    factor, _ = chol_factor_jittered(A)
    return factor.solve(c)
