"""Truncated eigendecomposition and the truncated augmented-DFT operator.

Both reparametrizations feed the reduced objective: the eigenbasis gives
x = mean + V diag(sqrt(lambda)) z with z standard-normal a priori, and the
Fourier operator maps length-n residual vectors to their lowest l frequency
components, stacked as [DC, Re(1..l-1), Im(1..l-1)] in an unnormalized
forward-DFT convention (imaginary rows carry -sin). The DC imaginary row is
identically zero and is dropped, giving 2l-1 rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh
from scipy.sparse.linalg import eigsh

__all__ = [
    "EigenBasis",
    "FourierOperator",
    "truncated_eigen",
    "synthesize_trajectory",
    "project_to_coefficients",
    "build_fourier_operator",
    "push_covariance",
]

# Eigenvalues below this fraction of the largest are dropped (j shrinks).
_EIGENVALUE_CUTOFF = 1e-12
# Use the iterative solver only when clearly in the "few of many" regime.
_EIGSH_MIN_N = 200


@dataclass(frozen=True)
class EigenBasis:
    """Top-j eigenpairs of a covariance matrix, descending, sign-fixed."""

    vectors: np.ndarray  # (n, j), orthonormal columns
    values: np.ndarray   # (j,), strictly positive, descending
    n: int
    j: int

    @property
    def scaled_vectors(self) -> np.ndarray:
        """V diag(sqrt(lambda)), the synthesis map applied to coefficients."""
        return self.vectors * np.sqrt(self.values)


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    """Make each column's largest-magnitude entry positive (first on ties)."""
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def truncated_eigen(K: np.ndarray, j: int) -> EigenBasis:
    """Top-j eigenpairs of a symmetric PSD matrix, descending eigenvalues."""
    K = np.asarray(K, dtype=float)
    n = K.shape[0]
    if K.shape != (n, n):
        raise ValueError("K must be square")
    scale = max(1.0, float(np.max(np.abs(K))))
    if np.max(np.abs(K - K.T)) > 1e-10 * scale:
        raise ValueError("K must be symmetric within 1e-10")
    if not 1 <= j <= n:
        raise ValueError("need 1 <= j <= n")

    if n >= _EIGSH_MIN_N and j <= n // 4:
        vals, vecs = eigsh(K, k=j, which="LM", v0=np.full(n, 1.0 / np.sqrt(n)))
        order = np.argsort(vals)[::-1]
        vals, vecs = vals[order], vecs[:, order]
    else:
        vals, vecs = eigh(K)
        vals, vecs = vals[::-1][:j], vecs[:, ::-1][:, :j]

    keep = vals > _EIGENVALUE_CUTOFF * vals[0]
    vals, vecs = vals[keep], vecs[:, keep]
    return EigenBasis(vectors=_fix_signs(np.ascontiguousarray(vecs)),
                      values=vals, n=n, j=int(vals.size))


def synthesize_trajectory(basis: EigenBasis, mean, z):
    """mean + V diag(sqrt(lambda)) z."""
    z = np.asarray(z, dtype=float)
    if z.shape != (basis.j,):
        raise ValueError(f"z must have length {basis.j}")
    return np.asarray(mean, dtype=float) + basis.scaled_vectors @ z


def project_to_coefficients(basis: EigenBasis, mean, x):
    """diag(1/sqrt(lambda)) V^T (x - mean); least squares when j < n."""
    x = np.asarray(x, dtype=float)
    if x.shape != (basis.n,):
        raise ValueError(f"x must have length {basis.n}")
    return (basis.vectors.T @ (x - np.asarray(mean, dtype=float))) / np.sqrt(basis.values)


@dataclass(frozen=True)
class FourierOperator:
    """Truncated augmented-DFT matrix: (2l-1) x n, rows [DC, Re 1..l-1, Im 1..l-1]."""

    matrix: np.ndarray
    l: int
    n: int

    @property
    def rows(self) -> int:
        return 2 * self.l - 1


def build_fourier_operator(n: int, l: int) -> FourierOperator:
    """Rows: ones (DC); cos(2 pi f k / n) for f=1..l-1; -sin(2 pi f k / n)."""
    if l < 1 or 2 * l - 1 > n:
        raise ValueError("need 1 <= l and 2l-1 <= n")
    k = np.arange(n)
    f = np.arange(1, l)
    ang = 2.0 * np.pi * np.outer(f, k) / n
    matrix = np.vstack([np.ones((1, n)), np.cos(ang), -np.sin(ang)])
    return FourierOperator(matrix=matrix, l=l, n=n)


def push_covariance(op: FourierOperator, C: np.ndarray) -> np.ndarray:
    """A C A^T, symmetrized to remove roundoff asymmetry."""
    C = np.asarray(C, dtype=float)
    if C.shape != (op.n, op.n):
        raise ValueError("C must be n x n for the operator's n")
    out = op.matrix @ C @ op.matrix.T
    return 0.5 * (out + out.T)
