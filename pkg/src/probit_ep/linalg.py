"""Small dense-matrix helpers: vec/vech, duplication matrices, symmetric
eigendecomposition and the matrix logarithm/exponential.

All half-vectorisations use the column-major, on-and-below-diagonal order,
so that ``duplication_matrix(d) @ vech(A) == vec(A)`` for symmetric ``A``.
Only small matrices (random-effect dimensions) are expected here.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


def vech_length(d: int) -> int:
    return d * (d + 1) // 2


def dim_from_vech_length(n: int) -> int:
    """Recover ``d`` from ``d(d+1)/2``; raises on lengths that are not triangular."""
    d = int(round((np.sqrt(8 * n + 1) - 1) / 2))
    if d < 1 or vech_length(d) != n:
        raise ValueError(f"length {n} is not a valid half-vectorisation length")
    return d


@lru_cache(maxsize=None)
def _lower_indices(d: int) -> tuple[np.ndarray, np.ndarray]:
    # column-major walk over the lower triangle
    rows, cols = [], []
    for j in range(d):
        for i in range(j, d):
            rows.append(i)
            cols.append(j)
    return np.array(rows), np.array(cols)


def vec(A) -> np.ndarray:
    """Stack the columns of ``A``."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise ValueError("vec expects a 2-d array")
    return A.reshape(-1, order="F").copy()


def unvec(v, d: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (d * d,):
        raise ValueError(f"expected a vector of length {d * d}, got shape {v.shape}")
    return v.reshape((d, d), order="F").copy()


def vech(A) -> np.ndarray:
    """Half-vectorisation of a square matrix (entries on and below the diagonal)."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"vech expects a square matrix, got shape {A.shape}")
    rows, cols = _lower_indices(A.shape[0])
    return A[rows, cols].copy()


def unvech(v, d: int | None = None) -> np.ndarray:
    """Symmetric matrix whose half-vectorisation is ``v``."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise ValueError("unvech expects a 1-d vector")
    if d is None:
        d = dim_from_vech_length(v.size)
    elif v.size != vech_length(d):
        raise ValueError(f"expected length {vech_length(d)} for d={d}, got {v.size}")
    rows, cols = _lower_indices(d)
    A = np.zeros((d, d))
    A[rows, cols] = v
    A[cols, rows] = v
    return A


@lru_cache(maxsize=None)
def _duplication(d: int) -> np.ndarray:
    rows, cols = _lower_indices(d)
    D = np.zeros((d * d, vech_length(d)))
    for k, (i, j) in enumerate(zip(rows, cols)):
        D[i + j * d, k] = 1.0
        D[j + i * d, k] = 1.0
    D.flags.writeable = False
    return D


def duplication_matrix(d: int) -> np.ndarray:
    """The 0/1 matrix ``D_d`` with ``D_d @ vech(A) == vec(A)`` for symmetric ``A``."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return _duplication(d).copy()


@lru_cache(maxsize=None)
def _duplication_pinv(d: int) -> np.ndarray:
    D = _duplication(d)
    # D^T D is diagonal (1 on diagonal entries, 2 off-diagonal), so this is exact
    Dp = np.linalg.solve(D.T @ D, D.T)
    Dp.flags.writeable = False
    return Dp


def duplication_pinv(d: int) -> np.ndarray:
    """Moore-Penrose inverse ``(D^T D)^{-1} D^T`` of the duplication matrix."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return _duplication_pinv(d).copy()


def diagonal_of(A) -> np.ndarray:
    return np.diag(np.asarray(A, dtype=float)).copy()


def vecbd(A) -> np.ndarray:
    """Strictly-below-diagonal entries, column by column (top to bottom)."""
    A = np.asarray(A, dtype=float)
    d = A.shape[0]
    if A.ndim != 2 or A.shape[1] != d:
        raise ValueError("vecbd expects a square matrix")
    if d < 2:
        raise ValueError("vecbd requires dimension >= 2")
    out = [A[i, j] for j in range(d) for i in range(j + 1, d)]
    return np.array(out)


def from_diagonal_and_vecbd(diag, below) -> np.ndarray:
    """Symmetric matrix with the given diagonal and below-diagonal entries."""
    diag = np.asarray(diag, dtype=float)
    d = diag.size
    A = np.diag(diag)
    below = np.asarray(below, dtype=float)
    if below.size != d * (d - 1) // 2:
        raise ValueError("below-diagonal vector has the wrong length")
    k = 0
    for j in range(d):
        for i in range(j + 1, d):
            A[i, j] = A[j, i] = below[k]
            k += 1
    return A


class EigenSolverError(ArithmeticError):
    """Raised when the Jacobi sweeps fail to annihilate the off-diagonal."""


def spectral(A, tol: float = 1e-15, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a small symmetric matrix by cyclic Jacobi rotations.

    Returns
    -------
    U : ndarray (d, d)
        Orthonormal eigenvectors in the columns.
    lam : ndarray (d,)
        Eigenvalues in ascending order, so ``A = U @ diag(lam) @ U.T``.
    """
    A = np.array(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("spectral expects a square matrix")
    if not np.all(np.isfinite(A)):
        raise EigenSolverError("non-finite entries")
    d = A.shape[0]
    A = 0.5 * (A + A.T)
    U = np.eye(d)
    scale = np.linalg.norm(A)
    if d == 1 or scale == 0.0:
        return U, np.diag(A).copy()
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(A, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau)) if tau != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                J = np.eye(d)
                J[p, p] = J[q, q] = c
                J[p, q] = s
                J[q, p] = -s
                A = J.T @ A @ J
                A[p, q] = A[q, p] = 0.0
                U = U @ J
    else:
        raise EigenSolverError("Jacobi iteration did not converge")
    lam = np.diag(A).copy()
    order = np.argsort(lam, kind="stable")
    return U[:, order], lam[order]


def matrix_log(A) -> np.ndarray:
    """Principal logarithm of a symmetric positive definite matrix."""
    U, lam = spectral(A)
    if np.any(lam <= 0):
        raise ValueError("matrix_log requires a positive definite matrix")
    S = (U * np.log(lam)) @ U.T
    return 0.5 * (S + S.T)


def matrix_exp(S) -> np.ndarray:
    """Exponential of a symmetric matrix (always SPD)."""
    U, lam = spectral(S)
    A = (U * np.exp(lam)) @ U.T
    return 0.5 * (A + A.T)


def is_spd(A) -> bool:
    try:
        np.linalg.cholesky(np.asarray(A, dtype=float))
    except np.linalg.LinAlgError:
        return False
    return True
