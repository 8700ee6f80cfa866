"""
Dense symmetric linear algebra: cyclic Jacobi eigen-decomposition and a
Cholesky solver.
"""
from __future__ import annotations

import logging

import numpy as np
from scipy.linalg import solve_triangular

from app.errors import AsymmetricMatrixError, NotPositiveDefiniteError

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-9


def _check_symmetric(a: np.ndarray, caller: str) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise AsymmetricMatrixError(f"{caller} needs a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > SYMMETRY_TOL * scale:
        raise AsymmetricMatrixError(f"Matrix is not symmetric within {SYMMETRY_TOL:g}")


def jacobi_eigen(a: np.ndarray, max_sweeps: int = 100, tol: float = 1e-14) -> tuple[np.ndarray, np.ndarray]:
    """
    Eigenvalues (descending) and eigenvectors (as columns) of a symmetric matrix.

    Classic cyclic Jacobi: each rotation annihilates one off-diagonal pair;
    sweeps repeat until the off-diagonal mass is below `tol` relative to the
    matrix norm.
    """
    a = np.array(a, dtype=np.float64)
    _check_symmetric(a, "jacobi_eigen")

    n = a.shape[0]
    v = np.eye(n)
    norm = np.linalg.norm(a)
    for sweep in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta < 0:
                    t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c

                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0

                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        logger.warning(f"jacobi_eigen did not converge in {max_sweeps} sweeps (n={n})")

    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    return values[order], v[:, order]


def cholesky(a: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L @ L.T == a, column by column."""
    a = np.asarray(a, dtype=np.float64)
    _check_symmetric(a, "cholesky")
    n = a.shape[0]
    lower = np.zeros_like(a)
    for j in range(n):
        pivot = a[j, j] - lower[j, :j] @ lower[j, :j]
        if not pivot > 0.0:
            raise NotPositiveDefiniteError(f"Matrix is not positive definite (pivot {pivot:g} at column {j})")
        lower[j, j] = np.sqrt(pivot)
        lower[j + 1:, j] = (a[j + 1:, j] - lower[j + 1:, :j] @ lower[j, :j]) / lower[j, j]
    return lower


def cholesky_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solves a @ x = b for symmetric positive definite `a`."""
    lower = cholesky(a)
    y = solve_triangular(lower, np.asarray(b, dtype=np.float64), lower=True)
    return solve_triangular(lower.T, y, lower=False)
