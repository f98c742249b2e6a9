"""Small dense linear-algebra helpers."""

from __future__ import annotations

import numpy as np

from raregen.errors import ContractError, SingularMatrixError

PIVOT_TOL = 1e-12


def lu_decompose(matrix):
    """LU factorization with partial pivoting, ``matrix = P @ L @ U``.

    ``L`` has a unit diagonal.  Raises :class:`SingularMatrixError` when a
    pivot falls below ``PIVOT_TOL`` in magnitude.
    """
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError("matrix has non-finite entries")
    n = a.shape[0]
    perm = np.arange(n)
    lower = np.eye(n)
    for col in range(n):
        pivot = col + int(np.argmax(np.abs(a[col:, col])))
        if abs(a[pivot, col]) < PIVOT_TOL:
            raise SingularMatrixError(f"matrix is singular (pivot {a[pivot, col]:.3e} in column {col})")
        if pivot != col:
            a[[col, pivot]] = a[[pivot, col]]
            perm[[col, pivot]] = perm[[pivot, col]]
            lower[[col, pivot], :col] = lower[[pivot, col], :col]
        factors = a[col + 1 :, col] / a[col, col]
        lower[col + 1 :, col] = factors
        a[col + 1 :, col:] -= np.outer(factors, a[col, col:])
    p = np.zeros((n, n))
    p[perm, np.arange(n)] = 1.0
    return p, lower, np.triu(a)


def _permutation_sign(perm) -> float:
    perm = list(perm)
    sign = 1.0
    for i in range(len(perm)):
        while perm[i] != i:
            j = perm[i]
            perm[i], perm[j] = perm[j], perm[i]
            sign = -sign
    return sign


def lu_logdet(matrix) -> tuple[float, float]:
    """Return ``(sign, log|det|)`` of a square matrix via pivoted LU."""
    p, _, u = lu_decompose(matrix)
    diag = np.diag(u)
    sign = _permutation_sign(np.argmax(p, axis=0)) * np.prod(np.sign(diag))
    return float(sign), float(np.sum(np.log(np.abs(diag))))


def psd_sqrt(matrix, sym_tol: float = 1e-10, eig_tol: float = 1e-10):
    """Principal square root of a symmetric positive semi-definite matrix.

    Slightly negative eigenvalues (down to ``-eig_tol`` relative to the
    spectral radius) are clamped to zero.
    """
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ContractError(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if np.max(np.abs(a - a.T), initial=0.0) > sym_tol * scale:
        raise ContractError("matrix is not symmetric")
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    if w.size and w.min() < -eig_tol * max(1.0, float(np.abs(w).max())):
        raise ContractError(f"matrix is not positive semi-definite (eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T
