"""Small dense symmetric eigen-solvers (cyclic Jacobi).

Registration only ever needs eigen-decompositions of 3x3 and 4x4 symmetric
matrices, either one at a time (the WLS rotation step) or in large batches
(the sampled rotation bound). Both paths share one compiled Jacobi sweep.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_MAX_SWEEPS = 60


@njit(cache=True)
def _jacobi(a, v):
    # Diagonalizes `a` in place, accumulating rotations into `v`.
    n = a.shape[0]
    total = 0.0
    for i in range(n):
        for j in range(n):
            total += a[i, j] * a[i, j]
    if total == 0.0:
        return
    tiny = 1e-17 * np.sqrt(total)
    for _ in range(_MAX_SWEEPS):
        rotated = False
        for p in range(n):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= tiny:
                    continue
                rotated = True
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta >= 0.0:
                    t = 1.0 / (theta + np.sqrt(theta * theta + 1.0))
                else:
                    t = -1.0 / (-theta + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                a[p, q] = 0.0
                a[q, p] = 0.0
                for k in range(n):
                    vkp = v[k, p]
                    vkq = v[k, q]
                    v[k, p] = c * vkp - s * vkq
                    v[k, q] = s * vkp + c * vkq
        if not rotated:
            return


@njit(cache=True)
def _eigh_one(m):
    n = m.shape[0]
    a = m.copy()
    v = np.eye(n)
    _jacobi(a, v)
    w = np.empty(n)
    for i in range(n):
        w[i] = a[i, i]
    order = np.argsort(w)
    return w[order], v[:, order]


@njit(cache=True)
def _eigvals_batch(ms):
    b, n = ms.shape[0], ms.shape[1]
    out = np.empty((b, n))
    v = np.empty((n, n))
    for i in range(b):
        a = ms[i].copy()
        v[:, :] = 0.0
        _jacobi(a, v)
        for j in range(n):
            out[i, j] = a[j, j]
        out[i].sort()
    return out


def symmetric_eigh(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and unit eigenvectors (columns) of a symmetric matrix."""
    m = np.ascontiguousarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    sym = 0.5 * (m + m.T)
    return _eigh_one(sym)


def symmetric_eigvals_batch(ms: np.ndarray) -> np.ndarray:
    """Ascending eigenvalues for a stack of symmetric matrices, shape (B, n, n) -> (B, n)."""
    ms = np.ascontiguousarray(ms, dtype=np.float64)
    if ms.ndim != 3 or ms.shape[1] != ms.shape[2]:
        raise ValueError(f"expected a (B, n, n) stack, got shape {ms.shape}")
    sym = 0.5 * (ms + np.swapaxes(ms, 1, 2))
    return _eigvals_batch(sym)
