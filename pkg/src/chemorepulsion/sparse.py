"""Sparse matrix assembly and linear solvers.

Matrices are ``scipy.sparse.csr_matrix`` with sorted, duplicate-free column
indices.  The Krylov solvers are written out here (conjugate gradients for
SPD systems, BiCGStab for the nonsymmetric block systems); sparse LU from
SuperLU is the reference path and the fallback when a Krylov solve fails.
"""
from __future__ import annotations

import logging

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10


class LinearSolveError(RuntimeError):
    """Raised when an iterative solve breaks down or runs out of iterations."""

    def __init__(self, message, residual=np.nan, iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


def coo_to_csr(rows, cols, values, shape):
    """Build a CSR matrix from triplets, summing duplicates.

    Triplets are sorted by (row, column, value) before the duplicate sums are
    formed, so the stored arrays do not depend on the order the triplets
    arrive in (parallel element loops may emit them in any order).
    """
    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    values = np.asarray(values, dtype=float).ravel()
    n_rows, n_cols = shape
    if not (len(rows) == len(cols) == len(values)):
        raise ValueError("rows, cols and values must have equal length")
    bad = (rows < 0) | (rows >= n_rows) | (cols < 0) | (cols >= n_cols)
    if bad.any():
        i = np.flatnonzero(bad)[0]
        raise IndexError(f"triplet ({rows[i]}, {cols[i]}, {values[i]}) out of range for shape {shape}")

    order = np.lexsort((values, cols, rows))
    rows, cols, values = rows[order], cols[order], values[order]
    key = rows * n_cols + cols
    start = np.ones(len(key), dtype=bool)
    start[1:] = key[1:] != key[:-1]
    heads = np.flatnonzero(start)
    summed = np.add.reduceat(values, heads) if len(heads) else values
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.add.at(indptr, rows[heads] + 1, 1)
    np.cumsum(indptr, out=indptr)
    A = sp.csr_matrix((summed, cols[heads], indptr), shape=shape)
    A.has_sorted_indices = True
    return A


class AssemblyPattern:
    """Fixed sparsity pattern for repeated assembly over the same dof layout.

    The sort of the (row, col) pairs is done once; :meth:`matrix` then only
    permutes and sums the new values.  Duplicates are summed in their
    original (element) order, so results are reproducible run to run.
    """

    def __init__(self, rows, cols, shape):
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        self.shape = shape
        key = rows * shape[1] + cols
        self._order = np.argsort(key, kind="stable")
        key = key[self._order]
        start = np.ones(len(key), dtype=bool)
        start[1:] = key[1:] != key[:-1]
        self._heads = np.flatnonzero(start)
        head_rows = rows[self._order][self._heads]
        self._indices = cols[self._order][self._heads]
        self._indptr = np.zeros(shape[0] + 1, dtype=np.int64)
        np.add.at(self._indptr, head_rows + 1, 1)
        np.cumsum(self._indptr, out=self._indptr)

    def matrix(self, values):
        data = np.add.reduceat(np.asarray(values, dtype=float).ravel()[self._order], self._heads)
        A = sp.csr_matrix((data, self._indices.copy(), self._indptr.copy()), shape=self.shape)
        A.has_sorted_indices = True
        return A


def triplets_to_csr(triplets, shape):
    """Convenience wrapper taking an iterable of ``(row, col, value)``."""
    triplets = list(triplets)
    if not triplets:
        return coo_to_csr([], [], [], shape)
    r, c, v = zip(*triplets)
    return coo_to_csr(r, c, v, shape)


def _check_square(A, b):
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"matrix must be square, got {A.shape}")
    if len(b) != A.shape[0]:
        raise ValueError(f"right-hand side has length {len(b)}, expected {A.shape[0]}")


def solve_spd(A, b, tol=DEFAULT_TOL, max_iter=None, x0=None, jacobi=True):
    """Preconditioned conjugate gradients.

    Stops once ``||b - A x|| <= tol * ||b||``.  ``b = 0`` returns zeros
    without iterating.
    """
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    _check_square(A, b)
    n = len(b)
    max_iter = 10 * n if max_iter is None else max_iter
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n)

    inv_diag = 1.0 / A.diagonal() if jacobi else np.ones(n)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    res = np.linalg.norm(r) / bnorm
    for it in range(max_iter):
        if res <= tol:
            return x
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0.0:
            raise LinearSolveError(f"CG breakdown: p^T A p = {pAp:.3e} (matrix not SPD?)", res, it)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        res = np.linalg.norm(r) / bnorm
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    if res <= tol:
        return x
    raise LinearSolveError(f"CG did not converge in {max_iter} iterations (residual {res:.3e})", res, max_iter)


def bicgstab(A, b, tol=DEFAULT_TOL, max_iter=None, x0=None, jacobi=True):
    """Right-preconditioned BiCGStab with the same residual contract as CG."""
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    _check_square(A, b)
    n = len(b)
    max_iter = 10 * n if max_iter is None else max_iter
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n)

    d = A.diagonal()
    inv_diag = np.where(d != 0, 1.0 / np.where(d != 0, d, 1.0), 1.0) if jacobi else np.ones(n)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    r_hat = r.copy()
    rho = alpha = omega = 1.0
    v = np.zeros(n)
    p = np.zeros(n)
    res = np.linalg.norm(r) / bnorm
    tiny = np.finfo(float).tiny
    for it in range(max_iter):
        if res <= tol:
            return x
        rho_new = r_hat @ r
        if abs(rho_new) < tiny:
            raise LinearSolveError("BiCGStab breakdown: rho = 0", res, it)
        beta = (rho_new / rho) * (alpha / omega)
        rho = rho_new
        p = r + beta * (p - omega * v)
        p_hat = inv_diag * p
        v = A @ p_hat
        denom = r_hat @ v
        if abs(denom) < tiny:
            raise LinearSolveError("BiCGStab breakdown: r_hat . v = 0", res, it)
        alpha = rho / denom
        s = r - alpha * v
        if np.linalg.norm(s) / bnorm <= tol:
            x += alpha * p_hat
            return x
        s_hat = inv_diag * s
        t = A @ s_hat
        tt = t @ t
        if tt < tiny:
            raise LinearSolveError("BiCGStab breakdown: t = 0", res, it)
        omega = (t @ s) / tt
        x += alpha * p_hat + omega * s_hat
        r = s - omega * t
        res = np.linalg.norm(r) / bnorm
        if omega == 0.0:
            raise LinearSolveError("BiCGStab breakdown: omega = 0", res, it)
    if res <= tol:
        return x
    raise LinearSolveError(f"BiCGStab did not converge in {max_iter} iterations (residual {res:.3e})",
                           res, max_iter)


def solve_direct(A, b):
    """Sparse LU solve (SuperLU)."""
    A = sp.csc_matrix(A)
    b = np.asarray(b, dtype=float)
    _check_square(A, b)
    return spla.splu(A).solve(b)


def solve_general(A, b, tol=DEFAULT_TOL, max_iter=None, method="bicgstab", fallback=True):
    """Solve a nonsymmetric system.

    ``method`` is ``"bicgstab"`` or ``"direct"``.  With ``fallback`` a failed
    Krylov solve is retried with sparse LU.
    """
    if method == "direct":
        return solve_direct(A, b)
    if method != "bicgstab":
        raise ValueError(f"unknown method {method!r}")
    try:
        return bicgstab(A, b, tol=tol, max_iter=max_iter)
    except LinearSolveError as exc:
        if not fallback:
            raise
        logger.warning("%s; retrying with sparse LU", exc)
        return solve_direct(A, b)


class Factorization:
    """Sparse LU factorization reused across right-hand sides."""

    def __init__(self, A):
        self.shape = A.shape
        self._lu = spla.splu(sp.csc_matrix(A))

    def solve(self, b):
        return self._lu.solve(np.asarray(b, dtype=float))


def relative_residual(A, x, b):
    bnorm = np.linalg.norm(b)
    r = np.linalg.norm(b - A @ x)
    return r / bnorm if bnorm > 0 else r


def write_matrix_market(A, path):
    """Coordinate-format export, 1-based indices, full precision."""
    A = sp.coo_matrix(A)
    order = np.lexsort((A.col, A.row))
    with open(path, "w") as fh:
        fh.write("%%MatrixMarket matrix coordinate real general\n")
        fh.write(f"{A.shape[0]} {A.shape[1]} {A.nnz}\n")
        for i, j, v in zip(A.row[order], A.col[order], A.data[order]):
            fh.write(f"{i + 1} {j + 1} {v:.17g}\n")
