"""Krylov solvers, the Thomas algorithm and small dense helpers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class BreakdownError(np.linalg.LinAlgError):
    """Conjugate gradients met a direction with ``p.Kp <= 0``."""


class SingularMatrixError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class SolveReport:
    iterations: int
    relative_residual: float
    converged: bool


@dataclass(frozen=True)
class TridiagonalMatrix:
    """Bands of an ``m x m`` tridiagonal matrix: ``lower[i] = T[i+1, i]``, ``upper[i] = T[i, i+1]``."""

    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.diag).shape[0]
        if np.asarray(self.lower).shape != (m - 1,) or np.asarray(self.upper).shape != (m - 1,):
            raise ValueError("off-diagonal bands must have length m - 1")

    @property
    def m(self) -> int:
        return self.diag.shape[0]

    def matvec(self, x):
        y = self.diag * x
        y[:-1] += self.upper * x[1:]
        y[1:] += self.lower * x[:-1]
        return y

    def todense(self) -> np.ndarray:
        return np.diag(self.diag) + np.diag(self.upper, 1) + np.diag(self.lower, -1)


def _as_action(K) -> Callable:
    if callable(K):
        return K
    K = np.asarray(K)
    return lambda v: K @ v


def pcg(apply_K, apply_P, rhs, tol: float = 1e-10, max_iter: int = 500000, x0=None,
        atol: float = 0.0):
    """Preconditioned conjugate gradients.

    Stops once ``||K x_k - rhs|| / ||K x_0 - rhs|| < tol`` (recursively updated
    residual) or ``||K x_k - rhs|| <= atol``.  ``atol`` guards warm starts whose
    initial residual is already at rounding level.  Raises
    :class:`BreakdownError` if ``p.Kp <= 0``.
    """
    apply_K = _as_action(apply_K)
    apply_P = _as_action(apply_P)
    rhs = np.asarray(rhs, dtype=float)
    x = np.zeros_like(rhs) if x0 is None else np.array(x0, dtype=float)
    r = rhs - apply_K(x) if x0 is not None else rhs.copy()
    r0 = np.linalg.norm(r)
    if r0 == 0.0 or r0 <= atol:
        return x, SolveReport(0, 0.0 if r0 == 0.0 else 1.0, True)
    z = apply_P(r)
    p = z.copy()
    rz = r @ z
    rel = 1.0
    for it in range(1, max_iter + 1):
        Kp = apply_K(p)
        pKp = p @ Kp
        if not pKp > 0.0:
            raise BreakdownError(f"p.Kp = {pKp:.3e} at iteration {it}: matrix is not SPD")
        step = rz / pKp
        x += step * p
        r -= step * Kp
        rnorm = np.linalg.norm(r)
        rel = rnorm / r0
        if rel < tol or rnorm <= atol:
            return x, SolveReport(it, float(rel), True)
        z = apply_P(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, SolveReport(max_iter, float(rel), False)


def cg(apply_K, rhs, tol: float = 1e-10, max_iter: int = 500000, x0=None, atol: float = 0.0):
    return pcg(apply_K, lambda v: v, rhs, tol=tol, max_iter=max_iter, x0=x0, atol=atol)


def thomas_solve(T: TridiagonalMatrix, rhs, pivot_tol: float = 0.0) -> np.ndarray:
    """Solve ``T x = rhs`` without pivoting in O(m).

    A pivot with ``|pivot| <= pivot_tol * max|diag|`` (or exactly zero) raises
    :class:`SingularMatrixError`.
    """
    d = np.asarray(T.diag, dtype=float)
    lo = np.asarray(T.lower, dtype=float)
    up = np.asarray(T.upper, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    m = d.shape[0]
    thresh = pivot_tol * np.max(np.abs(d))
    c = np.empty(max(m - 1, 0))
    g = np.empty(m)
    piv = d[0]
    if abs(piv) <= thresh or piv == 0.0:
        raise SingularMatrixError("zero pivot in Thomas algorithm at row 0")
    if m > 1:
        c[0] = up[0] / piv
    g[0] = rhs[0] / piv
    for i in range(1, m):
        piv = d[i] - lo[i - 1] * c[i - 1]
        if abs(piv) <= thresh or piv == 0.0:
            raise SingularMatrixError(f"zero pivot in Thomas algorithm at row {i}")
        if i < m - 1:
            c[i] = up[i] / piv
        g[i] = (rhs[i] - lo[i - 1] * g[i - 1]) / piv
    x = np.empty(m)
    x[-1] = g[-1]
    for i in range(m - 2, -1, -1):
        x[i] = g[i] - c[i] * x[i + 1]
    return x


def dense_solve(A, rhs) -> np.ndarray:
    """LU with partial pivoting (LAPACK); supports stacked systems ``(..., m, m)``."""
    A = np.asarray(A, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    try:
        x = np.linalg.solve(A, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(str(exc)) from None
    if not np.all(np.isfinite(x)):
        raise SingularMatrixError("matrix is singular to working precision")
    return x


def dense_lstsq(A, rhs) -> np.ndarray:
    """A least-squares minimizer of ``||A x - rhs||``; never raises on rank deficiency."""
    x, *_ = np.linalg.lstsq(np.asarray(A, dtype=float), np.asarray(rhs, dtype=float), rcond=None)
    return x


def condition_number(K) -> float:
    """Spectral condition number ``lambda_max / lambda_min`` of a symmetric matrix."""
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError("condition_number needs a square matrix")
    scale = np.max(np.abs(K)) if K.size else 0.0
    if np.max(np.abs(K - K.T), initial=0.0) > 1e-12 * max(scale, 1.0):
        raise ValueError("condition_number needs a symmetric matrix")
    lam = np.linalg.eigvalsh(0.5 * (K + K.T))
    return float(lam[-1] / lam[0])
