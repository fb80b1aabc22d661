"""Linear-layer preconditioner for 1D shallow ReLU networks.

The ReLU basis restricted to an interval is mapped onto the piecewise linear
hat basis of its interior nodal points.  In the hat basis the Gram matrix of
the form is tridiagonal, so applying

    P = (R Pbar^{-1} R^T)^{-1},   Pbar = B^T Kphi^{-1} B,   B = B2 B1^{-1}

costs O(n): a closed-form arrow solve for ``B1``, banded products for ``B2``,
one Thomas solve for ``Kphi`` and a 2x2 system that fixes the two boundary
coordinates.

Index conventions.  Neurons are reordered so interior nodes come first in
increasing order, followed by the (at most two) exterior neurons.  Vectors of
length ``n_int + 2`` use the ordering ``(1..n_int, L, R)``; the hat functions
are stored internally in grid order ``(L, 1..n_int, R)`` so ``Kphi`` is
tridiagonal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .forms import H1, L2, BilinearForm
from .linsolve import SingularMatrixError, TridiagonalMatrix, thomas_solve
from .model import BoxDomain, relu
from .quadrature import QuadratureRule

TIE_TOL = 1e-12
TIE_SHIFT = 1e-10
PIVOT_TOL = 1e-14


class NodeAssumptionError(ValueError):
    """The neurons violate the node assumptions (zero neuron or too many exterior nodes)."""


@dataclass(frozen=True, eq=False)
class NodeAnalysis:
    perm: np.ndarray          # sorted position -> original neuron index
    n_interior: int
    nodes: np.ndarray         # interior nodal points, strictly increasing
    slopes: np.ndarray        # omega of the interior neurons (sorted order)
    r_tilde: np.ndarray       # (n - n_int, 2): rows (psi_i(hi), psi_i(lo)) of exterior neurons
    ext_nodes: np.ndarray
    lower: float
    upper: float

    @property
    def n(self) -> int:
        return self.perm.shape[0]

    @property
    def n_exterior(self) -> int:
        return self.n - self.n_interior

    @property
    def grid(self) -> np.ndarray:
        """``lo, x_1, ..., x_{n_int}, hi``."""
        return np.r_[self.lower, self.nodes, self.upper]


def analyze_nodes(omega, b, domain: BoxDomain) -> NodeAnalysis:
    """Sort neurons by nodal point and split them into interior and exterior ones."""
    if domain.d != 1:
        raise ValueError("the preconditioner is defined for one-dimensional problems only")
    w = np.asarray(omega, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    n = w.shape[0]
    if np.any(w == 0.0):
        raise NodeAssumptionError("a neuron has omega_i = 0; adjust parameters first")
    lo, hi = domain.lower[0], domain.upper[0]
    x = -b / w
    # identically zero on the domain: node at/after hi with positive slope or at/before lo with negative
    zero = ((w > 0) & (x >= hi)) | ((w < 0) & (x <= lo))
    if np.any(zero):
        raise NodeAssumptionError(f"neurons {np.flatnonzero(zero).tolist()} vanish on the domain")
    interior = (x > lo) & (x < hi)
    n_int = int(interior.sum())
    if n_int < n - 2:
        raise NodeAssumptionError(
            f"only {n_int} interior nodal points for {n} neurons (need at least n - 2)"
        )
    int_idx = np.flatnonzero(interior)
    ext_idx = np.flatnonzero(~interior)
    int_idx = int_idx[np.argsort(x[int_idx], kind="stable")]
    ext_idx = ext_idx[np.argsort(x[ext_idx], kind="stable")]
    nodes = _separate_ties(x[int_idx], lo, hi)
    order = np.argsort(nodes, kind="stable")
    int_idx, nodes = int_idx[order], nodes[order]

    ext_w, ext_b = w[ext_idx], b[ext_idx]
    r_tilde = np.column_stack([relu(ext_w * hi + ext_b), relu(ext_w * lo + ext_b)])
    return NodeAnalysis(
        perm=np.r_[int_idx, ext_idx].astype(int),
        n_interior=n_int,
        nodes=nodes,
        slopes=w[int_idx],
        r_tilde=r_tilde.reshape(-1, 2),
        ext_nodes=x[ext_idx],
        lower=lo,
        upper=hi,
    )


def _separate_ties(nodes: np.ndarray, lo: float, hi: float) -> np.ndarray:
    nodes = nodes.copy()
    for _ in range(len(nodes) + 1):
        clash = np.flatnonzero(np.diff(nodes) <= TIE_TOL) + 1
        if clash.size == 0:
            return nodes
        for k in clash:
            nodes[k] = min(nodes[k] + TIE_SHIFT * (1 + k), hi - TIE_TOL)
        nodes.sort()
    if np.any(np.diff(nodes) <= 0) or nodes.size and (nodes[0] <= lo or nodes[-1] >= hi):
        raise NodeAssumptionError("could not separate coincident nodal points")
    return nodes


@dataclass(frozen=True, eq=False)
class PreconditionerData:
    nodes: NodeAnalysis
    kind: str
    b1_diag: np.ndarray        # (n_int,)
    b1_left: np.ndarray        # (n_int,) coupling to psi_L
    b1_right: np.ndarray       # (n_int,) coupling to psi_R
    b2: sp.csr_matrix          # (n_int+2)^2, rows phi in (1..n_int, L, R) ordering
    kphi: TridiagonalMatrix    # grid ordering (L, 1..n_int, R)
    pbar_rows: np.ndarray      # (2, n_int+2): rows L, R of Pbar
    pbar_rows_diag: np.ndarray  # same with diag(Kphi) in place of Kphi

    @property
    def n(self) -> int:
        return self.nodes.n

    @property
    def n_interior(self) -> int:
        return self.nodes.n_interior

    # -- orderings ---------------------------------------------------------
    def to_grid(self, v: np.ndarray) -> np.ndarray:
        """``(1..n_int, L, R)`` -> ``(L, 1..n_int, R)``."""
        m = self.n_interior
        return np.r_[v[m], v[:m], v[m + 1]]

    def from_grid(self, v: np.ndarray) -> np.ndarray:
        m = self.n_interior
        return np.r_[v[1 : m + 1], v[0], v[m + 1]]


def _b1_data(nodes: NodeAnalysis):
    w, x = nodes.slopes, nodes.nodes
    lo, hi = nodes.lower, nodes.upper
    neg = w < 0
    diag = np.abs(w)
    left = np.where(neg, w * (hi - x), 0.0)
    right = np.where(neg, -w * (x - lo), 0.0)
    return diag, left, right


def _b2_matrix(nodes: NodeAnalysis) -> sp.csr_matrix:
    """Coefficients of the hat functions in ``(psi_1^+, ..., psi_m^+, psi_L, psi_R)``.

    A continuous piecewise linear ``g`` on ``[lo, hi]`` equals
    ``g(lo) psi_R + (g(lo) + s_0 L) psi_L + sum_j (jump of slope at x_j) psi_j^+``.
    """
    m = nodes.n_interior
    t = nodes.grid
    h = np.diff(t)                      # h[j] = t[j+1] - t[j], j = 0..m
    length = nodes.upper - nodes.lower
    iL, iR = m, m + 1
    rows, cols, vals = [], [], []

    def put(r, c, v):
        rows.append(r)
        cols.append(c)
        vals.append(v)

    # hat k sits at t[k]; slope 1/h[k-1] on its left interval, -1/h[k] on its right one
    for k in range(m + 2):
        r = iL if k == 0 else (iR if k == m + 1 else k - 1)

        def slope(j, k=k):
            if j == k - 1:
                return 1.0 / h[j]
            if j == k and k <= m:
                return -1.0 / h[j]
            return 0.0

        g_lo = 1.0 if k == 0 else 0.0
        if g_lo:
            put(r, iR, g_lo)
        put(r, iL, g_lo + slope(0) * length)
        for j in range(max(1, k - 1), min(m, k + 1) + 1):
            jump = slope(j) - slope(j - 1)
            if jump != 0.0:
                put(r, j - 1, jump)
    return sp.csr_matrix((vals, (rows, cols)), shape=(m + 2, m + 2))


def _kphi_quadrature(nodes: NodeAnalysis, form: BilinearForm, rule: QuadratureRule) -> TridiagonalMatrix:
    t = nodes.grid
    size = t.shape[0]
    x = rule.points[:, 0]
    w = rule.weights
    inside = (x >= t[0]) & (x <= t[-1])
    x, w = x[inside], w[inside]
    # interval (t[j-1], t[j]]: left-limit derivatives at the nodes, matching relu'(0) = 0
    j = np.clip(np.searchsorted(t, x, side="left"), 1, size - 1)
    h = t[j] - t[j - 1]
    lam_l = (t[j] - x) / h
    lam_r = (x - t[j - 1]) / h
    diag = np.bincount(j - 1, w * lam_l * lam_l, size) + np.bincount(j, w * lam_r * lam_r, size)
    off = np.bincount(j - 1, w * lam_l * lam_r, size - 1)
    if form.kind == H1:
        alpha = form.alpha_at(rule.points)[inside]
        wa = w * alpha / (h * h)
        diag += np.bincount(j - 1, wa, size) + np.bincount(j, wa, size)
        off -= np.bincount(j - 1, wa, size - 1)
    return TridiagonalMatrix(off, diag, off.copy())


def _kphi_elementwise(nodes: NodeAnalysis, form: BilinearForm, gauss_points: int = 4) -> TridiagonalMatrix:
    """Hat Gram matrix integrated element by element with Gauss-Legendre.

    Exact for the mass part and for piecewise polynomial ``alpha`` of low degree.
    """
    t = nodes.grid
    h = np.diff(t)
    size = t.shape[0]
    gx, gw = np.polynomial.legendre.leggauss(gauss_points)
    gx = 0.5 * (gx + 1.0)
    gw = 0.5 * gw
    lam_l, lam_r = 1.0 - gx, gx
    diag = np.zeros(size)
    diag[:-1] += h * np.dot(gw, lam_l * lam_l)
    diag[1:] += h * np.dot(gw, lam_r * lam_r)
    off = h * np.dot(gw, lam_l * lam_r)
    if form.kind == H1:
        pts = (t[:-1, None] + h[:, None] * gx[None, :]).reshape(-1, 1)
        alpha = form.alpha_at(pts).reshape(h.shape[0], gauss_points)
        stiff = (alpha @ gw) / h
        diag[:-1] += stiff
        diag[1:] += stiff
        off -= stiff
    return TridiagonalMatrix(off, diag, off.copy())


def build_preconditioner(form: BilinearForm, rule: QuadratureRule, nodes: NodeAnalysis,
                         kphi: str = "exact") -> PreconditionerData:
    """Assemble ``B1``, ``B2``, ``Kphi`` and the two boundary rows of ``Pbar``.

    ``kphi="exact"`` integrates the hat Gram matrix element-wise (Gauss-Legendre);
    ``kphi="quadrature"`` samples the hats at the rule's points, which makes ``P``
    the exact inverse of the quadrature ``K`` up to rounding.
    """
    b1_diag, b1_left, b1_right = _b1_data(nodes)
    if np.any(b1_diag == 0.0):
        raise NodeAssumptionError("B1 has a zero diagonal entry")
    if kphi == "exact":
        kphi_mat = _kphi_elementwise(nodes, form)
    elif kphi == "quadrature":
        kphi_mat = _kphi_quadrature(nodes, form, rule)
    else:
        raise ValueError(f"unknown Kphi assembly {kphi!r}")
    kphi = kphi_mat
    scale = np.max(np.abs(kphi.diag))
    if np.any(kphi.diag <= PIVOT_TOL * scale):
        raise SingularMatrixError("hat Gram matrix has a vanishing diagonal: nodes too close")
    data = PreconditionerData(
        nodes=nodes,
        kind=form.kind,
        b1_diag=b1_diag,
        b1_left=b1_left,
        b1_right=b1_right,
        b2=_b2_matrix(nodes),
        kphi=kphi,
        pbar_rows=np.zeros((2, nodes.n_interior + 2)),
        pbar_rows_diag=np.zeros((2, nodes.n_interior + 2)),
    )
    m = nodes.n_interior
    for r, k in enumerate((m, m + 1)):
        e = np.zeros(m + 2)
        e[k] = 1.0
        data.pbar_rows[r] = apply_pbar(data, e)
        data.pbar_rows_diag[r] = apply_pbar(data, e, diagonal=True)
    return data


def apply_B1(data: PreconditionerData, beta) -> np.ndarray:
    m = data.n_interior
    out = np.array(beta, dtype=float)
    out[:m] = data.b1_diag * out[:m] + data.b1_left * out[m] + data.b1_right * out[m + 1]
    return out


def apply_B1_inverse(data: PreconditionerData, alpha) -> np.ndarray:
    """Solve ``B1 beta = alpha`` using the arrow structure of ``B1``."""
    m = data.n_interior
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (m + 2,):
        raise ValueError(f"expected a vector of length {m + 2}")
    if np.any(data.b1_diag == 0.0):
        raise ValueError("B1 has a zero diagonal entry")
    out = alpha.copy()
    out[:m] = (alpha[:m] - data.b1_left * alpha[m] - data.b1_right * alpha[m + 1]) / data.b1_diag
    return out


def apply_B1_inverse_transpose(data: PreconditionerData, alpha) -> np.ndarray:
    m = data.n_interior
    alpha = np.asarray(alpha, dtype=float)
    out = alpha.copy()
    out[:m] = alpha[:m] / data.b1_diag
    out[m] = alpha[m] - data.b1_left @ out[:m]
    out[m + 1] = alpha[m + 1] - data.b1_right @ out[:m]
    return out


def _kphi_solve(data: PreconditionerData, v: np.ndarray, diagonal: bool) -> np.ndarray:
    g = data.to_grid(v)
    if diagonal:
        sol = g / data.kphi.diag
    else:
        sol = thomas_solve(data.kphi, g, pivot_tol=PIVOT_TOL)
    return data.from_grid(sol)


def apply_pbar(data: PreconditionerData, y, diagonal: bool = False) -> np.ndarray:
    """``Pbar y = B1^{-T} B2^T Kphi^{-1} B2 B1^{-1} y``."""
    v = data.b2 @ apply_B1_inverse(data, y)
    c = _kphi_solve(data, v, diagonal)
    return apply_B1_inverse_transpose(data, data.b2.T @ c)


def _boundary_coordinates(data: PreconditionerData, alpha: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Solve the (at most) 2x2 system for the two boundary coordinates ``gamma``."""
    m = data.n_interior
    s = rows[:, :m] @ alpha[:m]
    Q = rows[:, m:]
    rt = data.nodes.r_tilde
    n_ext = data.n - m
    if n_ext == 2:
        A, rhs = rt, alpha[m:]
    elif n_ext == 1:
        r1, r0 = rt[0]
        # (Pbar y)_L psi(lo) - (Pbar y)_R psi(hi) = 0, written out without division
        A = np.array([[r1, r0], r0 * Q[0] - r1 * Q[1]])
        rhs = np.array([alpha[m], r1 * s[1] - r0 * s[0]])
    else:
        A, rhs = Q, -s
    det = A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]
    scale = np.max(np.abs(A)) ** 2
    if not np.isfinite(det) or abs(det) <= 1e-14 * scale:
        raise NodeAssumptionError("singular boundary system: exterior neurons are dependent")
    return np.array([A[1, 1] * rhs[0] - A[0, 1] * rhs[1], A[0, 0] * rhs[1] - A[1, 0] * rhs[0]]) / det


def _apply(data: PreconditionerData, alpha, diagonal: bool) -> np.ndarray:
    m = data.n_interior
    alpha = np.asarray(alpha, dtype=float)
    if alpha.shape != (data.n,):
        raise ValueError(f"expected a vector of length {data.n}")
    rows = data.pbar_rows_diag if diagonal else data.pbar_rows
    gamma = _boundary_coordinates(data, alpha, rows)
    z = apply_pbar(data, np.r_[alpha[:m], gamma], diagonal)
    beta = np.empty(data.n)
    beta[:m] = z[:m]
    rt = data.nodes.r_tilde
    n_ext = data.n - m
    if n_ext == 2:
        # R~^T beta_ext = z_{L,R}
        det = rt[0, 0] * rt[1, 1] - rt[1, 0] * rt[0, 1]
        beta[m] = (rt[1, 1] * z[m] - rt[1, 0] * z[m + 1]) / det
        beta[m + 1] = (rt[0, 0] * z[m + 1] - rt[0, 1] * z[m]) / det
    elif n_ext == 1:
        beta[m] = (rt[0] @ z[m:]) / (rt[0] @ rt[0])
    return beta


def apply_P(data: PreconditionerData, alpha) -> np.ndarray:
    """``(R Pbar^{-1} R^T)^{-1} alpha`` for ``alpha`` in sorted neuron order."""
    return _apply(data, alpha, diagonal=False)


def apply_Pdiag(data: PreconditionerData, alpha) -> np.ndarray:
    """Variant with ``diag(Kphi)^{-1}``; defined for the L2 form only."""
    if data.kind != L2:
        raise ValueError("the diagonal preconditioner is defined for the L2 form only")
    return _apply(data, alpha, diagonal=True)


def preconditioner_action(data: PreconditionerData, diagonal: bool = False):
    """Wrap :func:`apply_P` (or :func:`apply_Pdiag`) to act in the original neuron order."""
    perm = data.nodes.perm
    op = apply_Pdiag if diagonal else apply_P

    def action(r):
        out = np.empty_like(r, dtype=float)
        out[perm] = op(data, np.asarray(r, dtype=float)[perm])
        return out

    return action


# -- dense references (tests and diagnostics) ---------------------------------

def dense_matrices(data: PreconditionerData) -> dict:
    """Dense ``R``, ``B1``, ``B2``, ``B``, ``Kphi`` (interior hats first, then the two boundary hats) in sorted neuron order."""
    m = data.n_interior
    n = data.n
    R = np.zeros((n, m + 2))
    R[:m, :m] = np.eye(m)
    R[m:, m:] = data.nodes.r_tilde
    B1 = np.eye(m + 2)
    B1[np.arange(m), np.arange(m)] = data.b1_diag
    B1[:m, m] = data.b1_left
    B1[:m, m + 1] = data.b1_right
    B2 = data.b2.toarray()
    order = np.r_[m, np.arange(m), m + 1]      # grid position -> basis index
    Kgrid = data.kphi.todense()
    Kphi = np.empty_like(Kgrid)
    Kphi[np.ix_(order, order)] = Kgrid
    B = B2 @ np.linalg.inv(B1)
    return {"R": R, "B1": B1, "B2": B2, "B": B, "Kphi": Kphi}


def dense_preconditioner(data: PreconditionerData, diagonal: bool = False) -> np.ndarray:
    mats = dense_matrices(data)
    B, R, Kphi = mats["B"], mats["R"], mats["Kphi"]
    Kinv = np.diag(1.0 / np.diag(Kphi)) if diagonal else np.linalg.inv(Kphi)
    Pbar = B.T @ Kinv @ B
    return np.linalg.inv(R @ np.linalg.inv(Pbar) @ R.T)


def hat_functions(nodes: NodeAnalysis, x) -> np.ndarray:
    """Hat basis at points ``x`` in ``(1..n_int, L, R)`` ordering, shape ``(len(x), n_int+2)``."""
    t = nodes.grid
    x = np.asarray(x, dtype=float).reshape(-1)
    m = nodes.n_interior
    out = np.empty((x.shape[0], m + 2))
    eye = np.eye(m + 2)
    order = np.r_[m, np.arange(m), m + 1]
    for g, k in enumerate(order):
        out[:, k] = np.interp(x, t, eye[g])
    return out


def relu_basis(nodes: NodeAnalysis, x, shifted: bool = False) -> np.ndarray:
    """``(psi_1..psi_m, psi_L, psi_R)`` (or the unit-slope ``psi^+`` variant) at ``x``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    lo, hi = nodes.lower, nodes.upper
    if shifted:
        core = relu(x[:, None] - nodes.nodes[None, :])
    else:
        core = relu(nodes.slopes[None, :] * (x[:, None] - nodes.nodes[None, :]))
    return np.column_stack([core, (x - lo) / (hi - lo), (hi - x) / (hi - lo)])
