"""Bilinear forms, the discrete energy and the linear-layer system.

Every integral is a weighted sum over the problem's quadrature rule.  The
operator behind ``a(u, v)`` is never formed: wherever an expression of the
form ``int (A u) v`` appears it is evaluated as ``a(u, v)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .model import BoxDomain, NetworkParams, preactivations, relu, relu_prime
from .quadrature import QuadratureRule

L2 = "L2"
H1 = "H1"


class TrivialSubproblemError(ValueError):
    """Raised when the outer weight of a neuron is zero."""


@dataclass(frozen=True)
class BilinearForm:
    """``a(u,v) = int u v`` (L2) or ``int alpha grad u . grad v + u v`` (H1)."""

    kind: str
    domain: BoxDomain
    alpha: Optional[Callable] = None

    def __post_init__(self):
        if self.kind not in (L2, H1):
            raise ValueError(f"unknown form kind {self.kind!r}")
        if self.kind == H1 and self.alpha is None:
            object.__setattr__(self, "alpha", lambda x: np.ones(x.shape[0]))

    def alpha_at(self, points: np.ndarray) -> Optional[np.ndarray]:
        if self.kind == L2:
            return None
        vals = np.asarray(self.alpha(points), dtype=float)
        return np.broadcast_to(vals, (points.shape[0],)).copy()


@dataclass(frozen=True, eq=False)
class DiscreteProblem:
    """Form, source term and quadrature, with ``f`` and ``alpha`` sampled once."""

    form: BilinearForm
    f: Callable
    rule: QuadratureRule
    f_vals: np.ndarray = field(init=False, repr=False)
    alpha_vals: Optional[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        if self.rule.d != self.form.domain.d:
            raise ValueError("quadrature dimension does not match the domain")
        pts = self.rule.points
        f_vals = np.broadcast_to(np.asarray(self.f(pts), dtype=float), (pts.shape[0],)).copy()
        f_vals.setflags(write=False)
        alpha = self.form.alpha_at(pts)
        if alpha is not None:
            if np.any(alpha <= 0):
                raise ValueError("alpha must be bounded below by a positive constant")
            alpha.setflags(write=False)
        object.__setattr__(self, "f_vals", f_vals)
        object.__setattr__(self, "alpha_vals", alpha)

    @property
    def kind(self) -> str:
        return self.form.kind

    @property
    def d(self) -> int:
        return self.rule.d

    @property
    def points(self) -> np.ndarray:
        return self.rule.points

    @property
    def weights(self) -> np.ndarray:
        return self.rule.weights


def form_apply(form: BilinearForm, rule: QuadratureRule, u_vals, u_grads, v_vals, v_grads,
               alpha_vals=None) -> float:
    """Quadrature value of ``a(u, v)`` from samples at the rule's points.

    Gradients have shape ``(N, d)`` and are ignored for the L2 form.
    """
    w = rule.weights
    u_vals = np.asarray(u_vals, dtype=float)
    v_vals = np.asarray(v_vals, dtype=float)
    if u_vals.shape != w.shape or v_vals.shape != w.shape:
        raise ValueError("value samples must have one entry per quadrature point")
    total = np.dot(w, u_vals * v_vals)
    if form.kind == H1:
        ug = np.asarray(u_grads, dtype=float).reshape(w.shape[0], -1)
        vg = np.asarray(v_grads, dtype=float).reshape(w.shape[0], -1)
        if ug.shape != vg.shape or ug.shape[1] != rule.d:
            raise ValueError("gradient samples must have shape (N, d)")
        if alpha_vals is None:
            alpha_vals = form.alpha_at(rule.points)
        total += np.dot(w * alpha_vals, np.sum(ug * vg, axis=1))
    return float(total)


def _network_samples(problem: DiscreteProblem, params: NetworkParams):
    z = preactivations(params.omega, params.b, problem.points)
    u = relu(z) @ params.a
    s = relu_prime(z)
    grad_u = (s * params.a) @ params.omega if problem.kind == H1 else None
    return z, s, u, grad_u


def energy(problem: DiscreteProblem, params: NetworkParams) -> float:
    """``E = a(u,u)/2 - int f u`` for ``u = u(.; params)``."""
    if params.d != problem.d:
        raise ValueError("parameter dimension does not match the problem")
    z = preactivations(params.omega, params.b, problem.points)
    u = relu(z) @ params.a
    w = problem.weights
    e = 0.5 * np.dot(w, u * u) - np.dot(w, problem.f_vals * u)
    if problem.kind == H1:
        grad_u = (relu_prime(z) * params.a) @ params.omega
        e += 0.5 * np.dot(w * problem.alpha_vals, np.sum(grad_u * grad_u, axis=1))
    return float(e)


def energy_gradient(problem: DiscreteProblem, params: NetworkParams) -> np.ndarray:
    """Gradient of :func:`energy` in the flat ``a | omega | b`` layout.

    Terms carrying the second derivative of ReLU (Dirac masses) are dropped.
    """
    z, s, u, grad_u = _network_samples(problem, params)
    w = problem.weights
    x = problem.points
    psi = relu(z)
    r = w * (u - problem.f_vals)
    g_a = psi.T @ r
    rs = s * r[:, None]
    g_omega = (rs.T @ x) * params.a[:, None]
    g_b = rs.sum(axis=0) * params.a
    if problem.kind == H1:
        gw = (w * problem.alpha_vals)[:, None] * grad_u
        sg = s.T @ gw
        g_a += np.sum(sg * params.omega, axis=1)
        g_omega += sg * params.a[:, None]
    return np.concatenate([g_a, g_omega.reshape(-1), g_b])


def neuron_samples(problem: DiscreteProblem, omega: np.ndarray, b: np.ndarray):
    """ReLU values ``(N, n)`` and their slopes ``omega_i relu'`` as ``(N, n, d)`` (H1 only)."""
    omega = np.asarray(omega, dtype=float).reshape(len(b), -1)
    z = preactivations(omega, np.asarray(b, dtype=float), problem.points)
    psi = relu(z)
    if problem.kind == L2:
        return psi, None
    s = relu_prime(z)
    return psi, s[:, :, None] * omega[None, :, :]


def assemble_system(problem: DiscreteProblem, omega, b):
    """Gram matrix ``K_ij = a(psi_j, psi_i)`` and load ``beta_i = int f psi_i``."""
    psi, dpsi = neuron_samples(problem, omega, b)
    w = problem.weights
    wpsi = psi * w[:, None]
    K = wpsi.T @ psi
    if dpsi is not None:
        wa = (w * problem.alpha_vals)[:, None]
        for k in range(problem.d):
            K += (dpsi[:, :, k] * wa).T @ dpsi[:, :, k]
    K = 0.5 * (K + K.T)
    beta = wpsi.T @ problem.f_vals
    return K, beta


@dataclass(frozen=True)
class LinearFunctional:
    """Weights such that ``int F psi = sum_q value_w[q] psi(x_q) + sum_q grad_w[q] . grad psi(x_q)``."""

    value_w: np.ndarray
    grad_w: Optional[np.ndarray] = None

    def apply(self, vals, grads=None) -> float:
        out = float(np.dot(self.value_w, vals))
        if self.grad_w is not None:
            out += float(np.sum(self.grad_w * np.asarray(grads).reshape(self.grad_w.shape)))
        return out


def neuron_linear_functionals(problem: DiscreteProblem, params: NetworkParams, indices=None):
    """Batched form of :func:`neuron_linear_functional`.

    Returns ``value_w`` of shape ``(m, N)`` and ``grad_w`` of shape ``(m, N, d)``
    (``None`` for L2) for the neurons in ``indices``; every selected ``a_i`` must
    be nonzero.
    """
    idx = np.arange(params.n) if indices is None else np.asarray(indices, dtype=int)
    a_sel = params.a[idx]
    if np.any(a_sel == 0.0):
        raise TrivialSubproblemError("a_i = 0: the neuron subproblem is trivial")
    z = preactivations(params.omega, params.b, problem.points)
    psi = relu(z)
    u = psi @ params.a
    w = problem.weights
    # residual of f against the other neurons: f - u + a_i psi_i
    rest = (problem.f_vals - u)[None, :] + a_sel[:, None] * psi[:, idx].T
    value_w = w[None, :] * rest / a_sel[:, None]
    grad_w = None
    if problem.kind == H1:
        s = relu_prime(z)
        grad_u = (s * params.a) @ params.omega
        own = s[:, idx].T[:, :, None] * (a_sel[:, None] * params.omega[idx])[:, None, :]
        other_grad = grad_u[None, :, :] - own
        wa = (w * problem.alpha_vals)[None, :, None]
        grad_w = -wa * other_grad / a_sel[:, None, None]
    return value_w, grad_w


def neuron_linear_functional(problem: DiscreteProblem, params: NetworkParams, i: int) -> LinearFunctional:
    """Data for ``psi -> int F psi`` with ``F = (f - A sum_{j != i} a_j psi_j) / a_i``.

    Computed as ``(1/a_i) [int f psi - a(sum_{j != i} a_j psi_j, psi)]``.
    """
    value_w, grad_w = neuron_linear_functionals(problem, params, [i])
    return LinearFunctional(value_w[0], None if grad_w is None else grad_w[0])
