"""Single-neuron subproblems and their Levenberg-Marquardt solver.

For a fixed neuron ``psi = relu(omega . x + b)`` the local energy is

    E_i(omega, b) = a(psi, psi) / 2 - int F psi

where ``int F psi`` is supplied as quadrature weights by
:func:`npsc.forms.neuron_linear_functionals`.  For a fixed activation pattern
``E_i`` is quadratic in ``(omega, b)`` and the Gauss-Newton matrix below is its
exact Hessian; Dirac terms from differentiating ``relu'`` are dropped.

All routines work on a batch of ``m`` independent neurons at once.  Each row
is computed with elementwise operations and per-row reductions only, so a
neuron's result does not depend on which other neurons share its batch.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .forms import H1, DiscreteProblem, LinearFunctional
from .linsolve import dense_solve


@dataclass(frozen=True)
class LMConfig:
    tol: float = 1e-10
    max_iter: int = 200
    mu0_scale: float = 1e-3
    nu: float = 2.0
    mu_max: float = 1e16

    def __post_init__(self):
        if self.tol <= 0 or self.mu0_scale <= 0 or self.nu <= 1 or self.max_iter < 0:
            raise ValueError("invalid Levenberg-Marquardt configuration")


@dataclass(frozen=True, eq=False)
class NeuronProblem:
    """Local problem of one neuron: the global problem plus ``int F psi`` weights."""

    problem: DiscreteProblem
    functional: LinearFunctional
    omega0: np.ndarray
    b0: float

    def __post_init__(self):
        if self.functional.value_w.shape != self.problem.weights.shape:
            raise ValueError("functional weights must match the quadrature size")
        object.__setattr__(self, "omega0", np.asarray(self.omega0, dtype=float).reshape(-1))
        object.__setattr__(self, "b0", float(self.b0))


@dataclass(frozen=True)
class LMResult:
    omega: np.ndarray
    b: float
    energy: float
    iterations: int
    converged: bool
    flat: bool
    initial_energy: float
    history: tuple = ()


@dataclass(frozen=True)
class _BatchResult:
    theta: np.ndarray
    energy: np.ndarray
    initial_energy: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    flat: np.ndarray


def _rowdot(A, v):
    """Per-row ``A @ v`` computed independently of the other rows."""
    return np.einsum("ij,j->i", A, v)


def _evaluate(problem: DiscreteProblem, value_w, grad_w, theta):
    """Energy, gradient and Gauss-Newton matrix for a batch ``theta`` of shape ``(m, d+1)``.

    Also returns the number of active quadrature points per neuron.
    """
    x = problem.points
    w = problem.weights
    d = x.shape[1]
    m = theta.shape[0]
    z = np.multiply.outer(theta[:, d], np.ones_like(w))
    for k in range(d):
        z += np.multiply.outer(theta[:, k], x[:, k])
    s = z > 0.0
    psi = np.where(s, z, 0.0)
    active = np.count_nonzero(s, axis=1)
    ws = np.where(s, w, 0.0)
    wpsi = psi * w
    vs = np.where(s, value_w, 0.0)
    energy = np.einsum("ij,ij->i", psi, 0.5 * wpsi - value_w)
    t = wpsi - vs
    grad = np.empty((m, d + 1))
    hess = np.empty((m, d + 1, d + 1))
    grad[:, d] = t.sum(axis=1)
    hess[:, d, d] = ws.sum(axis=1)
    for k in range(d):
        xk = x[:, k]
        grad[:, k] = _rowdot(t, xk)
        hess[:, k, d] = hess[:, d, k] = _rowdot(ws, xk)
        for l in range(k + 1):
            hess[:, k, l] = hess[:, l, k] = _rowdot(ws, xk * x[:, l])
    if problem.kind == H1:
        omega = theta[:, :d]
        stiff = _rowdot(ws, problem.alpha_vals)
        cg = np.stack([np.where(s, grad_w[:, :, k], 0.0).sum(axis=1) for k in range(d)], axis=1)
        energy += 0.5 * stiff * np.sum(omega * omega, axis=1) - np.sum(cg * omega, axis=1)
        grad[:, :d] += stiff[:, None] * omega - cg
        idx = np.arange(d)
        hess[:, idx, idx] += stiff[:, None]
    return energy, grad, hess, active


def local_terms(nproblem: NeuronProblem, omega, b):
    f = nproblem.functional
    grad_w = None if f.grad_w is None else f.grad_w[None]
    theta = np.r_[np.asarray(omega, dtype=float).reshape(-1), float(b)][None, :]
    e, g, h, _ = _evaluate(nproblem.problem, f.value_w[None], grad_w, theta)
    return float(e[0]), g[0], h[0]


def local_energy(nproblem: NeuronProblem, omega, b) -> float:
    return local_terms(nproblem, omega, b)[0]


def local_gradient(nproblem: NeuronProblem, omega, b) -> np.ndarray:
    """Gradient in ``(omega_1..omega_d, b)`` order."""
    return local_terms(nproblem, omega, b)[1]


def gauss_newton_hessian(nproblem: NeuronProblem, omega, b) -> np.ndarray:
    return local_terms(nproblem, omega, b)[2]


def _lm_batch(problem: DiscreteProblem, value_w, grad_w, theta0, config: LMConfig,
              history: Optional[list] = None, gauss_newton: bool = True) -> _BatchResult:
    m, p = theta0.shape
    theta = theta0.copy()
    energy, grad, hess, active = _evaluate(problem, value_w, grad_w, theta)
    e0 = energy.copy()
    iters = np.zeros(m, dtype=int)
    converged = np.zeros(m, dtype=bool)
    flat = active == 0
    done = flat | ~np.any(grad != 0.0, axis=1)
    converged |= done & ~flat
    mu = config.mu0_scale * np.trace(hess, axis1=1, axis2=2) / p
    mu[mu <= 0] = config.mu0_scale
    eye = np.eye(p)
    if history is not None:
        history.append(energy.copy())
    for _ in range(config.max_iter):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        iters[act] += 1
        # without the Gauss-Newton term the step is plain gradient descent of length 1/mu
        h_act = hess[act] if gauss_newton else np.zeros_like(hess[act])
        step = dense_solve(h_act + mu[act, None, None] * eye, -grad[act])
        trial = theta[act] + step
        gw = None if grad_w is None else grad_w[act]
        e_t, g_t, h_t, a_t = _evaluate(problem, value_w[act], gw, trial)
        e_old = energy[act]
        accept = e_t <= e_old
        tiny = np.abs(e_t) < 1e-300
        change = np.abs(e_old - e_t)
        with np.errstate(divide="ignore", invalid="ignore"):
            small = np.where(tiny, change < 1e-16, change / np.abs(e_t) < config.tol)

        acc = act[accept]
        theta[acc] = trial[accept]
        energy[acc] = e_t[accept]
        grad[acc] = g_t[accept]
        hess[acc] = h_t[accept]
        mu[acc] /= config.nu
        rej = act[~accept]
        mu[rej] *= config.nu

        # converged: relative energy change of the trial step below tolerance
        # (a rejected step that small means no further decrease is available)
        converged[act[small]] = True
        now_flat = accept & (a_t == 0)
        flat[act[now_flat]] = True
        done[act[small | now_flat]] = True
        done[rej[mu[rej] > config.mu_max]] = True
        if history is not None:
            history.append(energy.copy())
    return _BatchResult(theta, energy, e0, iters, converged & ~flat, flat)


def solve_neurons(problem: DiscreteProblem, value_w, grad_w, omega0, b0,
                  config: LMConfig = LMConfig(), workers: int = 1,
                  gauss_newton: bool = True) -> _BatchResult:
    """Run Levenberg-Marquardt on ``m`` independent neurons.

    ``workers > 1`` splits the batch across threads; results are identical
    for any worker count.
    """
    theta0 = np.column_stack([np.asarray(omega0, dtype=float).reshape(len(b0), -1), b0])
    m = theta0.shape[0]
    if workers <= 1 or m <= 1:
        return _lm_batch(problem, value_w, grad_w, theta0, config, gauss_newton=gauss_newton)
    chunks = np.array_split(np.arange(m), min(workers, m))

    def run(idx):
        gw = None if grad_w is None else grad_w[idx]
        return _lm_batch(problem, value_w[idx], gw, theta0[idx], config, gauss_newton=gauss_newton)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(run, chunks))
    return _BatchResult(*(np.concatenate([getattr(r, f) for r in parts])
                          for f in ("theta", "energy", "initial_energy", "iterations",
                                    "converged", "flat")))


def levenberg_marquardt(nproblem: NeuronProblem, config: LMConfig = LMConfig()) -> LMResult:
    """Minimize the local energy from ``(omega0, b0)``.

    Steps solve ``(H + mu I) delta = -grad``; a step is kept when it does not
    increase the energy (``mu /= nu``) and rejected otherwise (``mu *= nu``).
    Iteration stops when the relative energy change drops below ``config.tol``,
    after ``max_iter`` steps, when ``mu`` exceeds ``mu_max``, or when the neuron
    is inactive at every quadrature point (flagged ``flat``).
    """
    f = nproblem.functional
    grad_w = None if f.grad_w is None else f.grad_w[None]
    hist: list = []
    res = _lm_batch(nproblem.problem, f.value_w[None], grad_w,
                    np.r_[nproblem.omega0, nproblem.b0][None, :], config, history=hist)
    d = nproblem.omega0.shape[0]
    return LMResult(
        omega=res.theta[0, :d].copy(),
        b=float(res.theta[0, d]),
        energy=float(res.energy[0]),
        iterations=int(res.iterations[0]),
        converged=bool(res.converged[0]),
        flat=bool(res.flat[0]),
        initial_energy=float(res.initial_energy[0]),
        history=tuple(float(h[0]) for h in hist),
    )
