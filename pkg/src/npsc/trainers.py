"""NPSC epochs, parameter adjustment, learning-rate backtracking and baseline trainers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .forms import (
    DiscreteProblem,
    assemble_system,
    energy,
    energy_gradient,
    neuron_linear_functionals,
)
from .linsolve import BreakdownError, SingularMatrixError, cg, dense_lstsq, pcg
from .model import BoxDomain, NetworkParams
from .neuron import LMConfig, solve_neurons
from .precond import NodeAssumptionError, analyze_nodes, build_preconditioner, preconditioner_action

log = logging.getLogger(__name__)

TAU_MIN = 1e-12
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# stream tags for RngStream keys
_ADJUST = 1
_INIT = 2


class RngStream:
    """Reproducible random substreams keyed by integer tuples.

    ``stream(epoch, i)`` depends only on the master seed and the key, so draws
    do not change with worker count or evaluation order.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, *key: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, *map(int, key)]))

    def spawn(self, *key: int) -> "RngStream":
        """Child stream with a seed derived from ``key``."""
        return RngStream(int(self.stream(*key).integers(2**63)))


@dataclass
class TrainState:
    params: NetworkParams
    tau: float = 1.0
    epoch: int = 0
    energies: list = field(default_factory=list)
    stats: list = field(default_factory=list)
    moments: Optional[tuple] = None     # Adam (m, v)

    def __post_init__(self):
        self.tau = max(float(self.tau), TAU_MIN)


@dataclass(frozen=True)
class BacktrackResult:
    tau: float
    omega: np.ndarray
    b: np.ndarray
    accepted: bool
    halvings: int


# -- Algorithm 2 --------------------------------------------------------------

def _vertex_extrema(omega_i: np.ndarray, vertices: np.ndarray):
    vals = vertices @ omega_i
    return float(vals.max()), float(vals.min())


def adjust_parameters(params: NetworkParams, domain: BoxDomain, rng, epoch: int = 0):
    """Normalize each ``omega_i`` and relocate biases that make neurons vanish or go linear.

    ``rng`` is an :class:`RngStream` (one substream per ``(epoch, i)``) or a
    ``numpy.random.Generator``.  At most ``d + 1`` neurons that are linear on
    the whole domain are kept; later ones are resampled.  Returns the adjusted
    parameters and the number of resampled neurons.
    """
    d = params.d
    verts = domain.vertices()
    omega = np.array(params.omega)
    b = np.array(params.b)
    linear_kept = 0
    resampled = 0
    for i in range(params.n):
        gen = rng.stream(_ADJUST, epoch, i) if isinstance(rng, RngStream) else rng
        norm = np.linalg.norm(omega[i])
        if norm == 0.0:
            direction = gen.standard_normal(d)
            omega[i] = direction / np.linalg.norm(direction)
            hi, lo = _vertex_extrema(omega[i], verts)
            b[i] = gen.uniform(-hi, -lo)
            resampled += 1
            continue
        omega[i] /= norm
        b[i] /= norm
        hi, lo = _vertex_extrema(omega[i], verts)
        if b[i] <= -hi:
            b[i] = gen.uniform(-hi, -lo)
            resampled += 1
        if b[i] >= -lo:
            if linear_kept < d + 1:
                linear_kept += 1
            else:
                b[i] = gen.uniform(-hi, -lo)
                resampled += 1
    return params.replace(omega=omega, b=b), resampled


# -- Algorithm 3 --------------------------------------------------------------

def halving_search(energy_at: Callable[[float], float], e_ref: float, tau_prev: float,
                   tau_min: float = TAU_MIN):
    """Double ``tau_prev`` then halve until ``energy_at(tau) <= e_ref`` or ``tau < tau_min``.

    Returns ``(tau, accepted, halvings)``.
    """
    tau = 2.0 * tau_prev
    halvings = 0
    while True:
        if energy_at(tau) <= e_ref:
            return tau, True, halvings
        tau /= 2.0
        halvings += 1
        if tau < tau_min:
            return tau, False, halvings


def backtrack(problem: DiscreteProblem, a_new, omega_old, b_old, omega_half, b_half,
              tau_prev: float, tau_min: float = TAU_MIN) -> BacktrackResult:
    """Relaxation factor for the nonlinear update ``(1 - tau) old + tau half``."""
    omega_old = np.asarray(omega_old, dtype=float)
    omega_half = np.asarray(omega_half, dtype=float)
    b_old = np.asarray(b_old, dtype=float)
    b_half = np.asarray(b_half, dtype=float)
    base = NetworkParams(a_new, omega_old, b_old)
    e_ref = energy(problem, base)

    def mix(tau):
        return (1.0 - tau) * omega_old + tau * omega_half, (1.0 - tau) * b_old + tau * b_half

    def energy_at(tau):
        om, bb = mix(tau)
        return energy(problem, base.replace(omega=om, b=bb))

    tau, accepted, halvings = halving_search(energy_at, e_ref, tau_prev, tau_min)
    om, bb = mix(tau)
    return BacktrackResult(tau, om, bb, accepted, halvings)


# -- Algorithm 1 --------------------------------------------------------------

@dataclass(frozen=True)
class NPSCOptions:
    precond: str = "full"          # full | diag | none
    kphi: str = "exact"
    adjust: bool = True
    local_solver: str = "lm"       # lm | gd (ablation: Hessian replaced by zero)
    pcg_tol: float = 1e-10
    pcg_atol_rel: float = 1e-14     # rounding floor relative to ||beta|| for warm starts
    lm: LMConfig = LMConfig()
    workers: int = 1


def solve_linear_layer(problem: DiscreteProblem, params: NetworkParams, options: NPSCOptions):
    """Minimize the energy over the outer weights; returns ``(a, stats)``."""
    K, beta = assemble_system(problem, params.omega, params.b)
    n = params.n
    stats = {"pcg_iters": 0, "pcg_converged": True, "precond_fallback": False}
    x0 = params.a
    use_precond = problem.d == 1 and options.precond in ("full", "diag")
    P = None
    if use_precond:
        try:
            data = build_preconditioner(problem.form, problem.rule,
                                        analyze_nodes(params.omega, params.b, problem.form.domain),
                                        kphi=options.kphi)
            P = preconditioner_action(data, diagonal=options.precond == "diag")
        except (NodeAssumptionError, SingularMatrixError) as exc:
            log.debug("preconditioner unavailable (%s); using CG", exc)
            stats["precond_fallback"] = True
    atol = options.pcg_atol_rel * np.linalg.norm(beta)
    try:
        if P is not None:
            a, rep = pcg(K, P, beta, tol=options.pcg_tol, max_iter=10 * n, x0=x0, atol=atol)
        elif use_precond:
            a, rep = cg(K, beta, tol=options.pcg_tol, max_iter=10 * n, x0=x0, atol=atol)
        else:
            # unpreconditioned route for d >= 2: n CG iterations
            a, rep = cg(K, beta, tol=options.pcg_tol, max_iter=n, x0=x0, atol=atol)
        stats["pcg_iters"] = rep.iterations
        stats["pcg_converged"] = rep.converged
    except BreakdownError:
        a = dense_lstsq(K, beta)
        stats["pcg_converged"] = False
        stats["precond_fallback"] = True
    return a, stats


def solve_nonlinear_layer(problem: DiscreteProblem, params: NetworkParams, options: NPSCOptions):
    """Independent single-neuron solves from a snapshot; returns ``(omega_half, b_half, stats)``."""
    omega_half = np.array(params.omega)
    b_half = np.array(params.b)
    live = np.flatnonzero(params.a != 0.0)
    stats = {"lm_iters_total": 0, "lm_flat": 0, "skipped": int(params.n - live.size)}
    if live.size == 0:
        return omega_half, b_half, stats
    value_w, grad_w = neuron_linear_functionals(problem, params, live)
    config = options.lm
    if options.local_solver == "gd":
        config = replace(config, mu0_scale=1.0)
        hess_free = True
    elif options.local_solver == "lm":
        hess_free = False
    else:
        raise ValueError(f"unknown local solver {options.local_solver!r}")
    res = solve_neurons(problem, value_w, grad_w, params.omega[live], params.b[live],
                        config=config, workers=options.workers, gauss_newton=not hess_free)
    d = params.d
    omega_half[live] = res.theta[:, :d]
    b_half[live] = res.theta[:, d]
    stats["lm_iters_total"] = int(res.iterations.sum())
    stats["lm_flat"] = int(res.flat.sum())
    return omega_half, b_half, stats


def npsc_epoch(problem: DiscreteProblem, state: TrainState, options: NPSCOptions = NPSCOptions(),
               rng: Optional[RngStream] = None) -> TrainState:
    """One epoch: adjust, solve the linear layer, solve neurons, relax with backtracking."""
    params = state.params
    stats: dict = {"resamples": 0}
    if options.adjust:
        if rng is None:
            raise ValueError("parameter adjustment needs an RngStream")
        params, stats["resamples"] = adjust_parameters(params, problem.form.domain, rng, state.epoch)
    a_new, lin = solve_linear_layer(problem, params, options)
    stats.update(lin)
    params = params.replace(a=a_new)
    omega_half, b_half, loc = solve_nonlinear_layer(problem, params, options)
    stats.update(loc)
    bt = backtrack(problem, a_new, params.omega, params.b, omega_half, b_half, state.tau)
    stats.update(bt_halvings=bt.halvings, accepted=bt.accepted)
    new_params = params.replace(omega=bt.omega, b=bt.b)
    return _advance(problem, state, new_params, bt.tau, stats)


def _advance(problem, state: TrainState, params: NetworkParams, tau: float, stats: dict,
             moments=None) -> TrainState:
    e = energy(problem, params)
    stats["tau"] = tau
    return TrainState(
        params=params,
        tau=max(tau, TAU_MIN),
        epoch=state.epoch + 1,
        energies=state.energies + [e],
        stats=state.stats + [stats],
        moments=moments if moments is not None else state.moments,
    )


# -- baselines ------------------------------------------------------------------

def _current_energy(problem, state: TrainState) -> float:
    return state.energies[-1] if state.energies else energy(problem, state.params)


def _flat_search(problem, params: NetworkParams, direction: np.ndarray, tau_prev: float, e_ref: float,
                 mask: Optional[np.ndarray] = None):
    theta = params.flatten()
    n, d = params.n, params.d
    step = direction if mask is None else direction * mask

    def candidate(tau):
        return NetworkParams.from_flat(theta - tau * step, n, d)

    tau, accepted, halvings = halving_search(lambda t: energy(problem, candidate(t)), e_ref, tau_prev)
    return candidate(tau), tau, accepted, halvings


def gd_step(problem: DiscreteProblem, state: TrainState) -> TrainState:
    """Full-gradient step on all parameters with a backtracked learning rate."""
    g = energy_gradient(problem, state.params)
    e_ref = _current_energy(problem, state)
    params, tau, accepted, halvings = _flat_search(problem, state.params, g, state.tau, e_ref)
    return _advance(problem, state, params, tau, {"bt_halvings": halvings, "accepted": accepted})


def adam_step(problem: DiscreteProblem, state: TrainState) -> TrainState:
    """Adam direction with its global scale chosen by backtracking; moments update after the search."""
    g = energy_gradient(problem, state.params)
    m, v = state.moments if state.moments is not None else (np.zeros_like(g), np.zeros_like(g))
    m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g
    v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g
    t = state.epoch + 1
    direction = (m / (1.0 - ADAM_BETA1**t)) / (np.sqrt(v / (1.0 - ADAM_BETA2**t)) + ADAM_EPS)
    e_ref = _current_energy(problem, state)
    params, tau, accepted, halvings = _flat_search(problem, state.params, direction, state.tau, e_ref)
    return _advance(problem, state, params, tau, {"bt_halvings": halvings, "accepted": accepted},
                    moments=(m, v))


def lsgd_step(problem: DiscreteProblem, state: TrainState) -> TrainState:
    """Least-squares solve for the outer weights, then a backtracked gradient step on ``(omega, b)``."""
    params = state.params
    K, beta = assemble_system(problem, params.omega, params.b)
    params = params.replace(a=dense_lstsq(K, beta))
    g = energy_gradient(problem, params)
    mask = np.ones_like(g)
    mask[: params.n] = 0.0
    e_ref = energy(problem, params)
    params, tau, accepted, halvings = _flat_search(problem, params, g, state.tau, e_ref, mask=mask)
    return _advance(problem, state, params, tau, {"bt_halvings": halvings, "accepted": accepted})


ALGORITHMS = ("npsc", "gd", "adam", "lsgd", "npsc-noadj", "npsc-nolm")


def train(problem: DiscreteProblem, params: NetworkParams, algorithm: str, epochs: int,
          rng: Optional[RngStream] = None, options: NPSCOptions = NPSCOptions(),
          tau0: float = 1.0, callback: Optional[Callable] = None) -> TrainState:
    """Run ``epochs`` epochs of ``algorithm``; ``callback(state)`` is called after each."""
    if algorithm == "npsc-noadj":
        options = replace(options, adjust=False)
    elif algorithm == "npsc-nolm":
        options = replace(options, local_solver="gd")
    elif algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    # the first backtracking search doubles the stored rate, so seeding tau0 / 2
    # makes tau0 the first trial value
    state = TrainState(params=params, tau=tau0 / 2, energies=[energy(problem, params)])
    for _ in range(epochs):
        if algorithm.startswith("npsc"):
            state = npsc_epoch(problem, state, options, rng)
        elif algorithm == "gd":
            state = gd_step(problem, state)
        elif algorithm == "adam":
            state = adam_step(problem, state)
        else:
            state = lsgd_step(problem, state)
        if callback is not None:
            callback(state)
    return state
