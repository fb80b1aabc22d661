"""Benchmark problems, initialization, metrics and experiment drivers."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .forms import H1, L2, BilinearForm, DiscreteProblem, assemble_system, energy
from .linsolve import cg, condition_number, pcg
from .model import BoxDomain, NetworkParams, evaluate
from .neuron import LMConfig
from .precond import analyze_nodes, build_preconditioner, preconditioner_action
from .quadrature import halton_rule, trapezoid_rule
from .trainers import ALGORITHMS, NPSCOptions, RngStream, TrainState, train

PI = np.pi
PROBLEM_IDS = ("illcond", "ex1", "ex2", "ex3", "ex4", "ex5", "ex6")
CSV_COLUMNS = ("epoch", "energy", "rel_energy_err", "l2_err", "tau", "pcg_iters",
               "lm_iters_total", "bt_halvings", "wall_ms")


@dataclass(frozen=True, eq=False)
class Benchmark:
    name: str
    problem: DiscreteProblem
    exact: Callable
    exact_grad: Optional[Callable]
    e_star: float


def _oscillatory(x):
    x = x[:, 0]
    return np.where(x < 0.5,
                    10 * (np.sin(2 * PI * x) + np.sin(6 * PI * x)),
                    10 * (np.sin(8 * PI * x) + np.sin(18 * PI * x) + np.sin(26 * PI * x)))


def _sine(x):
    return np.sin(2 * PI * x[:, 0])


def _ex3_u(x):
    return np.cos(3 * PI * x[:, 0]) + np.cos(11 * PI * x[:, 0])


def _ex3_du(x):
    x = x[:, 0]
    return (-3 * PI * np.sin(3 * PI * x) - 11 * PI * np.sin(11 * PI * x))[:, None]


def _ex3_f(x):
    x = x[:, 0]
    return (1 + 9 * PI**2) * np.cos(3 * PI * x) + (1 + 121 * PI**2) * np.cos(11 * PI * x)


def _ex4_u(x):
    return np.cos(PI * x[:, 0]) * np.cos(PI * x[:, 1])


def _ex4_du(x):
    c1, c2 = np.cos(PI * x[:, 0]), np.cos(PI * x[:, 1])
    s1, s2 = np.sin(PI * x[:, 0]), np.sin(PI * x[:, 1])
    return np.column_stack([-PI * s1 * c2, -PI * c1 * s2])


def _ex4_f(x):
    return (1 + 2 * PI**2) * _ex4_u(x)


def _alpha_osc(x):
    return np.sin(6 * PI * x[:, 0]) + 2.0


def _ex5_u(x):
    return np.cos(12 * PI * x[:, 0]) + np.cos(16 * PI * x[:, 0])


def _ex5_du(x):
    x = x[:, 0]
    return (-12 * PI * np.sin(12 * PI * x) - 16 * PI * np.sin(16 * PI * x))[:, None]


def _ex5_f(x):
    # -(alpha u')' + u = -alpha u'' - alpha' u' + u
    t = x[:, 0]
    d2u = -144 * PI**2 * np.cos(12 * PI * t) - 256 * PI**2 * np.cos(16 * PI * t)
    dalpha = 6 * PI * np.cos(6 * PI * t)
    return -_alpha_osc(x) * d2u - dalpha * _ex5_du(x)[:, 0] + _ex5_u(x)


def _ex6_f(x):
    # -div(alpha grad u) + u with alpha depending on x1 only
    x1, x2 = x[:, 0], x[:, 1]
    return ((2 * PI**2 * _alpha_osc(x) + 1) * _ex4_u(x)
            + 6 * PI**2 * np.cos(6 * PI * x1) * np.sin(PI * x1) * np.cos(PI * x2))


def default_quad_points(pid: str, n: Optional[int] = None) -> int:
    if pid == "ex6" and n is not None and n >= 256:
        return 20000
    return 10000


def make_problem(pid: str, N: Optional[int] = None, n: Optional[int] = None) -> Benchmark:
    """Benchmark ``pid`` with its quadrature, exact solution and reference energy ``E*``."""
    if pid not in PROBLEM_IDS:
        raise ValueError(f"unknown problem {pid!r}; choose from {', '.join(PROBLEM_IDS)}")
    N = default_quad_points(pid, n) if N is None else int(N)
    if pid in ("ex4", "ex6"):
        domain, rule = BoxDomain.unit(2), halton_rule(N, 2)
    else:
        domain, rule = BoxDomain.unit(1), trapezoid_rule(N)
    if pid in ("illcond", "ex1", "ex2"):
        f = _sine if pid == "ex1" else _oscillatory
        form, exact, exact_grad = BilinearForm(L2, domain), f, None
    elif pid == "ex3":
        form, f, exact, exact_grad = BilinearForm(H1, domain), _ex3_f, _ex3_u, _ex3_du
    elif pid == "ex4":
        form, f, exact, exact_grad = BilinearForm(H1, domain), _ex4_f, _ex4_u, _ex4_du
    elif pid == "ex5":
        form, f, exact, exact_grad = BilinearForm(H1, domain, _alpha_osc), _ex5_f, _ex5_u, _ex5_du
    else:
        form, f, exact, exact_grad = BilinearForm(H1, domain, _alpha_osc), _ex6_f, _ex4_u, _ex4_du
    problem = DiscreteProblem(form, f, rule)
    w = rule.weights
    u = exact(rule.points)
    e_star = 0.5 * np.dot(w, u * u) - np.dot(w, problem.f_vals * u)
    if form.kind == H1:
        du = exact_grad(rule.points)
        e_star += 0.5 * np.dot(w * problem.alpha_vals, np.sum(du * du, axis=1))
    return Benchmark(pid, problem, exact, exact_grad, float(e_star))


def he_initialize(n: int, d: int, rng: np.random.Generator) -> NetworkParams:
    """He initialization: ``a ~ N(0, 2/n)``, ``omega, b ~ N(0, 2/d)``."""
    a = rng.normal(0.0, np.sqrt(2.0 / n), n)
    omega = rng.normal(0.0, np.sqrt(2.0 / d), (n, d))
    b = rng.normal(0.0, np.sqrt(2.0 / d), n)
    return NetworkParams(a, omega, b)


def l2_error(problem: DiscreteProblem, params: NetworkParams, exact: Callable) -> float:
    diff = evaluate(params, problem.points) - exact(problem.points)
    return float(np.sqrt(np.dot(problem.weights, diff * diff)))


# -- training runs ----------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    problem: str = "ex1"
    algo: str = "npsc"
    neurons: int = 32
    epochs: int = 1000
    seeds: int = 1
    master_seed: int = 0
    quad_points: Optional[int] = None
    precond: str = "full"
    out: Optional[str] = None
    workers: int = 1
    timing: bool = False

    def __post_init__(self):
        if self.problem not in PROBLEM_IDS or self.problem == "illcond":
            raise ValueError(f"run needs a training problem, got {self.problem!r}")
        if self.algo not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algo!r}")
        if self.precond not in ("full", "diag", "none"):
            raise ValueError(f"unknown preconditioner {self.precond!r}")
        if self.precond == "diag" and self.problem not in ("ex1", "ex2"):
            raise ValueError("precond=diag is defined for the L2 problems (ex1, ex2) only")
        if self.neurons < 1 or self.epochs < 1 or self.seeds < 1:
            raise ValueError("neurons, epochs and seeds must be positive")
        if self.quad_points is not None and self.quad_points < 2:
            raise ValueError("quad_points must be at least 2")


@dataclass
class RunRecord:
    seed: int
    rows: list = field(default_factory=list)
    accepted_false: int = 0

    @property
    def final(self) -> dict:
        return self.rows[-1]


def run_seed(config: ExperimentConfig, bench: Benchmark, seed: int) -> RunRecord:
    stream = RngStream(config.master_seed).spawn(seed)
    params = he_initialize(config.neurons, bench.problem.d, stream.stream(0))
    options = NPSCOptions(precond=config.precond, workers=config.workers, lm=LMConfig())
    record = RunRecord(seed)
    clock = [time.perf_counter()]

    def on_epoch(state: TrainState):
        st = state.stats[-1]
        e = state.energies[-1]
        now = time.perf_counter()
        record.rows.append({
            "epoch": state.epoch,
            "energy": e,
            "rel_energy_err": (e - bench.e_star) / abs(bench.e_star),
            "l2_err": l2_error(bench.problem, state.params, bench.exact),
            "tau": st.get("tau", state.tau),
            "pcg_iters": st.get("pcg_iters", 0),
            "lm_iters_total": st.get("lm_iters_total", 0),
            "bt_halvings": st.get("bt_halvings", 0),
            "wall_ms": round(1000.0 * (now - clock[0]), 3) if config.timing else 0,
        })
        record.accepted_false += int(not st.get("accepted", True))
        clock[0] = now

    train(bench.problem, params, config.algo, config.epochs, rng=stream.spawn(1),
          options=options, callback=on_epoch)
    return record


def aggregate(records: list) -> list:
    """Per-epoch mean and median of the relative energy error and L2 error across seeds."""
    rows = []
    for k in range(len(records[0].rows)):
        rel = np.array([r.rows[k]["rel_energy_err"] for r in records])
        l2 = np.array([r.rows[k]["l2_err"] for r in records])
        rows.append({"epoch": records[0].rows[k]["epoch"],
                     "rel_energy_err_mean": float(rel.mean()),
                     "rel_energy_err_median": float(np.median(rel)),
                     "l2_err_mean": float(l2.mean()),
                     "l2_err_median": float(np.median(l2))})
    return rows


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path, rows: list, columns) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_fmt(row[c]) for c in columns])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return path


def _stem(out) -> Path:
    out = Path(out)
    return out.with_suffix("") if out.suffix == ".csv" else out


def run(config: ExperimentConfig):
    """Train every seed, write per-seed CSVs and the ``_mean`` aggregate; returns ``(records, aggregate)``."""
    bench = make_problem(config.problem, config.quad_points, config.neurons)
    records = [run_seed(config, bench, k) for k in range(config.seeds)]
    agg = aggregate(records)
    if config.out is not None:
        stem = _stem(config.out)
        for rec in records:
            write_csv(f"{stem}_seed{rec.seed}.csv", rec.rows, CSV_COLUMNS)
        write_csv(f"{stem}_mean.csv", agg, tuple(agg[0]))
    return records, agg


# -- linear-layer demonstrations ------------------------------------------------------

def _fixed_nodes(n: int, shift: str):
    omega = np.ones((n, 1))
    i = np.arange(1, n + 1)
    b = -(i - 1) / n if shift == "illcond" else -i / (n + 1)
    return omega, b


def illcond_demo(n: int, iters: int, N: int = 10000):
    """GD and Adam with the optimal fixed rate on the fixed-node a-problem.

    Returns a dict with the per-iteration relative errors of both methods and ``kappa``.
    """
    if n > 256:
        raise ValueError("illcond_demo needs n <= 256 (dense eigensolve)")
    problem = make_problem("illcond", N).problem
    M, beta = assemble_system(problem, *_fixed_nodes(n, "illcond"))
    lam = np.linalg.eigvalsh(M)
    tau = 2.0 / (lam[0] + lam[-1])
    a_star = np.linalg.solve(M, beta)
    e_star = -0.5 * beta @ a_star

    def rel(a):
        return (0.5 * a @ M @ a - beta @ a - e_star) / abs(e_star)

    gd = np.empty(iters)
    adam = np.empty(iters)
    a = np.zeros(n)
    for k in range(iters):
        a = a - tau * (M @ a - beta)
        gd[k] = rel(a)
    a = np.zeros(n)
    m = np.zeros(n)
    v = np.zeros(n)
    for k in range(iters):
        g = M @ a - beta
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        a = a - tau * (m / (1 - 0.9 ** (k + 1))) / (np.sqrt(v / (1 - 0.999 ** (k + 1))) + 1e-8)
        adam[k] = rel(a)
    return {"gd": gd, "adam": adam, "kappa": condition_number(M), "tau": tau}


def _first_order_count(M, beta, tol, max_iter, adam: bool, tau: float) -> Optional[int]:
    a = np.zeros_like(beta)
    r0 = np.linalg.norm(beta)
    m = np.zeros_like(beta)
    v = np.zeros_like(beta)
    for k in range(1, max_iter + 1):
        g = M @ a - beta
        if adam:
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            a = a - tau * (m / (1 - 0.9**k)) / (np.sqrt(v / (1 - 0.999**k)) + 1e-8)
        else:
            a = a - tau * g
        if np.linalg.norm(M @ a - beta) / r0 < tol:
            return k
    return None


def precond_table(pid: str, ns=(16, 32, 64, 128, 256), tol: float = 1e-10,
                  first_order_max_iter: int = 500000, kphi: str = "exact"):
    """Iteration counts for the fixed-node a-problem; ``None`` marks a method that hit its cap.

    ``first_order_max_iter = 0`` skips GD and Adam.
    """
    if pid not in ("ex2", "ex3"):
        raise ValueError("precond_table supports ex2 and ex3")
    bench = make_problem(pid)
    problem = bench.problem
    rows = []
    for n in ns:
        omega, b = _fixed_nodes(n, "table")
        K, beta = assemble_system(problem, omega, b)
        data = build_preconditioner(problem.form, problem.rule,
                                    analyze_nodes(omega, b, problem.form.domain), kphi=kphi)
        _, rep_p = pcg(K, preconditioner_action(data), beta, tol=tol, max_iter=10 * n)
        _, rep_c = cg(K, beta, tol=tol, max_iter=500000)
        row = {"n": n, "cg": rep_c.iterations if rep_c.converged else None,
               "pcg": rep_p.iterations if rep_p.converged else None, "gd": None, "adam": None}
        if first_order_max_iter > 0:
            lam = np.linalg.eigvalsh(K)
            tau = 2.0 / (lam[0] + lam[-1])
            row["gd"] = _first_order_count(K, beta, tol, first_order_max_iter, False, tau)
            row["adam"] = _first_order_count(K, beta, tol, first_order_max_iter, True, tau)
        rows.append(row)
    return rows
