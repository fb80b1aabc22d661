"""Acceptance criteria.  Every test records one PASS/FAIL line, printed in the pytest summary."""

import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

from conftest import record_acceptance
from oracles import admissible_config, mp_reference_apply, sorted_basis
from npsc.experiments import ExperimentConfig, he_initialize, illcond_demo, make_problem, precond_table, run
from npsc.forms import H1, L2, BilinearForm, DiscreteProblem, assemble_system, energy, energy_gradient
from npsc.forms import LinearFunctional, neuron_linear_functional, neuron_linear_functionals
from npsc.model import BoxDomain, NetworkParams
from npsc.neuron import NeuronProblem, local_energy, local_gradient, solve_neurons
from npsc.precond import analyze_nodes, apply_P, apply_Pdiag, build_preconditioner, dense_matrices
from npsc.quadrature import trapezoid_rule

UNIT = BoxDomain.unit(1)
NS = (16, 32, 64, 128, 256)


def check(name, ok, detail, budget=None, elapsed=None):
    if budget is not None:
        detail += f" [{elapsed:.1f}s / {budget}s]"
        ok = ok and elapsed < budget
    record_acceptance(name, bool(ok), detail)
    assert ok, detail


# -- preconditioner tables -------------------------------------------------------

@pytest.mark.parametrize("pid, expected, label", [
    ("ex2", [2, 2, 2, 3, 3], "PCG counts with the full preconditioner (Ex2)"),
    ("ex3", [3, 2, 4, 4, 5], "PCG counts with the full preconditioner (Ex3)"),
])
def test_preconditioner_counts(pid, expected, label):
    t = time.perf_counter()
    rows = precond_table(pid, NS, first_order_max_iter=0)
    elapsed = time.perf_counter() - t
    got = [r["pcg"] for r in rows]
    ok = all(g is not None and abs(g - p) <= 1 for g, p in zip(got, expected))
    check(label, ok, f"n={list(NS)} got {got}, expected {expected} (+-1)", 10, elapsed)


def test_unpreconditioned_contrast():
    t = time.perf_counter()
    rows = {r["n"]: r["cg"] for r in precond_table("ex2", (64, 256), first_order_max_iter=0)}
    elapsed = time.perf_counter() - t
    ok = (rows[64] >= 200 and abs(rows[64] - 310) <= 0.3 * 310
          and rows[256] >= 2000 and abs(rows[256] - 3470) <= 0.3 * 3470)
    check("Unpreconditioned CG contrast (Ex2)", ok,
          f"n=64: {rows[64]} (reference 310), n=256: {rows[256]} (reference 3470)", 30, elapsed)


# -- ill-conditioning of the fixed-node mass matrix --------------------------------------

def test_ill_conditioning():
    t = time.perf_counter()
    prob = make_problem("illcond").problem
    kappas = []
    for n in (16, 32, 64, 128):
        i = np.arange(1, n + 1)
        K, _ = assemble_system(prob, np.ones((n, 1)), -(i - 1) / n)
        lam = np.linalg.eigvalsh(K)
        kappas.append(lam[-1] / lam[0])
    slopes = np.diff(np.log2(kappas))
    gd_err = illcond_demo(32, 10000)["gd"][-1]
    elapsed = time.perf_counter() - t
    ok = np.all((slopes >= 3.5) & (slopes <= 4.5)) and gd_err > 1e-2
    check("Ill-conditioning of M", ok,
          f"log2-slopes {np.round(slopes, 3).tolist()}, GD rel. error after 1e4 its {gd_err:.3e}", 60, elapsed)


# -- dense-oracle equivalence ------------------------------------------------------------

def test_dense_oracle_equivalence():
    t = time.perf_counter()
    rng = np.random.default_rng(20240501)
    worst = 0.0
    cases = {0: 0, 1: 0, 2: 0}
    for trial in range(50):
        n_ext = trial % 3
        kind = L2 if (trial // 3) % 2 == 0 else H1
        n = int(rng.integers(3, 33))
        om, b = admissible_config(rng, n, n_ext)
        data = build_preconditioner(BilinearForm(kind, UNIT), trapezoid_rule(11), analyze_nodes(om, b, UNIT))
        alpha = rng.normal(size=n)
        ops = [(apply_P, False)] + ([(apply_Pdiag, True)] if kind == L2 else [])
        for op, diag in ops:
            ref = mp_reference_apply(data.nodes, kind, alpha, diagonal=diag)
            worst = max(worst, np.linalg.norm(op(data, alpha) - ref) / np.linalg.norm(ref))
        cases[n_ext] += 1
    elapsed = time.perf_counter() - t
    check("Dense-oracle equivalence of apply_P / apply_Pdiag", worst <= 1e-10,
          f"50 configurations, exterior counts {cases}, worst rel. err {worst:.2e}", 10, elapsed)


# -- basis identities ----------------------------------------------------------------------

def test_basis_identities():
    t = time.perf_counter()
    rng = np.random.default_rng(7)
    rule = trapezoid_rule(4001)
    prob = DiscreteProblem(BilinearForm(L2, UNIT), lambda x: x[:, 0], rule)
    worst_phi = worst_k = 0.0
    for trial in range(10):
        n = int(rng.integers(3, 33))
        om, b = admissible_config(rng, n, trial % 3)
        data = build_preconditioner(prob.form, rule, analyze_nodes(om, b, UNIT))
        na = data.nodes
        mats = dense_matrices(data)
        x = rng.random(1000)
        m = na.n_interior
        grid = na.grid
        hats = np.column_stack([np.interp(x, grid, e) for e in np.eye(m + 2)])
        order = np.r_[np.arange(1, m + 1), 0, m + 1]
        psi = sorted_basis(om, b, na.perm, m, x)
        worst_phi = max(worst_phi, np.max(np.abs(psi @ mats["B"].T - hats[:, order])))
        K, _ = assemble_system(prob, om, b)
        Ks = K[np.ix_(na.perm, na.perm)]
        psi_q = sorted_basis(om, b, na.perm, m, rule.points[:, 0])
        Kbar = psi_q.T @ (rule.weights[:, None] * psi_q)
        R = mats["R"]
        worst_k = max(worst_k, np.linalg.norm(R @ Kbar @ R.T - Ks) / np.linalg.norm(Ks))
    elapsed = time.perf_counter() - t
    check("Basis identities Phi = B Psi and K = R Kbar R^T", worst_phi <= 1e-10 and worst_k <= 1e-10,
          f"max |Phi - B Psi| {worst_phi:.2e}, rel. err of K {worst_k:.2e}", 10, elapsed)


# -- gradient checks -----------------------------------------------------------------------------

def _generic_params(rng, n, h):
    """Parameters whose nodal points sit strictly between quadrature points."""
    omega = rng.choice([-1.0, 1.0], n) * rng.uniform(0.5, 2.0, n)
    cells = rng.integers(50, int(1 / h) - 50, n)
    nodes = (cells + rng.uniform(0.3, 0.7, n)) * h
    return NetworkParams(rng.normal(size=n), omega[:, None], -omega * nodes)


def test_gradient_checks():
    t = time.perf_counter()
    N = 2001
    h = 1.0 / (N - 1)
    rng = np.random.default_rng(11)
    worst_e = worst_l = worst_a = 0.0
    for kind in (L2, H1):
        alpha = (lambda x: 2 + np.sin(6 * np.pi * x[:, 0])) if kind == H1 else None
        prob = DiscreteProblem(BilinearForm(kind, UNIT, alpha), lambda x: np.sin(2 * np.pi * x[:, 0]) + x[:, 0],
                               trapezoid_rule(N))
        for _ in range(20):
            p = _generic_params(rng, 5, h)
            theta = p.flatten()
            g = energy_gradient(prob, p)
            eps = 1e-7
            fd = np.array([(energy(prob, NetworkParams.from_flat(theta + eps * e, 5, 1))
                            - energy(prob, NetworkParams.from_flat(theta - eps * e, 5, 1))) / (2 * eps)
                           for e in np.eye(theta.size)])
            worst_e = max(worst_e, np.linalg.norm(g - fd) / np.linalg.norm(fd))
            K, beta = assemble_system(prob, p.omega, p.b)
            worst_a = max(worst_a, np.max(np.abs(g[:5] - (K @ p.a - beta))))
            i = int(rng.integers(5))
            nprob = NeuronProblem(prob, neuron_linear_functional(prob, p, i), p.omega[i], p.b[i])
            th = np.r_[p.omega[i], p.b[i]]
            gl = local_gradient(nprob, th[:1], th[1])
            fdl = np.array([(local_energy(nprob, (th + eps * e)[:1], (th + eps * e)[1])
                             - local_energy(nprob, (th - eps * e)[:1], (th - eps * e)[1])) / (2 * eps)
                            for e in np.eye(2)])
            worst_l = max(worst_l, np.linalg.norm(gl - fdl) / np.linalg.norm(fdl))
    elapsed = time.perf_counter() - t
    ok = worst_e <= 1e-5 and worst_l <= 1e-5 and worst_a <= 1e-10
    check("Gradient checks", ok,
          f"energy_gradient {worst_e:.1e}, local_gradient {worst_l:.1e}, |dE/da - (Ka - beta)| {worst_a:.1e}",
          10, elapsed)


# -- sign of stationary neuron energies ------------------------------------------------------------------------

def test_stationary_neuron_energy_negative():
    t = time.perf_counter()
    rng = np.random.default_rng(41)
    problems = [make_problem(pid, 1001).problem for pid in ("ex1", "ex2", "ex3", "ex5")]
    energies = []
    attempts = 0
    while len(energies) < 100 and attempts < 5000:
        for prob in problems:
            n = 16
            params = he_initialize(n, 1, rng)
            vw, gw = neuron_linear_functionals(prob, params)
            om0 = rng.choice([-1.0, 1.0], n) * rng.uniform(0.3, 2.0, n)
            b0 = -om0 * rng.uniform(0.1, 0.9, n)
            res = solve_neurons(prob, vw, gw, om0[:, None], b0)
            for k in range(n):
                attempts += 1
                if res.flat[k]:
                    continue
                nprob = NeuronProblem(prob, LinearFunctional(vw[k], None if gw is None else gw[k]),
                                      res.theta[k, :1], res.theta[k, 1])
                g = local_gradient(nprob, res.theta[k, :1], res.theta[k, 1])
                if np.linalg.norm(g) <= 1e-8:
                    energies.append(res.energy[k])
    elapsed = time.perf_counter() - t
    energies = np.array(energies[:100])
    ok = energies.size == 100 and np.all(energies < -1e-14)
    check("Stationary active neurons have negative local energy", ok,
          f"{energies.size} qualifying runs out of {attempts}, max energy {energies.max():.3e}", 10, elapsed)


# -- training reproductions ----------------------------------------------------------------------

@lru_cache(maxsize=None)
def _final_errors(pid, algo, n, epochs=1000, seeds=3):
    records, _ = run(ExperimentConfig(problem=pid, algo=algo, neurons=n, epochs=epochs, seeds=seeds))
    return (tuple(r.final["rel_energy_err"] for r in records), tuple(r.final["l2_err"] for r in records))


def test_algorithm_ordering():
    t = time.perf_counter()
    lines = []
    ok = True
    for pid in ("ex1", "ex2"):
        med = {algo: float(np.median(_final_errors(pid, algo, 32)[0])) for algo in ("npsc", "gd", "adam", "lsgd")}
        ok &= all(med["npsc"] < med[a] for a in ("gd", "adam", "lsgd"))
        lines.append(pid + " " + ", ".join(f"{a} {v:.2e}" for a, v in med.items()))
    elapsed = time.perf_counter() - t
    check("Algorithm ordering, median final rel. energy error (n=32, T=1000, 3 seeds)", ok,
          "; ".join(lines), 900, elapsed)


def test_approximation_rate():
    t = time.perf_counter()
    ns = (16, 32, 64)
    med = [float(np.median(_final_errors("ex1", "npsc", n)[1])) for n in ns]
    slopes = np.diff(np.log2(med))
    elapsed = time.perf_counter() - t
    check("Approximation rate of NPSC on Ex1", bool(np.all(slopes <= -1.5)),
          f"median L2 errors {['%.2e' % v for v in med]}, log2-slopes {np.round(slopes, 2).tolist()}",
          1200, elapsed)


def test_determinism(tmp_path):
    outs = {}
    for pid, algo in (("ex2", "npsc"), ("ex3", "npsc"), ("ex1", "adam")):
        for tag, workers in (("a", 1), ("b", 1), ("c", 4)):
            stem = tmp_path / f"{pid}_{algo}_{tag}"
            run(ExperimentConfig(problem=pid, algo=algo, neurons=16, epochs=5, seeds=2, master_seed=99,
                                 workers=workers, out=str(stem) + ".csv"))
            outs[(pid, algo, tag)] = [Path(f"{stem}_seed{k}.csv").read_bytes() for k in range(2)] + \
                [Path(f"{stem}_mean.csv").read_bytes()]
    same = all(outs[(p, a, "a")] == outs[(p, a, "b")] == outs[(p, a, "c")]
               for p, a in (("ex2", "npsc"), ("ex3", "npsc"), ("ex1", "adam")))
    check("Determinism (bit-identical CSV across reruns and worker counts)", same,
          "ex2/ex3 npsc and ex1 adam, workers 1 and 4")


def test_linear_cost_of_apply_P():
    t0 = time.perf_counter()
    timings = {}
    rng = np.random.default_rng(0)
    for n in (2**13, 2**16):
        om, b = np.ones((n, 1)), -np.arange(1, n + 1) / (n + 1)
        data = build_preconditioner(BilinearForm(L2, UNIT), trapezoid_rule(11), analyze_nodes(om, b, UNIT))
        alpha = rng.normal(size=n)
        reps = []
        for _ in range(7):
            t = time.perf_counter()
            apply_P(data, alpha)
            reps.append(time.perf_counter() - t)
        timings[n] = min(reps)
    ratio = timings[2**16] / timings[2**13]
    elapsed = time.perf_counter() - t0
    check("O(n) application of P", ratio <= 12,
          f"time(2^16)/time(2^13) = {ratio:.2f} ({timings[2**13] * 1e3:.1f} ms -> {timings[2**16] * 1e3:.1f} ms)",
          60, elapsed)


# -- smoke tests without quantitative targets ------------------------------------------------------

@pytest.mark.parametrize("pid, algo", [("ex4", "npsc"), ("ex6", "npsc"), ("ex1", "npsc-noadj"),
                                       ("ex1", "npsc-nolm")])
def test_smoke_against_gd(pid, algo):
    rel, _ = _final_errors(pid, algo, 32, epochs=200, seeds=1)
    rel_gd, _ = _final_errors(pid, "gd", 32, epochs=200, seeds=1)
    check(f"Smoke: {algo} below GD on {pid} (n=32, T=200)", rel[0] < rel_gd[0],
          f"{algo} {rel[0]:.2e} vs gd {rel_gd[0]:.2e}")
