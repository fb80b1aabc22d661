import numpy as np
import pytest

from oracles import admissible_config, hat_gram, mp_reference_apply, sorted_basis
from npsc.forms import H1, L2, BilinearForm, DiscreteProblem, assemble_system
from npsc.linsolve import pcg
from npsc.model import BoxDomain
from npsc.precond import (
    NodeAssumptionError,
    analyze_nodes,
    apply_B1,
    apply_B1_inverse,
    apply_P,
    apply_Pdiag,
    build_preconditioner,
    dense_matrices,
    hat_functions,
    preconditioner_action,
)
from npsc.quadrature import trapezoid_rule

UNIT = BoxDomain.unit(1)
RULE = trapezoid_rule(4001)


def build(omega, b, kind=L2):
    return build_preconditioner(BilinearForm(kind, UNIT), RULE, analyze_nodes(omega, b, UNIT))


def test_analyze_interior_nodes():
    na = analyze_nodes(np.ones((3, 1)), np.array([-0.25, -0.5, -0.75]), UNIT)
    assert na.n_interior == 3
    np.testing.assert_allclose(na.nodes, [0.25, 0.5, 0.75])
    np.testing.assert_array_equal(na.perm, [0, 1, 2])


def test_analyze_one_exterior():
    na = analyze_nodes(np.ones((2, 1)), np.array([-0.5, 0.2]), UNIT)
    assert na.n_interior == 1
    np.testing.assert_allclose(na.ext_nodes, [-0.2])
    np.testing.assert_allclose(na.r_tilde, [[1.2, 0.2]])


def test_analyze_rejects_violations():
    with pytest.raises(NodeAssumptionError):
        analyze_nodes(np.ones((3, 1)), np.array([0.1, 0.2, 0.3]), UNIT)
    with pytest.raises(NodeAssumptionError):
        analyze_nodes(np.array([[1.0], [0.0]]), np.array([-0.5, 0.2]), UNIT)
    with pytest.raises(NodeAssumptionError):
        analyze_nodes(np.ones((2, 1)), np.array([-0.5, -1.5]), UNIT)


def test_coincident_nodes_are_separated():
    na = analyze_nodes(np.ones((3, 1)), np.array([-0.5, -0.5, -0.25]), UNIT)
    assert np.all(np.diff(na.nodes) > 0)


def test_uniform_mass_matrix():
    n = 7
    om, b = np.ones((n, 1)), -np.arange(1, n + 1) / (n + 1)
    data = build(om, b)
    grid = np.linspace(0, 1, n + 2)
    np.testing.assert_allclose(data.kphi.todense(), hat_gram(grid, L2), atol=1e-12)
    data = build(om, b, H1)
    np.testing.assert_allclose(data.kphi.todense(), hat_gram(grid, H1), rtol=1e-12)


def test_b1_inverse_positive_slopes(rng):
    n = 5
    data = build(np.ones((n, 1)), -np.arange(1, n + 1) / (n + 1))
    alpha = rng.normal(size=n + 2)
    np.testing.assert_allclose(apply_B1_inverse(data, alpha), alpha)


def test_b1_inverse_mixed_slopes(rng):
    om = np.array([[1.5], [-0.7], [2.0]])
    b = -om[:, 0] * np.array([0.2, 0.5, 0.8])
    data = build(om, b)
    B1 = dense_matrices(data)["B1"]
    alpha = rng.normal(size=5)
    ref = np.linalg.solve(B1, alpha)
    assert np.linalg.norm(apply_B1_inverse(data, alpha) - ref) <= 1e-12 * np.linalg.norm(ref)
    np.testing.assert_allclose(apply_B1_inverse(data, apply_B1(data, alpha)), alpha, atol=1e-12)


@pytest.mark.parametrize("n_ext", [0, 1, 2])
@pytest.mark.parametrize("kind", [L2, H1])
def test_apply_P_matches_dense_oracle(rng, n_ext, kind):
    for _ in range(4):
        n = int(rng.integers(3, 33))
        om, b = admissible_config(rng, n, n_ext)
        data = build(om, b, kind)
        alpha = rng.normal(size=n)
        ref = mp_reference_apply(data.nodes, kind, alpha)
        got = apply_P(data, alpha)
        assert np.linalg.norm(got - ref) <= 1e-10 * np.linalg.norm(ref)
        if kind == L2:
            ref = mp_reference_apply(data.nodes, kind, alpha, diagonal=True)
            got = apply_Pdiag(data, alpha)
            assert np.linalg.norm(got - ref) <= 1e-10 * np.linalg.norm(ref)


def test_apply_P_linear(rng):
    om, b = admissible_config(rng, 12, 1)
    data = build(om, b)
    x, y = rng.normal(size=12), rng.normal(size=12)
    for op in (apply_P, apply_Pdiag):
        np.testing.assert_allclose(op(data, x + y), op(data, x) + op(data, y), atol=1e-12 * np.linalg.norm(op(data, x)))


def test_pdiag_rejects_h1(rng):
    om, b = admissible_config(rng, 5, 0)
    with pytest.raises(ValueError):
        apply_Pdiag(build(om, b, H1), np.ones(5))


def test_hat_identity(rng):
    om, b = admissible_config(rng, 20, 2)
    data = build(om, b)
    x = rng.random(1000)
    na = data.nodes
    psi = sorted_basis(om, b, na.perm, na.n_interior, x)
    B = dense_matrices(data)["B"]
    grid = na.grid
    hats = np.column_stack([np.interp(x, grid, e) for e in np.eye(grid.size)])
    order = np.r_[np.arange(1, na.n_interior + 1), 0, na.n_interior + 1]
    np.testing.assert_allclose(psi @ B.T, hats[:, order], atol=1e-10)
    np.testing.assert_allclose(hat_functions(na, x), hats[:, order], atol=1e-14)


def test_gram_identity(rng):
    om, b = admissible_config(rng, 16, 1)
    prob = DiscreteProblem(BilinearForm(L2, UNIT), lambda x: x[:, 0], RULE)
    data = build(om, b)
    na = data.nodes
    K, _ = assemble_system(prob, om, b)
    psi = sorted_basis(om, b, na.perm, na.n_interior, RULE.points[:, 0])
    Kbar = psi.T @ (RULE.weights[:, None] * psi)
    R = dense_matrices(data)["R"]
    Ks = K[np.ix_(na.perm, na.perm)]
    assert np.linalg.norm(R @ Kbar @ R.T - Ks) <= 1e-10 * np.linalg.norm(Ks)


def _table_setup(pid, n):
    from npsc.experiments import make_problem
    prob = make_problem(pid).problem
    om, b = np.ones((n, 1)), -np.arange(1, n + 1) / (n + 1)
    K, beta = assemble_system(prob, om, b)
    data = build_preconditioner(prob.form, prob.rule, analyze_nodes(om, b, UNIT))
    return K, beta, data


def test_pcg_table_b1_n128():
    K, beta, data = _table_setup("ex2", 128)
    _, rep = pcg(K, preconditioner_action(data), beta, tol=1e-10)
    assert rep.iterations == 3


def test_pdiag_iteration_bound():
    # diag(M)^{-1} M has condition number at most 3 for the 1D hat mass matrix,
    # so the classical CG bound caps the iteration count independently of n
    kappa = 3.0
    rate = (np.sqrt(kappa) + 1) / (np.sqrt(kappa) - 1)
    bound = int(np.ceil(np.log(2 / 1e-10) / np.log(rate))) + 1
    for n in (32, 64, 128):
        K, beta, data = _table_setup("ex2", n)
        _, full = pcg(K, preconditioner_action(data), beta, tol=1e-10)
        _, diag = pcg(K, preconditioner_action(data, diagonal=True), beta, tol=1e-10)
        assert diag.converged and full.iterations <= diag.iterations <= bound


def test_action_respects_original_order(rng):
    om, b = admissible_config(rng, 10, 2)
    data = build(om, b)
    P = preconditioner_action(data)
    perm = data.nodes.perm
    alpha = rng.normal(size=10)
    expect = np.empty(10)
    expect[perm] = mp_reference_apply(data.nodes, L2, alpha[perm])
    assert np.linalg.norm(P(alpha) - expect) <= 1e-10 * np.linalg.norm(expect)
