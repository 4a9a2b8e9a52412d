import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linear_sum_assignment

from conftest import INSTANCES
from ibpg.qap import (InstanceError, QapInstance, apply_H, build_relaxation, format_qaplib, grid_instance,
                      hungarian, load_instance, nfval, objective, objective_and_gradient, parse_qaplib,
                      power_norm, problem_definition, project_affine, project_birkhoff, reference_solve)
from ibpg.solvers import check_gradient


def test_parse_small():
    inst = parse_qaplib("2  0 1 1 0  0 2 2 0")
    assert inst.n == 2
    assert np.array_equal(inst.A, [[0, 1], [1, 0]])
    assert np.array_equal(inst.B, [[0, 2], [2, 0]])


def test_parse_comments_and_symmetrize():
    inst = parse_qaplib("# header\n2\n\n0 1\n3 0\n# flows\n0 2\n2 0\n")
    assert np.array_equal(inst.A, [[0, 2], [2, 0]])


@pytest.mark.parametrize("text", ["1  5  5", "2 0 1 1", "2 0 1 1 0 0 2 2 x", "", "two 0 0 0 0 0 0 0 0"])
def test_parse_errors(text):
    with pytest.raises(InstanceError):
        parse_qaplib(text)


def test_shipped_instances_roundtrip():
    g = load_instance(INSTANCES / "grid12.dat")
    assert g.n == 12
    gen = grid_instance(3, 4, seed=0, name="grid12")
    assert np.array_equal(g.A, gen.A) and np.array_equal(g.B, gen.B)
    again = parse_qaplib(format_qaplib(g))
    assert np.array_equal(again.A, g.A)
    assert load_instance(INSTANCES / "pair2.dat").n == 2
    with pytest.raises(InstanceError):
        load_instance(INSTANCES / "missing.dat")


@given(arrays(np.int64, (5, 5), elements=st.integers(-20, 20)))
def test_hungarian_against_scipy(C):
    C = C.astype(float)
    assign, u, v, total = hungarian(C)
    r, c = linear_sum_assignment(C)
    assert total == pytest.approx(C[r, c].sum(), abs=1e-9)
    assert np.all(u[:, None] + v[None, :] <= C + 1e-9)
    assert u.sum() + v.sum() == pytest.approx(total, abs=1e-9)
    # complementary slackness on the returned assignment
    assert np.allclose(u + v[assign], C[np.arange(5), assign], atol=1e-9)
    assert sorted(assign) == list(range(5))


def test_hungarian_ties_lowest_index():
    assign, *_ = hungarian(np.zeros((3, 3)))
    assert list(assign) == [0, 1, 2]


def test_zero_matrices():
    inst = QapInstance(3, np.zeros((3, 3)), np.zeros((3, 3)))
    qp = build_relaxation(inst)
    assert np.allclose(qp.S, 0) and np.allclose(qp.T, 0) and qp.L == 0
    res = reference_solve(qp)
    assert res.F_star == 0 and res.residual == 0
    assert np.allclose(res.x_star.sum(0), 1)


def test_identity_matrices():
    inst = QapInstance(4, np.eye(4), np.eye(4))
    qp = build_relaxation(inst)
    assert qp.s.sum() + qp.t.sum() == pytest.approx(4)
    assert qp.psd_margin == pytest.approx(0, abs=1e-12)


def test_relaxation_grid12(grid12):
    qp, prob = grid12
    assert qp.psd_margin >= -1e-9 * qp.scale
    # exact spectral norm from eigen coordinates
    assert qp.norm_H == pytest.approx(qp.norm_exact, rel=1e-6)
    tight, _ = power_norm(lambda X: apply_H(qp, X), qp.n, tol=1e-9, max_iter=50_000)
    assert abs(qp.norm_H - tight) <= 0.01 * tight
    c = np.outer(qp.lam, qp.omega)
    assert np.all(qp.s[:, None] + qp.t[None, :] <= c + 1e-9)
    _, _, _, total = hungarian(c)
    assert qp.s.sum() + qp.t.sum() == pytest.approx(total, abs=1e-9)


def test_H_self_adjoint_and_psd(grid12):
    qp, _ = grid12
    rng = np.random.default_rng(0)
    for _ in range(1000):
        X = rng.normal(size=(qp.n, qp.n))
        assert np.vdot(X, apply_H(qp, X)) >= -1e-9 * qp.scale * np.vdot(X, X)
    X, Y = rng.normal(size=(2, qp.n, qp.n))
    a, b = np.vdot(Y, apply_H(qp, X)), np.vdot(apply_H(qp, Y), X)
    assert abs(a - b) <= 1e-10 * max(abs(a), 1)
    assert np.allclose(apply_H(qp, np.zeros((qp.n, qp.n))), 0)
    with pytest.raises(ValueError):
        apply_H(qp, np.zeros((3, 3)))


def test_objective_gradient(grid12):
    qp, prob = grid12
    f, g = objective_and_gradient(qp, np.zeros((qp.n, qp.n)))
    assert f == 0 and np.all(g == 0)
    rng = np.random.default_rng(1)
    pts = [rng.uniform(0.01, 1, (qp.n, qp.n)) for _ in range(20)]
    assert check_gradient(prob, pts) <= 1e-5


def test_S_T_zero_option():
    inst = QapInstance(3, np.diag([1.0, 2, 3]), np.diag([1.0, 1, 2]))
    qp = build_relaxation(inst, st="zero")
    assert np.all(qp.S == 0) and qp.psd_margin >= 0
    with pytest.raises(ValueError):
        build_relaxation(inst, st="other")


def test_affine_projection():
    rng = np.random.default_rng(2)
    Y = rng.normal(size=(5, 5))
    X = project_affine(Y)
    assert np.allclose(X.sum(0), 1) and np.allclose(X.sum(1), 1)
    # residual is orthogonal to the affine set's direction space
    D = project_affine(rng.normal(size=(5, 5))) - project_affine(np.zeros((5, 5)))
    assert abs(np.vdot(Y - X, D)) < 1e-10


@given(arrays(np.float64, (4, 4), elements=st.floats(-2, 2)))
def test_birkhoff_projection(Y):
    X = project_birkhoff(Y)
    assert np.all(X >= -1e-12)
    assert np.max(np.abs(X.sum(0) - 1)) <= 1e-10 and np.max(np.abs(X.sum(1) - 1)) <= 1e-10
    assert np.allclose(project_birkhoff(X), X, atol=1e-10)
    # variational inequality against vertices (permutation matrices)
    for perm in (np.eye(4), np.eye(4)[::-1], np.roll(np.eye(4), 1, axis=0)):
        assert np.vdot(Y - X, perm - X) <= 1e-9


def test_reference_n2_against_brute_force():
    inst = load_instance(INSTANCES / "pair2.dat")
    qp = build_relaxation(inst)
    res = reference_solve(qp, tol=1e-10)
    # the feasible set is X(a) = a I + (1 - a) J, J the anti-identity; H is
    # self-adjoint so f(X(a)) expands exactly into three inner products
    I, J = np.eye(2), np.eye(2)[::-1]
    ii, ij, jj = np.vdot(I, apply_H(qp, I)), np.vdot(I, apply_H(qp, J)), np.vdot(J, apply_H(qp, J))
    a = np.linspace(0, 1, 1_000_001)
    brute = np.min(a * a * ii + 2 * a * (1 - a) * ij + (1 - a) ** 2 * jj)
    assert objective(qp, 0.3 * I + 0.7 * J) == pytest.approx(0.09 * ii + 0.42 * ij + 0.49 * jj)
    assert abs(res.F_star - brute) <= 1e-8 * max(1, abs(brute))


def test_reference_grid12(grid12, grid12_ref):
    qp, _ = grid12
    x_star, F_star = grid12_ref
    assert np.all(x_star >= 0)
    assert np.max(np.abs(x_star.sum(0) - 1)) <= 1e-10
    assert F_star == pytest.approx(objective(qp, x_star))
    assert nfval(qp, x_star, F_star) <= 1e-12


def test_nfval_formula(grid12):
    qp, _ = grid12
    X = np.full((qp.n, qp.n), 1.0 / qp.n)
    F = objective(qp, X)
    assert nfval(qp, X, F / 2) == pytest.approx(1.0)
    assert nfval(qp, X, 0.0) == pytest.approx(F)


def test_problem_definition_indicator(grid12):
    qp, prob = grid12
    X = np.full((qp.n, qp.n), 1.0 / qp.n)
    assert prob.P(X) == 0
    assert prob.P(2 * X) == np.inf
    assert prob.smoothness.gamma == 2 and prob.L == qp.L
