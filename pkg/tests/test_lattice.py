"""Binary lattice: exact expectations, forward/backward sweeps, exact DP."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slqlab import problems
from slqlab.lattice import (
    IndefiniteHessian,
    LatticeError,
    TreeProcess,
    backward_bsde_tree,
    build_tree,
    closed_loop_rollout,
    cond_expect,
    cost_on_tree,
    cost_to_go,
    dp_solve,
    dp_value,
    forward_dynamics,
    increment_projection,
    process_to_rows,
    tree_coefficients,
)


def test_build_tree_small_shapes():
    tr = build_tree(1, 1.0)
    assert sum(2**k for k in range(tr.N + 1)) == 3
    assert np.array_equal(tr.w[0], [0.0])
    assert np.array_equal(tr.w[1], [1.0, -1.0])

    tr2 = build_tree(2, 1.0)
    assert sum(2**k for k in range(tr2.N + 1)) == 7
    s = np.sqrt(0.5)
    assert np.allclose(sorted(tr2.w[2]), [-2 * s, 0.0, 0.0, 2 * s])

    tr12 = build_tree(12, 1.0)
    assert sum(2**k for k in range(tr12.N + 1)) == 8191


@pytest.mark.parametrize("N,T", [(0, 1.0), (25, 1.0), (2.5, 1.0),
                                 (4, 0.0), (4, -1.0)])
def test_build_tree_rejects(N, T):
    with pytest.raises(LatticeError):
        build_tree(N, T)


def test_tree_process_shape_guard():
    tr = build_tree(3, 1.0)
    with pytest.raises(LatticeError):
        TreeProcess(tree=tr, values=[np.zeros(2)])  # root level must have 1


def test_cond_expect_pointwise():
    assert cond_expect(np.array([3.0, 5.0]))[0] == 4.0
    x = np.array([7.25, 7.25, -1.5, -1.5])
    assert np.array_equal(cond_expect(x), [7.25, -1.5])


def test_increment_projection_of_increment():
    # E[dW | node] = 0 and E[dW * dW]/dt = 1; the accumulated w carry
    # representation roundoff, so machine-eps slack
    tr = build_tree(5, 2.0)
    for k in range(tr.N):
        dw = tr.w[k + 1] - np.repeat(tr.w[k], 2)
        assert np.abs(cond_expect(dw)).max() <= 1e-15
        assert np.allclose(increment_projection(dw, tr.sqrt_dt), 1.0,
                           atol=1e-14)


@given(st.lists(st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
                min_size=16, max_size=16))
@settings(max_examples=60, deadline=None)
def test_tower_property(leaves):
    v = np.array(leaves)
    down = v
    while down.shape[0] > 1:
        down = cond_expect(down)
    assert down[0] == pytest.approx(v.mean(), rel=1e-12, abs=1e-9)


def test_adapted_times_increment_orthogonality(rng):
    # conditional E[h dW | node] vanishes exactly when the +/- step is the
    # same float; the unconditional mean picks up summation-order roundoff
    tr = build_tree(6, 1.0)
    s = tr.sqrt_dt
    for k in range(tr.N):
        h = rng.standard_normal(2**k)
        step = np.tile([s, -s], 2**k)
        prod = np.repeat(h, 2) * step
        assert np.all(cond_expect(prod) == 0.0)
        assert abs(prod.mean()) <= 1e-15 * max(1.0, np.abs(h).max())


def test_forward_zero_coefficients_freezes_state():
    p = problems.get_problem("zero")
    tc = tree_coefficients(p, build_tree(4, 1.0))
    X = forward_dynamics(tc, None, np.array([1.0]))
    for k in range(5):
        assert np.all(X.values[k] == 1.0)


def test_forward_unit_noise_control(ex37):
    tc = tree_coefficients(ex37, build_tree(1, 1.0))
    u = TreeProcess(tree=tc.tree, values=[np.array([[0.0, 1.0]])])
    X = forward_dynamics(tc, u, np.array([0.0]))
    assert np.array_equal(X.values[1].ravel(), [1.0, -1.0])


def test_forward_euler_drift_product():
    spec = {"T": 1.0, "A": [[1.0]], "B": [[0.0]], "C": [[0.0]], "D": [[0.0]],
            "Q": [[0.0]], "S": [[0.0]], "R": [[1.0]], "G": [[1.0]]}
    p = problems.build_problem(spec)
    tc = tree_coefficients(p, build_tree(4, 1.0))
    X = forward_dynamics(tc, None, np.array([1.0]))
    assert np.all(X.values[4] == 1.25**4)
    assert X.values[4][0, 0] == 2.44140625


def test_backward_constant_terminal(ex37):
    tc = tree_coefficients(ex37, build_tree(5, 1.0))
    term = np.full(2**5, 3.25)
    Y, Z = backward_bsde_tree(tc, term, lambda t, w, x, ybar, z, u: 0.0 * ybar)
    for k in range(6):
        assert np.all(Y.values[k] == 3.25)
    for k in range(5):
        assert np.all(Z.values[k] == 0.0)


def test_backward_constant_driver(ex37):
    tc = tree_coefficients(ex37, build_tree(2, 1.0))
    Y, _ = backward_bsde_tree(tc, np.zeros(4),
                              lambda t, w, x, ybar, z, u: np.ones_like(ybar))
    assert Y.root() == pytest.approx(1.0, abs=1e-15)


def test_backward_martingale_representation(ex37):
    # terminal W(T): Y reproduces w at every node and Z is identically 1
    tc = tree_coefficients(ex37, build_tree(6, 1.0))
    Y, Z = backward_bsde_tree(tc, tc.tree.w[6].copy(),
                              lambda t, w, x, ybar, z, u: 0.0 * ybar)
    for k in range(7):
        assert np.allclose(Y.values[k], tc.tree.w[k], atol=1e-14)
    for k in range(6):
        assert np.allclose(Z.values[k], 1.0, atol=1e-12)


def test_dp_zero_problem():
    p = problems.get_problem("zero")
    sol = dp_solve(p, build_tree(4, 1.0))  # bare tree is auto-wrapped
    for lvl in sol.P.values:
        assert np.all(lvl == 0.0)
    assert dp_value(sol, [3.0]) == 0.0


def test_dp_uncontrolled_constant_kernel():
    spec = {"T": 1.0, "A": [[0.0]], "B": [[0.0]], "C": [[0.0]], "D": [[0.0]],
            "Q": [[0.0]], "S": [[0.0]], "R": [[1.0]], "G": [[2.5]]}
    p = problems.build_problem(spec)
    sol = dp_solve(p, build_tree(5, 1.0))
    for lvl in sol.P.values:
        assert np.all(lvl == 2.5)


def test_dp_benchmark_value(ex37):
    tc = tree_coefficients(ex37, build_tree(12, ex37.T))
    sol = dp_solve(ex37, tc)
    assert abs(dp_value(sol, [1.0]) - 20.0 / 9.0) <= 0.02
    # kernels stay symmetric to near machine precision
    for lvl in sol.P.values:
        assert np.abs(lvl - np.swapaxes(lvl, -1, -2)).max() <= 1e-12


def test_dp_quadratic_homogeneity(ex37_dp8):
    v1 = dp_value(ex37_dp8, [1.0])
    v2 = dp_value(ex37_dp8, [2.0])
    assert v2 == pytest.approx(4.0 * v1, rel=1e-12)


def test_dp_single_node_perturbations_never_improve(ex37, ex37_tc8, rng):
    sol = dp_solve(ex37, ex37_tc8)
    X, u = closed_loop_rollout(ex37_tc8, sol, [1.0])
    base = cost_on_tree(ex37_tc8, X, u)
    tr = ex37_tc8.tree
    for _ in range(100):
        k = int(rng.integers(0, tr.N))
        j = int(rng.integers(0, 2**k))
        v = rng.standard_normal(ex37.m)
        vals = [a.copy() for a in u.values]
        vals[k][j] += v
        u2 = TreeProcess(tree=tr, values=vals)
        X2 = forward_dynamics(ex37_tc8, u2, [1.0])
        assert cost_on_tree(ex37_tc8, X2, u2) >= base - 1e-12


def test_dp_rollout_cost_matches_kernel(ex37, ex37_tc8):
    sol = dp_solve(ex37, ex37_tc8)
    X, u = closed_loop_rollout(ex37_tc8, sol, [1.0])
    assert cost_on_tree(ex37_tc8, X, u) == pytest.approx(
        dp_value(sol, [1.0]), abs=1e-12)
    ctg = cost_to_go(ex37_tc8, X, u)
    assert ctg.root() == pytest.approx(cost_on_tree(ex37_tc8, X, u), abs=1e-12)


def test_dp_indefinite_hessian_detected():
    p = problems.get_problem("negated-weights")
    with pytest.raises(IndefiniteHessian) as exc:
        dp_solve(p, build_tree(6, p.T))
    assert exc.value.min_eig < 0.0


def test_process_rows_layout():
    tr = build_tree(2, 1.0)
    proc = TreeProcess(tree=tr, values=[np.zeros((1, 1)), np.ones((2, 1))])
    rows = list(process_to_rows(proc))
    # (level, index, w, flattened value)
    assert rows[0][:3] == (0, 0, 0.0)
    assert rows[1][0] == 1 and rows[1][1] == 0
    assert len(rows) == 3
