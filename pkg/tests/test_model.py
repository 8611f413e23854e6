"""Problem container, evaluators, validation, and the named fixtures."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slqlab import problems
from slqlab.model import (
    CoefficientField,
    Dimensions,
    KIND_CONSTANT,
    KIND_MARKOV,
    KIND_TIME,
    LQProblem,
    ModelError,
    WeightField,
    eval_all,
    eval_batch,
    sym,
    terminal_batch,
    terminal_weight,
    validate_problem,
)

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


def test_dimensions_reject_nonpositive():
    with pytest.raises(ModelError):
        Dimensions(0, 1)
    with pytest.raises(ModelError):
        Dimensions(1, -2)


@given(st.lists(finite, min_size=4, max_size=4))
def test_sym_idempotent_and_symmetric(entries):
    a = np.array(entries).reshape(2, 2)
    s = sym(a)
    assert np.array_equal(s, s.T)
    assert np.array_equal(sym(s), s)


def test_benchmark_eval_point(ex37):
    b = eval_all(ex37, 0.5, 0.2)
    assert np.array_equal(b.R, np.diag([5.0, -1.0]))
    assert np.array_equal(b.D, np.array([[0.0, 1.0]]))
    assert np.array_equal(b.B, np.array([[1.0, 0.0]]))
    assert b.A == 0.0 and b.C == 0.0 and b.Q == 0.0
    assert np.array_equal(b.S, np.zeros((2, 1)))


def test_eval_outside_horizon_rejected(ex37):
    with pytest.raises(ModelError):
        eval_all(ex37, 1.5, 0.0)
    with pytest.raises(ModelError):
        eval_all(ex37, -0.1, 0.0)


def test_constant_terminal_ignores_w(ex37):
    for w in (-2.0, 0.0, 0.7, 31.4):
        assert terminal_weight(ex37, w) == np.array([[4.0]])


@given(t=st.floats(min_value=0.0, max_value=1.0, allow_nan=False),
       w=st.floats(min_value=-3.0, max_value=3.0, allow_nan=False))
@settings(max_examples=50, deadline=None)
def test_eval_is_pure(tanh_term, t, w):
    # two calls at the same point must agree bitwise
    b1 = eval_all(tanh_term, t, w)
    b2 = eval_all(tanh_term, t, w)
    for name in ("A", "B", "C", "D", "Q", "S", "R"):
        assert np.array_equal(getattr(b1, name), getattr(b2, name))
    assert np.array_equal(terminal_weight(tanh_term, w),
                          terminal_weight(tanh_term, w))


def test_eval_batch_matches_pointwise(tanh_term):
    ws = np.array([-1.0, 0.0, 0.5, 2.0])
    g = terminal_batch(tanh_term, ws)
    for i, w in enumerate(ws):
        assert np.array_equal(g[i], terminal_weight(tanh_term, w))
    b = eval_batch(tanh_term, 0.3, ws)
    # running data of this fixture is constant, so batch returns plain (n,n)
    assert b.A.shape == (1, 1)


def test_validate_zero_problem_clean():
    rep = validate_problem(problems.get_problem("zero"))
    assert rep.ok and rep.violations == []


def test_validate_accepts_indefinite_weights(ex37):
    # indefiniteness is allowed by design; only structure is checked
    rep = validate_problem(ex37)
    assert rep.ok, rep.violations


def test_validate_flags_asymmetric_R():
    dims = Dimensions(1, 2)
    coeffs = CoefficientField.constant(
        A=[[0.0]], B=[[1.0, 0.0]], C=[[0.0]], D=[[0.0, 1.0]], dims=dims)
    weights = WeightField.constant(
        Q=[[0.0]], S=[[0.0], [0.0]], R=[[0.0, 1.0], [0.0, 0.0]], G=[[4.0]],
        dims=dims)
    p = LQProblem(T=1.0, dims=dims, coeffs=coeffs, weights=weights)
    rep = validate_problem(p)
    assert not rep.ok
    assert any("R" in v and "asym" in v.lower() for v in rep.violations)


def test_validate_flags_bound_violation():
    dims = Dimensions(1, 1)
    coeffs = CoefficientField.constant(A=[[0.0]], B=[[1.0]], C=[[0.0]],
                                       D=[[0.0]], dims=dims)
    weights = WeightField(Q=np.zeros((1, 1)), S=np.zeros((1, 1)),
                          R=np.eye(1), G=np.array([[50.0]]), bound=1.0,
                          dims=dims)
    p = LQProblem(T=1.0, dims=dims, coeffs=coeffs, weights=weights)
    rep = validate_problem(p)
    assert any("exceeds declared bound" in v for v in rep.violations)


def test_problem_shape_properties(ex37, std_cond):
    assert (ex37.n, ex37.m) == (1, 2)
    assert (std_cond.n, std_cond.m) == (1, 1)
    assert ex37.is_deterministic
    assert not problems.get_problem("tanh-terminal").is_deterministic


# ---------------------------------------------------------------- fixtures


def test_registry_contents():
    for name in ("example-3-7", "standard-condition", "tanh-terminal",
                 "negated-weights", "suboptimal-zero-control", "zero"):
        fx = problems.get_fixture(name)
        assert fx.name == name
        assert validate_problem(fx.build()).ok, name
    with pytest.raises(ModelError):
        problems.get_fixture("no-such-problem")


def test_negated_weights_expect_failures():
    fx = problems.get_fixture("negated-weights")
    assert fx.expected_failures  # the suite must know these checks fail


def test_shift_R_moves_only_R(ex37):
    q = problems.shift_R(ex37, 0.1)
    b0 = eval_all(ex37, 0.0, 0.0)
    b1 = eval_all(q, 0.0, 0.0)
    assert np.allclose(b1.R, b0.R - 0.1 * np.eye(2))
    assert np.array_equal(b1.Q, b0.Q)
    assert np.array_equal(b1.D, b0.D)


# ------------------------------------------------- inline problem families


def _inline_spec():
    return {
        "T": 1.0,
        "A": {"family": "polynomial-in-t", "coeffs": [[[0.5]], [[0.25]]]},
        "B": {"family": "constant", "value": [[1.2]]},
        "C": {"family": "sin-in-w", "amplitude": [[0.3]]},
        "D": [[0.4]],
        "Q": [[1.0]],
        "S": [[0.0]],
        "R": [[1.0]],
        "G": {"family": "cos-in-w", "amplitude": [[2.0]]},
    }


def test_build_problem_families():
    p = problems.build_problem(_inline_spec())
    assert p.coeffs.kind == KIND_MARKOV          # C depends on w
    assert p.weights.kind == KIND_MARKOV         # G depends on w
    b = eval_all(p, 0.5, 1.0)
    assert b.A[0, 0] == pytest.approx(0.5 + 0.25 * 0.5)
    assert b.B[0, 0] == 1.2
    assert b.C[0, 0] == pytest.approx(0.3 * np.sin(1.0))
    assert terminal_weight(p, 1.0)[0, 0] == pytest.approx(2.0 * np.cos(1.0))
    assert validate_problem(p).ok


def test_build_problem_affine_family_and_kinds():
    spec = _inline_spec()
    spec["C"] = {"family": "affine-in-w", "c0": [[0.1]], "c1": [[0.2]]}
    spec["G"] = [[1.0]]
    p = problems.build_problem(spec)
    assert p.coeffs.kind == KIND_MARKOV
    assert p.weights.kind == KIND_CONSTANT
    b = eval_all(p, 0.0, 2.0)
    assert b.C[0, 0] == pytest.approx(0.1 + 0.2 * 2.0)
    # drop all w and t dependence: kinds collapse accordingly
    spec["A"] = [[0.0]]
    spec["C"] = [[0.0]]
    q = problems.build_problem(spec)
    assert q.coeffs.kind == KIND_CONSTANT
    spec["A"] = {"family": "polynomial-in-t", "coeffs": [[[0.0]], [[1.0]]]}
    r = problems.build_problem(spec)
    assert r.coeffs.kind == KIND_TIME


def test_build_problem_rejects_time_dependent_G():
    spec = _inline_spec()
    spec["G"] = {"family": "polynomial-in-t", "coeffs": [[[1.0]], [[1.0]]]}
    with pytest.raises(ModelError):
        problems.build_problem(spec)


def test_build_problem_named_passthrough():
    p = problems.build_problem({"name": "example-3-7"})
    assert (p.n, p.m) == (1, 2)


def test_build_problem_missing_entry():
    spec = _inline_spec()
    del spec["Q"]
    with pytest.raises(ModelError):
        problems.build_problem(spec)
