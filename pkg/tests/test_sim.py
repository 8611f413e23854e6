"""Path ensembles, forward Euler simulation, and Monte Carlo cost."""

import numpy as np
import pytest

from slqlab import problems
from slqlab.sim import (
    FeedbackPolicy,
    OpenLoopPolicy,
    SimulationError,
    ZeroPolicy,
    ensemble_to_csv,
    evaluate_cost,
    generate_ensemble,
    simulate,
)

SEED = 20260814


def test_ensemble_reproducible_bitwise():
    a = generate_ensemble(50, 200, 1.0, SEED)
    b = generate_ensemble(50, 200, 1.0, SEED)
    assert np.array_equal(a.dW, b.dW)
    assert np.array_equal(a.W, b.W)
    c = generate_ensemble(50, 200, 1.0, SEED + 1)
    assert not np.array_equal(a.dW, c.dW)


def test_ensemble_starts_at_zero_and_is_readonly():
    ens = generate_ensemble(10, 7, 2.0, 3)
    assert np.all(ens.W[:, 0] == 0.0)
    with pytest.raises(ValueError):
        ens.W[0, 0] = 1.0


def test_ensemble_moment_posts():
    ens = generate_ensemble(40, 100000, 1.0, SEED)
    wT = ens.W[:, -1]
    assert abs(wT.mean()) <= 5.0 * np.sqrt(1.0 / ens.M_paths)
    v = wT.var(ddof=1)
    assert abs(v - 1.0) <= 5.0 * np.sqrt(2.0 / ens.M_paths)
    assert 0.98 <= v <= 1.02


def test_ensemble_rejects_degenerate():
    with pytest.raises(SimulationError):
        generate_ensemble(0, 10, 1.0, 1)
    with pytest.raises(SimulationError):
        generate_ensemble(10, 0, 1.0, 1)


def test_single_step_is_one_draw():
    ens = generate_ensemble(1, 1000, 3.0, SEED)
    assert ens.dW.shape == (1000, 1)
    assert abs(ens.W[:, 1].var(ddof=1) - 3.0) <= 0.5


def test_simulate_zero_coefficients_freeze():
    p = problems.get_problem("zero")
    ens = generate_ensemble(20, 50, 1.0, SEED)
    se = simulate(p, ZeroPolicy(p.m), [2.5], ens)
    assert np.all(se.X == 2.5)


def test_simulate_pure_drift_product():
    spec = {"T": 1.0, "A": [[1.0]], "B": [[0.0]], "C": [[0.0]], "D": [[0.0]],
            "Q": [[0.0]], "S": [[0.0]], "R": [[1.0]], "G": [[1.0]]}
    p = problems.build_problem(spec)
    ens = generate_ensemble(4, 10, 1.0, SEED)
    se = simulate(p, ZeroPolicy(1), [1.0], ens)
    assert np.all(se.X[:, -1, :] == 1.25**4)


def test_cost_zero_state(ex37):
    ens = generate_ensemble(10, 100, 1.0, SEED)
    se = simulate(ex37, ZeroPolicy(ex37.m), [0.0], ens)
    assert evaluate_cost(ex37, se) == (0.0, 0.0)


def test_cost_frozen_state(ex37):
    # A = C = 0 and zero control leave X at 1; cost is exactly G = 4
    ens = generate_ensemble(25, 300, 1.0, SEED)
    se = simulate(ex37, ZeroPolicy(ex37.m), [1.0], ens)
    mean, stderr = evaluate_cost(ex37, se)
    assert mean == 4.0 and stderr == 0.0


def test_state_map_linearity(ex37):
    ens = generate_ensemble(30, 40, 1.0, SEED)
    rng = np.random.default_rng(SEED)
    u1 = OpenLoopPolicy(rng.standard_normal((40, 30, 2)))
    u2 = OpenLoopPolicy(rng.standard_normal((40, 30, 2)))
    s1 = simulate(ex37, u1, [1.0], ens)
    s2 = simulate(ex37, u2, [0.5], ens)
    s12 = simulate(ex37, OpenLoopPolicy(u1.table + u2.table), [1.5], ens)
    assert np.abs(s12.X - (s1.X + s2.X)).max() <= 1e-10


def test_open_loop_generator_is_adapted():
    ens = generate_ensemble(5, 8, 1.0, SEED)
    pol = OpenLoopPolicy.from_generator(
        ens, lambda k, t, w: np.stack([w, 0 * w], axis=-1), m=2)
    for k in range(5):
        assert np.array_equal(pol.table[:, k, 0], ens.W[:, k])


def test_feedback_policy_applies_gain(ex37):
    ens = generate_ensemble(8, 16, 1.0, SEED)
    pol = FeedbackPolicy(lambda t, w: np.array([[-0.5], [0.0]]))
    se = simulate(ex37, pol, [1.0], ens)
    assert np.allclose(se.u[:, 0, 0], -0.5 * se.X[:, 0, 0])
    assert np.all(se.u[:, :, 1] == 0.0)


def test_grid_refinement_without_noise():
    # uncontrolled deterministic problem: discrete cost converges first order
    spec = {"T": 1.0, "A": [[1.0]], "B": [[0.0]], "C": [[0.0]], "D": [[0.0]],
            "Q": [[1.0]], "S": [[0.0]], "R": [[1.0]], "G": [[1.0]]}
    p = problems.build_problem(spec)
    exact = (np.e**2 - 1.0) / 2.0 + np.e**2  # int_0^1 e^{2t} dt + e^2
    errs = []
    for N in (10, 20, 40, 80):
        ens = generate_ensemble(N, 3, 1.0, SEED)
        mean, _ = evaluate_cost(p, simulate(p, ZeroPolicy(1), [1.0], ens))
        errs.append(abs(mean - exact))
    assert all(errs[i + 1] < errs[i] for i in range(len(errs) - 1))
    # first-order ratio roughly 2 per halving
    assert 1.5 <= errs[0] / errs[1] <= 2.5


def test_feedback_benchmark_band(ex37):
    from slqlab.riccati import ode_gain_function, solve_riccati_ode

    sol = solve_riccati_ode(ex37, 2000)
    ens = generate_ensemble(100, 2000, 1.0, SEED)
    se = simulate(ex37, FeedbackPolicy(ode_gain_function(sol, ex37)), [1.0], ens)
    mean, stderr = evaluate_cost(ex37, se)
    assert abs(mean - 20.0 / 9.0) <= 3.0 * stderr + 0.02


@pytest.mark.filterwarnings("ignore:overflow")
def test_simulate_overflow_is_an_error():
    spec = {"T": 1.0, "A": [[1.0]], "B": [[0.0]], "C": [[0.0]], "D": [[0.0]],
            "Q": [[0.0]], "S": [[0.0]], "R": [[1.0]], "G": [[1.0]]}
    p = problems.build_problem(spec)
    ens = generate_ensemble(8, 4, 1.0, SEED)
    with pytest.raises(SimulationError) as exc:
        simulate(p, ZeroPolicy(1), [1e308], ens)
    assert "path" in str(exc.value) and "step" in str(exc.value)


def test_ensemble_csv_layout(tmp_path, ex37):
    ens = generate_ensemble(3, 5, 1.0, SEED)
    se = simulate(ex37, ZeroPolicy(ex37.m), [1.0], ens)
    out = tmp_path / "paths.csv"
    ensemble_to_csv(se, str(out), max_paths=2)
    lines = out.read_text().strip().splitlines()
    assert lines[0].split(",")[:4] == ["path", "step", "t", "W"]
    assert len(lines) == 1 + 2 * 4  # header + 2 paths x (N+1) steps
