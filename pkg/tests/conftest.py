"""Shared fixtures: small trees and contexts reused across unit tests.

Session scope keeps the repeated DP/CG work out of every test; acceptance
tests build everything fresh inside their own timers and do not use these.
"""

import numpy as np
import pytest

from slqlab import lattice, operators, problems

SEED = 20260814


@pytest.fixture(scope="session")
def ex37():
    return problems.get_problem("example-3-7")


@pytest.fixture(scope="session")
def std_cond():
    return problems.get_problem("standard-condition")


@pytest.fixture(scope="session")
def tanh_term():
    return problems.get_problem("tanh-terminal")


@pytest.fixture(scope="session")
def ex37_tc8(ex37):
    return lattice.tree_coefficients(ex37, lattice.build_tree(8, ex37.T))


@pytest.fixture(scope="session")
def ex37_ctx8(ex37, ex37_tc8):
    return operators.OperatorContext.on_tree(ex37, ex37_tc8)


@pytest.fixture(scope="session")
def ex37_dp8(ex37, ex37_tc8):
    return lattice.dp_solve(ex37, ex37_tc8)


@pytest.fixture(scope="session")
def ex37_cg8(ex37_ctx8):
    return operators.solve_open_loop_cg(ex37_ctx8, np.array([1.0]), tol=1e-12)


@pytest.fixture()
def rng():
    return np.random.default_rng(SEED)
