"""Numerical laboratory for stochastic linear-quadratic control with
possibly indefinite weights and Brownian-functional coefficients.

Three independent solution routes (binary-tree dynamic programming,
conjugate gradients on the control-space operator equation, and a
stochastic Riccati equation solved on the tree or by regression Monte
Carlo) plus a verification suite that cross-checks them against each
other and against the identities any optimal control must satisfy.
"""

__version__ = "0.1.0"

from .model import (
    CoefficientField,
    ConvexityCertificate,
    Dimensions,
    KIND_CONSTANT,
    KIND_MARKOV,
    KIND_TIME,
    LQProblem,
    ModelError,
    ValidationReport,
    WeightField,
    validate_problem,
)
from .lattice import (
    BernoulliTree,
    DPSolution,
    IndefiniteHessian,
    LatticeError,
    TreeProcess,
    backward_bsde_tree,
    build_tree,
    closed_loop_rollout,
    cond_expect,
    cost_on_tree,
    dp_solve,
    dp_value,
    forward_dynamics,
    increment_projection,
    tree_coefficients,
)
from .sim import (
    FeedbackPolicy,
    OpenLoopPolicy,
    PathEnsemble,
    SimulationError,
    StateEnsemble,
    ZeroPolicy,
    evaluate_cost,
    generate_ensemble,
    simulate,
)
from .bsde import (
    BsdeError,
    MNSolution,
    RegressionBasis,
    RegressionError,
    regress,
    solve_MN,
    solve_adjoint,
    solve_adjoint_tree,
)
from .riccati import (
    GainError,
    RiccatiBlowup,
    RiccatiSolution,
    feedback_gain,
    solve_riccati_ode,
    solve_sre_lsmc,
    solve_sre_tree,
)
from .operators import (
    CGResult,
    ConvergenceError,
    NotUniformlyConvex,
    OperatorContext,
    OperatorError,
    apply_L,
    apply_N,
    control_cost,
    convexity_probe,
    inner_product,
    solve_open_loop_cg,
)
from .verify import CheckReport, run_suite, suite_ok
from .problems import FixtureSpec, REGISTRY, build_problem, get_fixture, get_problem

__all__ = [
    "__version__",
    "BernoulliTree", "BsdeError", "CGResult", "CheckReport",
    "CoefficientField", "ConvergenceError", "ConvexityCertificate",
    "DPSolution", "Dimensions", "FeedbackPolicy", "FixtureSpec", "GainError",
    "IndefiniteHessian", "KIND_CONSTANT", "KIND_MARKOV", "KIND_TIME",
    "LQProblem", "LatticeError", "MNSolution", "ModelError",
    "NotUniformlyConvex", "OpenLoopPolicy", "OperatorContext",
    "OperatorError", "PathEnsemble", "REGISTRY", "RegressionBasis",
    "RegressionError", "RiccatiBlowup", "RiccatiSolution", "SimulationError",
    "StateEnsemble", "TreeProcess", "ValidationReport", "WeightField",
    "ZeroPolicy", "apply_L", "apply_N", "backward_bsde_tree",
    "build_problem", "build_tree", "closed_loop_rollout", "cond_expect",
    "control_cost", "convexity_probe", "cost_on_tree", "dp_solve",
    "dp_value", "evaluate_cost", "feedback_gain", "forward_dynamics",
    "generate_ensemble", "get_fixture", "get_problem", "increment_projection",
    "inner_product", "regress", "run_suite", "simulate", "solve_MN",
    "solve_adjoint", "solve_adjoint_tree", "solve_open_loop_cg",
    "solve_riccati_ode", "solve_sre_lsmc", "solve_sre_tree", "suite_ok",
    "tree_coefficients", "validate_problem",
]
