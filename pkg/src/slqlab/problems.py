"""Built-in benchmark problems and negative-control fixtures.

example-3-7 is the workhorse: a scalar state with a two-channel control,
R = diag(5, -1) indefinite, yet uniformly convex because the negative
channel only acts through the diffusion.  Its value function is known in
closed form, P(t) = 20/(9 - 4t), which makes it the analytic oracle for
every route.  standard-condition is the classical positive-definite regime;
tanh-terminal has a genuinely random terminal weight so the Riccati pair
keeps a nonzero martingale part.  The negated and zero-control fixtures
exist to prove the verification suite can fail.
"""

from dataclasses import dataclass, field

import numpy as np

from .model import (CoefficientField, Dimensions, KIND_CONSTANT, KIND_MARKOV,
                    KIND_TIME, LQProblem, ModelError, WeightField)


@dataclass(frozen=True)
class FixtureSpec:
    """A named problem plus how the verification suite should treat it.

    suite: check names to run (None = all); expected_failures: the subset
    that must fail; control_override: "zero" replaces the optimizer output
    in control-dependent checks (the deliberately suboptimal fixture).
    """

    name: str
    build: object
    xi: tuple
    known_value: float = None
    suite: tuple = None
    expected_failures: frozenset = frozenset()
    control_override: str = None
    analytic: dict = field(default_factory=dict)
    notes: str = ""


def _example_3_7():
    dims = Dimensions(1, 2)
    coeffs = CoefficientField.constant(
        A=[[0.0]], B=[[1.0, 0.0]], C=[[0.0]], D=[[0.0, 1.0]], dims=dims)
    weights = WeightField.constant(
        Q=[[0.0]], S=[[0.0], [0.0]], R=[[5.0, 0.0], [0.0, -1.0]], G=[[4.0]],
        dims=dims, bound=5.0)
    return LQProblem(dims=dims, T=1.0, coeffs=coeffs, weights=weights)


def _p_37(t):
    return 20.0 / (9.0 - 4.0 * t)


def _gain_37(t):
    return np.array([[-_p_37(t) / 5.0], [0.0]])


def _lambda_min_37(t):
    return min(5.0, (11.0 + 4.0 * t) / (9.0 - 4.0 * t))


def _standard_condition():
    dims = Dimensions(1, 1)
    coeffs = CoefficientField.constant(
        A=[[1.0]], B=[[1.0]], C=[[1.0]], D=[[1.0]], dims=dims)
    weights = WeightField.constant(
        Q=[[1.0]], S=[[0.0]], R=[[1.0]], G=[[1.0]], dims=dims)
    return LQProblem(dims=dims, T=1.0, coeffs=coeffs, weights=weights)


def _tanh_terminal():
    dims = Dimensions(1, 1)
    coeffs = CoefficientField.constant(
        A=[[0.0]], B=[[0.0]], C=[[0.0]], D=[[0.0]], dims=dims)
    weights = WeightField(
        Q=[[0.0]], S=[[0.0]], R=[[1.0]],
        G=lambda w: np.array([[2.0 + np.tanh(w)]]),
        bound=3.0, dims=dims, kind=KIND_MARKOV)
    return LQProblem(dims=dims, T=1.0, coeffs=coeffs, weights=weights)


def _negated_weights():
    dims = Dimensions(1, 2)
    coeffs = CoefficientField.constant(
        A=[[0.0]], B=[[1.0, 0.0]], C=[[0.0]], D=[[0.0, 1.0]], dims=dims)
    weights = WeightField.constant(
        Q=[[0.0]], S=[[0.0], [0.0]], R=[[-5.0, 0.0], [0.0, 1.0]], G=[[-4.0]],
        dims=dims, bound=5.0)
    return LQProblem(dims=dims, T=1.0, coeffs=coeffs, weights=weights)


def _zero_problem():
    dims = Dimensions(1, 1)
    coeffs = CoefficientField.constant(
        A=[[0.0]], B=[[0.0]], C=[[0.0]], D=[[0.0]], dims=dims)
    weights = WeightField.constant(
        Q=[[0.0]], S=[[0.0]], R=[[0.0]], G=[[0.0]], dims=dims)
    return LQProblem(dims=dims, T=1.0, coeffs=coeffs, weights=weights)


_SUBOPTIMAL_SUITE = ("stationarity", "optimality-principle",
                     "value-representation", "closed-loop-dp",
                     "cost-perturbation")

REGISTRY = {
    "example-3-7": FixtureSpec(
        name="example-3-7", build=_example_3_7, xi=(1.0,),
        known_value=20.0 / 9.0,
        analytic={"P": _p_37, "gain": _gain_37, "lambda_min": _lambda_min_37},
        notes="indefinite R, uniformly convex; closed-form value 20/9"),
    "standard-condition": FixtureSpec(
        name="standard-condition", build=_standard_condition, xi=(1.0,),
        notes="classical positive-definite weights, scalar unit coefficients"),
    "tanh-terminal": FixtureSpec(
        name="tanh-terminal", build=_tanh_terminal, xi=(1.0,),
        known_value=2.0,
        suite=("convexity-probe", "stationarity", "value-representation",
               "closed-loop-dp", "cost-perturbation"),
        notes="random terminal weight G = (2 + tanh w) I, frozen dynamics; "
              "value E[G(W_T)] = 2 for xi = 1"),
    "negated-weights": FixtureSpec(
        name="negated-weights", build=_negated_weights, xi=(1.0,),
        suite=("convexity-probe", "stationarity", "closed-loop-dp",
               "cost-perturbation"),
        expected_failures=frozenset(
            ("convexity-probe", "stationarity", "closed-loop-dp",
             "cost-perturbation")),
        notes="weights negated: concave cost, every solver must refuse"),
    "suboptimal-zero-control": FixtureSpec(
        name="suboptimal-zero-control", build=_example_3_7, xi=(1.0,),
        suite=_SUBOPTIMAL_SUITE,
        expected_failures=frozenset(_SUBOPTIMAL_SUITE),
        control_override="zero",
        notes="sound problem, wrong control: checks must detect it"),
    "zero": FixtureSpec(
        name="zero", build=_zero_problem, xi=(1.0,),
        known_value=0.0,
        suite=("stationarity", "optimality-principle"),
        notes="all weights zero; value 0, control irrelevant"),
}


def get_fixture(name):
    try:
        return REGISTRY[name]
    except KeyError:
        raise ModelError(
            f"unknown fixture {name!r}; built-ins: {', '.join(sorted(REGISTRY))}")


def get_problem(name):
    return get_fixture(name).build()


_FAMILIES = ("constant", "polynomial-in-t", "sin-in-w", "cos-in-w", "affine-in-w")


def _family_entry(entry, T):
    """Config entry -> (evaluator-or-matrix, uses_t, uses_w, entry bound).

    A bare nested list is a constant matrix literal (row-major); a mapping
    picks one of the named families.  The returned bound covers the probe
    window |w| <= 3 sqrt(T) used by validate_problem.
    """
    if not isinstance(entry, dict):
        M = np.atleast_2d(np.asarray(entry, dtype=float))
        return M, False, False, float(np.abs(M).max())
    fam = entry.get("family")
    if fam == "constant":
        M = np.atleast_2d(np.asarray(entry["value"], dtype=float))
        return M, False, False, float(np.abs(M).max())
    if fam == "polynomial-in-t":
        mats = [np.atleast_2d(np.asarray(c, dtype=float)) for c in entry["coeffs"]]

        def poly(t, w, _m=tuple(mats)):
            out = np.zeros_like(_m[0])
            for i, c in enumerate(_m):
                out = out + c * float(t) ** i
            return out
        bound = float(sum(np.abs(c).max() * T**i for i, c in enumerate(mats)))
        return poly, True, False, bound
    if fam in ("sin-in-w", "cos-in-w"):
        amp = np.atleast_2d(np.asarray(entry["amplitude"], dtype=float))
        trig = np.sin if fam == "sin-in-w" else np.cos
        return (lambda t, w, _a=amp, _f=trig: _a * _f(w)), False, True, \
            float(np.abs(amp).max())
    if fam == "affine-in-w":
        c0 = np.atleast_2d(np.asarray(entry["c0"], dtype=float))
        c1 = np.atleast_2d(np.asarray(entry["c1"], dtype=float))
        bound = float((np.abs(c0) + 3.0 * np.sqrt(T) * np.abs(c1)).max())
        return (lambda t, w, _0=c0, _1=c1: _0 + _1 * w), False, True, \
            bound * (1.0 + 1e-12)
    raise ModelError(f"unknown coefficient family {fam!r}; known: {_FAMILIES}")


def _field_kind(uses_t, uses_w):
    if any(uses_w):
        return KIND_MARKOV
    if any(uses_t):
        return KIND_TIME
    return KIND_CONSTANT


def build_problem(spec):
    """Build an LQProblem from a plain config mapping.

    Either {"name": "<built-in>"} or inline entries A,B,C,D,Q,S,R,G plus T.
    Each entry is a matrix literal (constant) or a {"family": ...} mapping;
    see _family_entry for the families.  G admits the constant and in-w
    families only (it is a functional of W(T) alone).
    """
    if "name" in spec:
        return get_problem(spec["name"])
    parsed = {}
    uses_t = {}
    uses_w = {}
    bounds = {}
    for key in ("A", "B", "C", "D", "Q", "S", "R", "G"):
        try:
            entry = spec[key]
        except KeyError:
            raise ModelError(f"problem config missing entry '{key}'")
        try:
            T = float(spec["T"])
        except KeyError:
            raise ModelError("problem config missing entry 'T'")
        parsed[key], uses_t[key], uses_w[key], bounds[key] = _family_entry(entry, T)
    if uses_t["G"]:
        raise ModelError("terminal weight G cannot depend on t")
    if callable(parsed["G"]):
        g = parsed["G"]
        parsed["G"] = lambda w, _g=g: _g(None, w)

    probe = {k: (parsed[k](0.0, 0.0) if callable(parsed[k]) and k != "G"
                 else parsed[k](0.0) if callable(parsed[k]) else parsed[k])
             for k in parsed}
    dims = Dimensions(np.atleast_2d(probe["A"]).shape[0],
                      np.atleast_2d(probe["B"]).shape[1])

    ck = _field_kind([uses_t[k] for k in "ABCD"], [uses_w[k] for k in "ABCD"])
    wk = _field_kind([uses_t[k] for k in "QSR"],
                     [uses_w[k] for k in ("Q", "S", "R", "G")])
    cbound = spec.get("bound") or max(1.0, *(bounds[k] for k in "ABCD"))
    wbound = spec.get("weight_bound") or max(1.0, *(bounds[k] for k in
                                                    ("Q", "S", "R", "G")))
    coeffs = CoefficientField(ck, parsed["A"], parsed["B"], parsed["C"],
                              parsed["D"], bound=float(cbound), dims=dims)
    weights = WeightField(parsed["Q"], parsed["S"], parsed["R"], parsed["G"],
                          bound=float(wbound), dims=dims, kind=wk)
    return LQProblem(dims=dims, T=float(spec["T"]), coeffs=coeffs, weights=weights)


def shift_R(p, eps):
    """Same problem with running weight R replaced by R - eps I.

    The comparison principle says the value kernel cannot increase when the
    control is made cheaper to criticize: P_eps(0) <= P(0).  Used as a
    monotonicity test on the Riccati routes.
    """
    m = p.m
    R_old = p.weights.R
    eye = np.eye(m)
    # p.weights.G is already normalized to (t, w); re-expose it as g(w)
    # since WeightField wraps raw callables that way
    weights = WeightField(
        Q=p.weights.Q, S=p.weights.S,
        R=lambda t, w: np.asarray(R_old(t, w), dtype=float) - eps * eye,
        G=lambda w, _g=p.weights.G, _T=p.T: _g(_T, w),
        bound=p.weights.bound + abs(eps), dims=p.dims,
        kind=p.weights.kind)
    return LQProblem(dims=p.dims, T=p.T, coeffs=p.coeffs, weights=weights)
