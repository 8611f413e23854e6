"""Problem containers for stochastic linear-quadratic control.

A problem instance bundles the state/control dimensions, the horizon, the
SDE coefficients (A, B, C, D) and the cost weights (Q, S, R, G).  Weights may
be indefinite; nothing here assumes positive definiteness.  Coefficients and
weights are either constant matrices, deterministic functions of time, or
Markov functionals of the current Brownian value w.  Instances are immutable
after construction and evaluators are required to be pure functions, so a
problem can be shared freely between carriers and threads.
"""

from dataclasses import dataclass, field

import numpy as np

KIND_CONSTANT = "constant"
KIND_TIME = "deterministic-time-varying"
KIND_MARKOV = "markov-in-brownian"
_KINDS = (KIND_CONSTANT, KIND_TIME, KIND_MARKOV)

# validation probe: 101 x 101 lattice over [0,T] x [-3 sqrt(T), 3 sqrt(T)]
PROBE_POINTS = 101
ASYM_TOL = 1e-12


class ModelError(ValueError):
    pass


def sym(mat):
    """Symmetric part (X + X.T)/2; works on stacked (..., k, k) arrays."""
    return 0.5 * (mat + np.swapaxes(mat, -1, -2))


def _as_evaluator(spec, shape, name):
    """Normalize a matrix literal or callable to a pure (t, w) -> ndarray."""
    if callable(spec):
        return spec
    arr = np.array(spec, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.shape != shape:
        raise ModelError(f"{name}: expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return lambda t, w, _arr=arr: _arr


@dataclass(frozen=True)
class Dimensions:
    n: int
    m: int

    def __post_init__(self):
        if not (isinstance(self.n, (int, np.integer)) and self.n >= 1):
            raise ModelError(f"state dimension must be a positive integer, got {self.n}")
        if not (isinstance(self.m, (int, np.integer)) and self.m >= 1):
            raise ModelError(f"control dimension must be a positive integer, got {self.m}")


@dataclass(frozen=True)
class CoefficientField:
    """SDE coefficients: dX = (AX + Bu)ds + (CX + Du)dW.

    kind declares how much of (t, w) the evaluators actually read; w is
    ignored unless kind is markov-in-brownian.  bound is the declared uniform
    bound on every entry, checked on a probe lattice by validate_problem.
    """

    kind: str
    A: object
    B: object
    C: object
    D: object
    bound: float
    dims: Dimensions
    w_dependent: frozenset = field(init=False)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ModelError(f"unknown coefficient kind {self.kind!r}")
        if not self.bound > 0:
            raise ModelError("declared bound must be positive")
        n, m = self.dims.n, self.dims.m
        wdep = set()
        for name, shape in (("A", (n, n)), ("B", (n, m)), ("C", (n, n)), ("D", (n, m))):
            spec = getattr(self, name)
            if callable(spec) and self.kind == KIND_MARKOV:
                wdep.add(name)
            object.__setattr__(self, name, _as_evaluator(spec, shape, name))
        object.__setattr__(self, "w_dependent", frozenset(wdep))

    @classmethod
    def constant(cls, A, B, C, D, bound=None, dims=None):
        arrs = [np.atleast_2d(np.array(x, dtype=float)) for x in (A, B, C, D)]
        if dims is None:
            dims = Dimensions(arrs[0].shape[0], arrs[1].shape[1])
        if bound is None:
            bound = max(1.0, max(np.max(np.abs(a)) for a in arrs))
        return cls(KIND_CONSTANT, *arrs, bound=float(bound), dims=dims)


@dataclass(frozen=True)
class WeightField:
    """Cost weights: terminal <G X(T), X(T)> and running [Q S'; S R] block.

    Q, R, G are symmetrized at evaluation; indefinite weights are accepted.
    G evaluators take the single argument w (terminal Brownian value).
    """

    Q: object
    S: object
    R: object
    G: object
    bound: float
    dims: Dimensions
    kind: str = KIND_CONSTANT
    w_dependent: frozenset = field(init=False)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ModelError(f"unknown weight kind {self.kind!r}")
        if not self.bound > 0:
            raise ModelError("declared bound must be positive")
        n, m = self.dims.n, self.dims.m
        wdep = set()
        for name, shape in (("Q", (n, n)), ("S", (m, n)), ("R", (m, m))):
            spec = getattr(self, name)
            if callable(spec) and self.kind == KIND_MARKOV:
                wdep.add(name)
            object.__setattr__(self, name, _as_evaluator(spec, shape, name))
        if callable(self.G):
            if self.kind == KIND_MARKOV:
                wdep.add("G")
            g = self.G
            object.__setattr__(self, "G", lambda t, w, _g=g: _g(w))
        else:
            object.__setattr__(self, "G", _as_evaluator(self.G, (n, n), "G"))
        object.__setattr__(self, "w_dependent", frozenset(wdep))

    @classmethod
    def constant(cls, Q, S, R, G, bound=None, dims=None):
        arrs = [np.atleast_2d(np.array(x, dtype=float)) for x in (Q, S, R, G)]
        if dims is None:
            dims = Dimensions(arrs[0].shape[0], arrs[2].shape[0])
        if bound is None:
            bound = max(1.0, max(np.max(np.abs(a)) for a in arrs))
        return cls(*arrs, bound=float(bound), dims=dims, kind=KIND_CONSTANT)


@dataclass(frozen=True)
class LQProblem:
    dims: Dimensions
    T: float
    coeffs: CoefficientField
    weights: WeightField

    def __post_init__(self):
        if not self.T > 0:
            raise ModelError(f"horizon must be positive, got {self.T}")

    @property
    def n(self):
        return self.dims.n

    @property
    def m(self):
        return self.dims.m

    @property
    def is_deterministic(self):
        return self.coeffs.kind != KIND_MARKOV and self.weights.kind != KIND_MARKOV


@dataclass(frozen=True)
class CoefficientBundle:
    """One evaluation of the running coefficients at fixed (t, w).

    From eval_batch, entries are (k, r, c) stacks for w-dependent components
    and plain (r, c) matrices otherwise; matmul broadcasting does the rest.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    Q: np.ndarray
    S: np.ndarray
    R: np.ndarray


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def __str__(self):
        if self.ok:
            return "accepted: no violations"
        return "\n".join(self.violations)


@dataclass(frozen=True)
class ConvexityCertificate:
    """Minimum Rayleigh quotient of the cost quadratic over sampled controls.

    delta is an upper bound on the true uniform-convexity constant; a
    negative delta certifies non-convexity, a positive one is evidence
    (not proof) of uniform convexity.
    """

    delta: float
    samples: int
    t0: float


def eval_all(p, t, w):
    """Evaluate every running coefficient and weight of p at scalar (t, w).

    Q and R come back symmetrized.  Raises ModelError when t falls outside
    [0, T].  The terminal weight is evaluated separately by terminal_weight.
    """
    if not 0.0 <= t <= p.T:
        raise ModelError(f"time {t} outside [0, {p.T}]")
    c, wf = p.coeffs, p.weights
    return CoefficientBundle(
        A=np.asarray(c.A(t, w), dtype=float),
        B=np.asarray(c.B(t, w), dtype=float),
        C=np.asarray(c.C(t, w), dtype=float),
        D=np.asarray(c.D(t, w), dtype=float),
        Q=sym(np.asarray(wf.Q(t, w), dtype=float)),
        S=np.asarray(wf.S(t, w), dtype=float),
        R=sym(np.asarray(wf.R(t, w), dtype=float)),
    )


def terminal_weight(p, w):
    """Terminal weight G at the Brownian value w, symmetrized."""
    return sym(np.asarray(p.weights.G(p.T, w), dtype=float))


def _stack(f, t, w_values):
    return np.stack([np.asarray(f(t, w), dtype=float) for w in w_values])


def eval_batch(p, t, w_values):
    """Evaluate running coefficients at fixed t over many Brownian values.

    Only genuinely w-dependent components get stacked per value; everything
    else is evaluated once at (t, 0) and broadcast downstream.
    """
    w_values = np.asarray(w_values, dtype=float)
    out = {}
    for name in ("A", "B", "C", "D"):
        f = getattr(p.coeffs, name)
        if name in p.coeffs.w_dependent:
            out[name] = _stack(f, t, w_values)
        else:
            out[name] = np.asarray(f(t, 0.0), dtype=float)
    for name in ("Q", "S", "R"):
        f = getattr(p.weights, name)
        if name in p.weights.w_dependent:
            val = _stack(f, t, w_values)
        else:
            val = np.asarray(f(t, 0.0), dtype=float)
        out[name] = sym(val) if name in ("Q", "R") else val
    return CoefficientBundle(**out)


def terminal_batch(p, w_values):
    """Terminal weight over many Brownian values; (k, n, n) iff w-dependent."""
    w_values = np.asarray(w_values, dtype=float)
    if "G" in p.weights.w_dependent:
        return sym(_stack(p.weights.G, p.T, w_values))
    return sym(np.asarray(p.weights.G(p.T, 0.0), dtype=float))


def validate_problem(p):
    """Probe p against its declared assumptions and report violations.

    Checks, over a PROBE_POINTS x PROBE_POINTS lattice of (t, w) with
    w in [-3 sqrt(T), 3 sqrt(T)]: evaluator failures, shape mismatches,
    entries exceeding the declared bound, and raw asymmetry of Q, R, G
    beyond ASYM_TOL (before the symmetrization eval_all applies).
    An empty violation list means the problem is accepted.
    """
    report = ValidationReport()
    n, m = p.n, p.m
    shapes = {"A": (n, n), "B": (n, m), "C": (n, n), "D": (n, m),
              "Q": (n, n), "S": (m, n), "R": (m, m), "G": (n, n)}
    evaluators = {"A": p.coeffs.A, "B": p.coeffs.B, "C": p.coeffs.C, "D": p.coeffs.D,
                  "Q": p.weights.Q, "S": p.weights.S, "R": p.weights.R, "G": p.weights.G}
    bounds = {name: (p.coeffs.bound if name in "ABCD" else p.weights.bound)
              for name in evaluators}
    ts = np.linspace(0.0, p.T, PROBE_POINTS)
    ws = np.linspace(-3.0 * np.sqrt(p.T), 3.0 * np.sqrt(p.T), PROBE_POINTS)

    for name, f in evaluators.items():
        worst_entry = 0.0
        worst_asym = 0.0
        aborted = False
        for t in ts:
            for w in ws:
                try:
                    val = np.asarray(f(t, w), dtype=float)
                except Exception as exc:  # evaluator failure is a report entry
                    report.violations.append(
                        f"{name}: evaluator failed at (t={t:.4g}, w={w:.4g}): {exc!r}")
                    aborted = True
                    break
                if val.shape != shapes[name]:
                    report.violations.append(
                        f"{name}: shape {val.shape} != expected {shapes[name]}")
                    aborted = True
                    break
                worst_entry = max(worst_entry, float(np.max(np.abs(val))))
                if name in ("Q", "R", "G"):
                    worst_asym = max(worst_asym, float(np.max(np.abs(val - val.T))))
            if aborted:
                break
        if worst_entry > bounds[name]:
            report.violations.append(
                f"{name}: probe max entry {worst_entry:.6g} exceeds declared bound "
                f"{bounds[name]:.6g}")
        if worst_asym > ASYM_TOL:
            report.violations.append(
                f"{name}: asymmetry {worst_asym:.3g} beyond {ASYM_TOL} before symmetrization")
    return report
