"""Function-space route: the cost as a quadratic form in the control.

For fixed initial data, J(t0, xi; u) = [[N u, u]] + 2 [[L xi, u]] + const,
where [[.,.]] is the control-space inner product E integral <u,v> ds and
both operators are realized by one forward state solve plus one backward
adjoint solve, assembled pointwise as B'Ybar + D'Z + S X + R u.  The open
loop optimum solves N u = -L xi, done here matrix-free by conjugate
gradient in [[.,.]].  On the tree every expectation is exact, so CG
converges to the same discrete optimum as dynamic programming; that
agreement is one of the main cross-checks of this package.

The assembly uses Ybar = E[Y_{k+1} | node], the same conditional mean the
backward step itself uses.  With that convention the discrete quadratic
form matches the discrete cost exactly (not just to O(dt)): perturbing u by
v changes the cost by exactly 2 [[assembly, v]] dt-summed, which is what
makes the stationarity and gap checks hold at 1e-10 rather than at
discretization scale.
"""

from dataclasses import dataclass, field

import numpy as np

from . import bsde as bsde_mod
from . import lattice
from . import sim as sim_mod
from .lattice import TreeProcess, _mT, _mm, cond_expect, increment_projection
from .model import ConvexityCertificate, eval_batch


class OperatorError(RuntimeError):
    pass


class NotUniformlyConvex(OperatorError):
    """CG met a direction of non-positive curvature: [[N d, d]] <= 0."""

    def __init__(self, iteration, curvature):
        self.iteration = int(iteration)
        self.curvature = float(curvature)
        super().__init__(
            f"non-positive curvature {self.curvature:.6g} at CG iteration "
            f"{self.iteration}; the cost functional is not uniformly convex "
            "on this carrier")


class ConvergenceError(OperatorError):
    def __init__(self, iterations, residual):
        self.iterations = iterations
        self.residual = residual
        super().__init__(
            f"CG did not reach tolerance in {iterations} iterations "
            f"(relative residual {residual:.3g})")


@dataclass
class OperatorContext:
    """Carrier-bound context: tree for exact mode, ensemble for diagnostics.

    k0 is the initial grid level; controls live on levels/steps k0..N-1 and
    the inner product sums only that range.  CG certification requires the
    tree carrier (regression noise breaks exact self-adjointness).
    """

    problem: object
    tc: object = None
    ens: object = None
    basis: object = None
    k0: int = 0

    @classmethod
    def on_tree(cls, p, tree_or_depth, k0=0):
        if isinstance(tree_or_depth, (int, np.integer)):
            tree_or_depth = lattice.build_tree(tree_or_depth, p.T)
        if isinstance(tree_or_depth, lattice.BernoulliTree):
            tc = lattice.tree_coefficients(p, tree_or_depth)
        else:
            tc = tree_or_depth
        return cls(problem=p, tc=tc, k0=int(k0))

    @classmethod
    def on_ensemble(cls, p, ens, basis=None):
        return cls(problem=p, ens=ens, basis=basis)

    @property
    def is_tree(self):
        return self.tc is not None

    @property
    def t0(self):
        if self.is_tree:
            return float(self.tc.tree.times[self.k0])
        return 0.0


def zero_control(ctx):
    tree = ctx.tc.tree
    m = ctx.problem.m
    return TreeProcess(tree=tree, values=[np.zeros((2**k, m)) for k in range(tree.N)])


def _check_carrier(ctx, u):
    if not isinstance(u, TreeProcess) or u.tree is not ctx.tc.tree:
        raise OperatorError("control lives on a different carrier than the context")


def inner_product(ctx, u, v):
    """[[u, v]] = sum_k E<u_k, v_k> dt over the active levels/steps."""
    if ctx.is_tree:
        _check_carrier(ctx, u)
        _check_carrier(ctx, v)
        dt = ctx.tc.tree.dt
        total = 0.0
        for k in range(ctx.k0, ctx.tc.tree.N):
            total += float(np.einsum("ji,ji->", u.values[k], v.values[k])
                           / u.values[k].shape[0]) * dt
        return total
    a = np.asarray(u, dtype=float)
    b = np.asarray(v, dtype=float)
    if a.shape != b.shape:
        raise OperatorError("control tables differ in shape")
    return float(np.einsum("pki,pki->", a, b) / a.shape[0]) * ctx.ens.dt


def norm(ctx, u):
    return float(np.sqrt(max(inner_product(ctx, u, u), 0.0)))


def _sweep_tree(ctx, xi, u):
    """Forward state + backward adjoint + pointwise assembly, all exact.

    xi is the level-k0 state (vector broadcast or (2^k0, n) array) or None
    for zero; u a control TreeProcess or None for zero.  Returns
    (r, X, Y_levels) with r the assembled TreeProcess on levels 0..N-1
    (zeros below k0).
    """
    tc = ctx.tc
    tree = tc.tree
    p = ctx.problem
    n, m = p.n, p.m
    k0 = ctx.k0
    x_levels = [np.zeros((2**k, n)) for k in range(k0)]
    if xi is None:
        x_levels.append(np.zeros((2**k0, n)))
    else:
        xi = np.asarray(xi, dtype=float)
        if xi.ndim == 1:
            x_levels.append(np.broadcast_to(xi, (2**k0, n)).copy())
        else:
            x_levels.append(xi.reshape(2**k0, n).copy())
    for k in range(k0, tree.N):
        x = x_levels[k]
        x_up = _mm(tc.F_up[k], x)
        x_dn = _mm(tc.F_dn[k], x)
        if u is not None:
            uk = u.values[k]
            x_up = x_up + _mm(tc.G_up[k], uk)
            x_dn = x_dn + _mm(tc.G_dn[k], uk)
        x_levels.append(lattice._interleave(x_up, x_dn))
    X = TreeProcess(tree=tree, values=x_levels)

    y_levels = [None] * (tree.N + 1)
    r_levels = [np.zeros((2**k, m)) for k in range(tree.N)]
    y_levels[tree.N] = _mm(tc.terminal, x_levels[tree.N])
    for k in range(tree.N - 1, -1, -1):
        ybar = cond_expect(y_levels[k + 1])
        z = increment_projection(y_levels[k + 1], tree.sqrt_dt)
        b = tc.running[k]
        drv = _mm(_mT(b.A), ybar) + _mm(_mT(b.C), z) + _mm(b.Q, x_levels[k])
        if u is not None:
            drv = drv + _mm(_mT(b.S), u.values[k])
        y_levels[k] = ybar + drv * tree.dt
        if k >= k0:
            rk = _mm(_mT(b.B), ybar) + _mm(_mT(b.D), z) + _mm(b.S, x_levels[k])
            if u is not None:
                rk = rk + _mm(b.R, u.values[k])
            r_levels[k] = rk
    r = TreeProcess(tree=tree, values=r_levels)
    return r, X, TreeProcess(tree=tree, values=y_levels)


def apply_N(ctx, u):
    """N u: state from zero initial data under u, adjoint back, assemble."""
    if ctx.is_tree:
        _check_carrier(ctx, u)
        r, _, _ = _sweep_tree(ctx, None, u)
        return r
    return _apply_ensemble(ctx, np.zeros(ctx.problem.n), np.asarray(u, dtype=float))


def apply_L(ctx, xi):
    """L xi: uncontrolled state from xi, adjoint back, assemble (no Ru term)."""
    if ctx.is_tree:
        r, _, _ = _sweep_tree(ctx, xi, None)
        return r
    return _apply_ensemble(ctx, xi, None)


def _apply_ensemble(ctx, xi, table):
    """Regression-mode operator application; diagnostics only, not for CG."""
    p = ctx.problem
    ens = ctx.ens
    policy = sim_mod.ZeroPolicy(p.m) if table is None else sim_mod.OpenLoopPolicy(table)
    se = sim_mod.simulate(p, policy, xi, ens)
    back = bsde_mod.solve_adjoint(p, ens, se, basis=ctx.basis)
    out = np.empty((ens.M_paths, ens.N, p.m))
    for k in range(ens.N):
        b = eval_batch(p, ens.times[k], ens.W[:, k])
        rk = (_mm(_mT(b.B), back.Ybar[:, k]) + _mm(_mT(b.D), back.Z[:, k])
              + _mm(b.S, se.X[:, k, :]))
        if table is not None:
            rk = rk + _mm(b.R, se.u[:, k, :])
        out[:, k, :] = rk
    return out


def control_cost(ctx, xi, u):
    """Exact tree cost J(t0, xi; u) of the pair generated by (xi, u)."""
    tc = ctx.tc
    tree = tc.tree
    r, X, _ = _sweep_tree(ctx, xi, u)
    total = 0.0
    for k in range(ctx.k0, tree.N):
        uk = None if u is None else u.values[k]
        total += tree.dt * float(
            lattice._running_rate(tc.running[k], X.values[k], uk).mean())
    xT = X.values[tree.N]
    total += float(np.einsum("...i,...i->...", _mm(tc.terminal, xT), xT).mean())
    return total


def _axpy(ctx, alpha, x, y):
    """y + alpha*x on the active levels, returning a fresh TreeProcess."""
    tree = ctx.tc.tree
    vals = []
    for k in range(tree.N):
        if k < ctx.k0:
            vals.append(np.zeros_like(y.values[k]))
        else:
            vals.append(y.values[k] + alpha * x.values[k])
    return TreeProcess(tree=tree, values=vals)


def _scale(ctx, alpha, x):
    tree = ctx.tc.tree
    return TreeProcess(tree=tree, values=[
        alpha * x.values[k] if k >= ctx.k0 else np.zeros_like(x.values[k])
        for k in range(tree.N)])


@dataclass
class CGResult:
    u: TreeProcess
    iterations: int
    residual: float           # relative to the right-hand side norm
    rhs_norm: float
    trace: list = field(default_factory=list)  # (iteration, rel residual, curvature)


def solve_open_loop_cg(ctx, xi, tol=1e-12, max_iter=200):
    """Conjugate gradient for N u = -L xi in the control inner product.

    Stops when [[res,res]]^(1/2) <= tol * [[L xi, L xi]]^(1/2).  Raises
    NotUniformlyConvex on a direction with [[N d, d]] <= 0 (the operator is
    not positive definite on this carrier) and ConvergenceError past
    max_iter.  Exact tree carrier only.
    """
    if not ctx.is_tree:
        raise OperatorError("CG requires the exact tree carrier")
    b = _scale(ctx, -1.0, apply_L(ctx, xi))
    rhs_norm = norm(ctx, b)
    u = zero_control(ctx)
    if rhs_norm == 0.0:
        return CGResult(u=u, iterations=0, residual=0.0, rhs_norm=0.0)
    r = b
    d = r
    rho = inner_product(ctx, r, r)
    trace = []
    for it in range(1, max_iter + 1):
        q = apply_N(ctx, d)
        curv = inner_product(ctx, d, q)
        if curv <= 0.0:
            raise NotUniformlyConvex(it, curv)
        alpha = rho / curv
        u = _axpy(ctx, alpha, d, u)
        r = _axpy(ctx, -alpha, q, r)
        rho_next = inner_product(ctx, r, r)
        rel = np.sqrt(max(rho_next, 0.0)) / rhs_norm
        trace.append((it, float(rel), float(curv)))
        if rel <= tol:
            return CGResult(u=u, iterations=it, residual=float(rel),
                            rhs_norm=rhs_norm, trace=trace)
        d = _axpy(ctx, rho_next / rho, d, r)
        rho = rho_next
    raise ConvergenceError(max_iter, trace[-1][1])


def random_control(ctx, rng, smooth=False):
    """Normalized probe control: white noise per node, or a constant
    direction when smooth (adapted either way)."""
    tree = ctx.tc.tree
    m = ctx.problem.m
    vals = []
    if smooth:
        c = rng.standard_normal(m)
    for k in range(tree.N):
        if k < ctx.k0:
            vals.append(np.zeros((2**k, m)))
        elif smooth:
            vals.append(np.broadcast_to(c, (2**k, m)).copy())
        else:
            vals.append(rng.standard_normal((2**k, m)))
    u = TreeProcess(tree=tree, values=vals)
    nu = norm(ctx, u)
    if nu == 0.0:
        return random_control(ctx, rng, smooth=smooth)
    return _scale(ctx, 1.0 / nu, u)


def convexity_probe(ctx, n_samples, seed):
    """Sampled lower bound for the convexity constant: min [[N u, u]] over
    normalized random controls.  Negative certifies non-convexity; positive
    is evidence only.  Every tenth sample is a smooth (constant-in-time)
    direction, the rest are white.
    """
    rng = np.random.default_rng(int(seed))
    delta = np.inf
    for i in range(int(n_samples)):
        u = random_control(ctx, rng, smooth=(i % 10 == 9))
        q = inner_product(ctx, apply_N(ctx, u), u)
        delta = min(delta, q)
    return ConvexityCertificate(delta=float(delta), samples=int(n_samples), t0=ctx.t0)


def cg_trace_to_csv(result, path):
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "relative_residual", "curvature"])
        for row in result.trace:
            writer.writerow([row[0], repr(row[1]), repr(row[2])])
