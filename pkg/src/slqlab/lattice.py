"""Binary Bernoulli lattice for Brownian motion on [0, T].

The driving noise is approximated by a recombining-free binary tree: from a
node at level k the increment is +sqrt(dt) or -sqrt(dt) with probability 1/2
each.  Level k holds 2^k nodes; the children of node (k, j) are (k+1, 2j)
for the up move and (k+1, 2j+1) for the down move.  Everything downstream
(conditional expectations, BSDE sweeps, dynamic programming) is exact
arithmetic over this finite filtration, which is what makes the
cross-verification between solution routes meaningful at tight tolerances.

Processes are stored level by level as arrays of shape (2^k, *value_shape),
never as node objects; all per-level work is vectorized.
"""

from dataclasses import dataclass, field

import numpy as np

from .model import eval_batch, sym, terminal_batch

MAX_DEPTH = 24


class LatticeError(ValueError):
    pass


class IndefiniteHessian(RuntimeError):
    """Raised when a dynamic-programming step meets a non-definite Hessian.

    Carries the level k, node index j and the offending minimum eigenvalue,
    so callers can report exactly where backward induction broke down.
    """

    def __init__(self, level, index, min_eig):
        self.level = level
        self.index = index
        self.min_eig = float(min_eig)
        super().__init__(
            f"control Hessian not positive definite at node (level={level}, "
            f"index={index}): min eigenvalue {self.min_eig:.6g}")


@dataclass(frozen=True)
class BernoulliTree:
    T: float
    N: int
    dt: float
    sqrt_dt: float
    times: np.ndarray
    w: list  # w[k] has shape (2^k,)


def build_tree(N, T):
    """Build the depth-N binary lattice on [0, T].  Requires 1 <= N <= 24."""
    if not (isinstance(N, (int, np.integer)) and 1 <= N <= MAX_DEPTH):
        raise LatticeError(f"tree depth must be an integer in [1, {MAX_DEPTH}], got {N}")
    if not T > 0:
        raise LatticeError(f"horizon must be positive, got {T}")
    dt = T / N
    s = np.sqrt(dt)
    w = [np.zeros(1)]
    for k in range(N):
        step = np.tile(np.array([s, -s]), 2**k)
        w.append(np.repeat(w[k], 2) + step)
    times = np.linspace(0.0, T, N + 1)
    return BernoulliTree(T=float(T), N=int(N), dt=dt, sqrt_dt=s, times=times, w=w)


@dataclass
class TreeProcess:
    """An adapted process on the tree: values[k] has shape (2^k, *shape)."""

    tree: BernoulliTree
    values: list

    def __post_init__(self):
        if len(self.values) > self.tree.N + 1:
            raise LatticeError("more levels than the tree has")
        for k, v in enumerate(self.values):
            if v.shape[0] != 2**k:
                raise LatticeError(f"level {k}: expected 2^{k} nodes, got {v.shape[0]}")

    @property
    def levels(self):
        return len(self.values)

    def root(self):
        return self.values[0][0]


def cond_expect(values_next):
    """E[. | node] one level up: (2^(k+1), ...) -> (2^k, ...) pairwise mean."""
    v = np.asarray(values_next)
    return v.reshape(-1, 2, *v.shape[1:]).mean(axis=1)


def increment_projection(values_next, sqrt_dt):
    """E[. * dW | node] / dt = (up - down) / (2 sqrt(dt))."""
    v = np.asarray(values_next)
    pairs = v.reshape(-1, 2, *v.shape[1:])
    return (pairs[:, 0] - pairs[:, 1]) / (2.0 * sqrt_dt)


def _interleave(up, down):
    out = np.empty((up.shape[0] * 2, *up.shape[1:]), dtype=float)
    out[0::2] = up
    out[1::2] = down
    return out


def _mm(mat, vec):
    """Batched matrix @ vector with (k, r, c) or (r, c) matrices."""
    return (mat @ vec[..., None])[..., 0]


def _mT(mat):
    return np.swapaxes(mat, -1, -2)


@dataclass(frozen=True)
class TreeCoefficients:
    """Problem coefficients evaluated on every node, cached per level.

    running[k] is the CoefficientBundle at (times[k], w[k]); terminal is G
    at the leaves.  Step maps F(+/-) = I + A dt +/- C sqrt(dt) and
    G(+/-) = B dt +/- D sqrt(dt) are precomputed since every route needs them.
    """

    tree: BernoulliTree
    running: list
    terminal: np.ndarray
    F_up: list = field(default_factory=list)
    F_dn: list = field(default_factory=list)
    G_up: list = field(default_factory=list)
    G_dn: list = field(default_factory=list)


def tree_coefficients(p, tree):
    running = [eval_batch(p, tree.times[k], tree.w[k]) for k in range(tree.N)]
    terminal = terminal_batch(p, tree.w[tree.N])
    tc = TreeCoefficients(tree=tree, running=running, terminal=terminal)
    eye = np.eye(p.n)
    dt, s = tree.dt, tree.sqrt_dt
    for b in running:
        tc.F_up.append(eye + b.A * dt + b.C * s)
        tc.F_dn.append(eye + b.A * dt - b.C * s)
        tc.G_up.append(b.B * dt + b.D * s)
        tc.G_dn.append(b.B * dt - b.D * s)
    return tc


def forward_dynamics(tc, u, xi):
    """Roll the controlled state forward: X_{k+1} = F X_k + G u_k per branch.

    u is a TreeProcess with values[k] of shape (2^k, m) (or None for the
    uncontrolled flow); xi is the initial state, shape (n,).
    """
    tree = tc.tree
    xi = np.asarray(xi, dtype=float).reshape(-1)
    levels = [np.tile(xi, (1, 1))]
    for k in range(tree.N):
        x = levels[k]
        x_up = _mm(tc.F_up[k], x)
        x_dn = _mm(tc.F_dn[k], x)
        if u is not None:
            uk = u.values[k]
            x_up = x_up + _mm(tc.G_up[k], uk)
            x_dn = x_dn + _mm(tc.G_dn[k], uk)
        levels.append(_interleave(x_up, x_dn))
    return TreeProcess(tree=tree, values=levels)


def backward_bsde_tree(tc, terminal_values, driver, X=None, u=None):
    """Solve a backward equation on the tree with exact expectations.

    terminal_values: array of shape (2^N, *shape), the level-N data.
    driver: f(t, w, x, ybar, z, u) -> array of shape (2^k, *shape).  Its ybar
    argument is the pre-driver conditional mean E[Y_{k+1} | node] and z the
    increment projection E[Y_{k+1} dW | node] / dt; x and u come from the
    optional forward TreeProcesses (None entries when not supplied).  The
    scheme is explicit: Y_k = ybar + f(t_k, .) * dt.

    Returns (Y, Z): Y has levels 0..N, Z has levels 0..N-1.
    """
    tree = tc.tree
    y_levels = [None] * (tree.N + 1)
    z_levels = [None] * tree.N
    y_levels[tree.N] = np.asarray(terminal_values, dtype=float)
    for k in range(tree.N - 1, -1, -1):
        ybar = cond_expect(y_levels[k + 1])
        z = increment_projection(y_levels[k + 1], tree.sqrt_dt)
        xk = None if X is None else X.values[k]
        uk = None if u is None else u.values[k]
        y_levels[k] = ybar + driver(tree.times[k], tree.w[k], xk, ybar, z, uk) * tree.dt
        z_levels[k] = z
    Y = TreeProcess(tree=tree, values=y_levels)
    Z = TreeProcess(tree=tree, values=z_levels)
    return Y, Z


@dataclass
class DPSolution:
    """Backward-induction output: value kernels and feedback gains per node.

    P[k] has shape (2^k, n, n), Theta[k] shape (2^k, m, n); value plugs in as
    <P[0][0] xi, xi>.  hessian_floor[k] is the smallest control-Hessian
    eigenvalue met at level k (scaled by 1/dt it estimates the convexity
    constant of the one-step problems).
    """

    P: TreeProcess
    Theta: TreeProcess
    hessian_floor: np.ndarray


# nodes where the one-step Hessian and cross term both vanish (the control
# does not enter at all) get Theta = 0 instead of an error
_DEGENERATE_TOL = 1e-12


def dp_solve(p, tc):
    """Exact dynamic programming over the tree by complete-the-square steps.

    At each node, with P' the child kernels,
        Phi_xx = E[F' P' F | node] + Q dt
        H      = E[G' P' G | node] + R dt
        Phi_ux = E[G' P' F | node] + S dt
        Theta  = -H^{-1} Phi_ux,   P = Phi_xx + Phi_ux' Theta.
    H must be positive definite at every node; otherwise IndefiniteHessian
    is raised (unless the step is control-degenerate, see _DEGENERATE_TOL).
    """
    if isinstance(tc, BernoulliTree):
        tc = tree_coefficients(p, tc)
    tree = tc.tree
    n, m = p.n, p.m
    dt = tree.dt
    g = tc.terminal
    P_next = np.broadcast_to(g, (2**tree.N, n, n)).astype(float)
    P_levels = [None] * (tree.N + 1)
    T_levels = [None] * tree.N
    P_levels[tree.N] = P_next
    floors = np.empty(tree.N)
    for k in range(tree.N - 1, -1, -1):
        b = tc.running[k]
        P_up = P_next[0::2]
        P_dn = P_next[1::2]
        Fu, Fd = tc.F_up[k], tc.F_dn[k]
        Gu, Gd = tc.G_up[k], tc.G_dn[k]
        phi_xx = 0.5 * (_mT(Fu) @ P_up @ Fu + _mT(Fd) @ P_dn @ Fd) + b.Q * dt
        H = 0.5 * (_mT(Gu) @ P_up @ Gu + _mT(Gd) @ P_dn @ Gd) + b.R * dt
        phi_ux = 0.5 * (_mT(Gu) @ P_up @ Fu + _mT(Gd) @ P_dn @ Fd) + b.S * dt
        H = sym(np.broadcast_to(H, (2**k, m, m)).copy())
        phi_ux = np.broadcast_to(phi_ux, (2**k, m, n)).copy()
        eigs = np.linalg.eigvalsh(H)
        lam_min = eigs[:, 0]
        floors[k] = float(lam_min.min())
        theta = np.zeros((2**k, m, n))
        bad = lam_min <= 0.0
        if np.any(bad):
            scale = _DEGENERATE_TOL * max(1.0, float(np.abs(P_next).max()))
            h_small = np.abs(H).reshape(2**k, -1).max(axis=1) <= scale
            cross_small = np.abs(phi_ux).reshape(2**k, -1).max(axis=1) <= scale
            degenerate = bad & h_small & cross_small
            hard = bad & ~degenerate
            if np.any(hard):
                j = int(np.argmax(hard))
                raise IndefiniteHessian(k, j, lam_min[j])
            good = ~bad
            if np.any(good):
                theta[good] = -np.linalg.solve(H[good], phi_ux[good])
        else:
            theta = -np.linalg.solve(H, phi_ux)
        P_next = sym(phi_xx + _mT(phi_ux) @ theta)
        P_next = np.ascontiguousarray(np.broadcast_to(P_next, (2**k, n, n)))
        P_levels[k] = P_next
        T_levels[k] = theta
    return DPSolution(
        P=TreeProcess(tree=tree, values=P_levels),
        Theta=TreeProcess(tree=tree, values=T_levels),
        hessian_floor=floors,
    )


def dp_value(sol, xi):
    xi = np.asarray(xi, dtype=float).reshape(-1)
    return float(xi @ sol.P.values[0][0] @ xi)


def feedback_from_gains(sol, X):
    """Apply per-node gains to a state process: u_k = Theta_k X_k."""
    vals = [_mm(sol.Theta.values[k], X.values[k]) for k in range(sol.Theta.levels)]
    return TreeProcess(tree=X.tree, values=vals)


def closed_loop_rollout(tc, sol, xi):
    """Roll the state forward under u = Theta X; returns (X, u)."""
    tree = tc.tree
    xi = np.asarray(xi, dtype=float).reshape(-1)
    x_levels = [np.tile(xi, (1, 1))]
    u_levels = []
    for k in range(tree.N):
        x = x_levels[k]
        uk = _mm(sol.Theta.values[k], x)
        u_levels.append(uk)
        x_up = _mm(tc.F_up[k], x) + _mm(tc.G_up[k], uk)
        x_dn = _mm(tc.F_dn[k], x) + _mm(tc.G_dn[k], uk)
        x_levels.append(_interleave(x_up, x_dn))
    return (TreeProcess(tree=tree, values=x_levels),
            TreeProcess(tree=tree, values=u_levels))


def _running_rate(b, x, u):
    """<Q x, x> + 2 <S x, u> + <R u, u> per node, vectorized over a level."""
    out = np.einsum("...i,...i->...", _mm(b.Q, x), x)
    if u is not None:
        out = out + 2.0 * np.einsum("...i,...i->...", _mm(b.S, x), u)
        out = out + np.einsum("...i,...i->...", _mm(b.R, u), u)
    return out


def cost_on_tree(tc, X, u):
    """Exact expected cost of (X, u) over the tree measure."""
    tree = tc.tree
    total = 0.0
    for k in range(tree.N):
        uk = None if u is None else u.values[k]
        total += tree.dt * float(_running_rate(tc.running[k], X.values[k], uk).mean())
    xT = X.values[tree.N]
    total += float(np.einsum("...i,...i->...", _mm(tc.terminal, xT), xT).mean())
    return total


def cost_to_go(tc, X, u):
    """Per-node conditional remaining cost, as a scalar TreeProcess.

    V_N = <G x, x>; V_k = E[V_{k+1} | node] + rate_k dt.  The root value
    equals cost_on_tree(tc, X, u) up to roundoff.
    """
    tree = tc.tree
    xT = X.values[tree.N]
    levels = [None] * (tree.N + 1)
    levels[tree.N] = np.einsum("...i,...i->...", _mm(tc.terminal, xT), xT)
    for k in range(tree.N - 1, -1, -1):
        uk = None if u is None else u.values[k]
        rate = _running_rate(tc.running[k], X.values[k], uk)
        levels[k] = cond_expect(levels[k + 1]) + rate * tree.dt
    return TreeProcess(tree=tree, values=levels)


def process_to_rows(proc):
    """Flatten a TreeProcess into (level, index, w, *components) rows."""
    rows = []
    tree = proc.tree
    for k, vals in enumerate(proc.values):
        flat = vals.reshape(vals.shape[0], -1)
        for j in range(flat.shape[0]):
            rows.append((k, j, float(tree.w[k][j]), *map(float, flat[j])))
    return rows


def process_to_csv(proc, path, name="value"):
    import csv

    rows = process_to_rows(proc)
    width = len(rows[0]) - 3 if rows else 0
    header = ["level", "index", "w"] + [f"{name}_{i}" for i in range(width)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([row[0], row[1], repr(row[2]), *[repr(v) for v in row[3:]]])
