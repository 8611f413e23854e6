"""Backward equations on Monte Carlo ensembles via least-squares regression.

Conditional expectations E[. | F_{t_k}] are replaced by projections onto a
polynomial basis of the Markov state (W(t_k), X(t_k)).  The same explicit
scheme runs on the tree with exact conditional expectations, which is the
cross-check: regression error is then the only difference between carriers.
"""

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from math import comb

import numpy as np

from . import lattice
from .model import eval_batch, sym, terminal_batch

RIDGE_REL = 1e-10

FAMILY_WX = "polynomial-in-(W,X)"
FAMILY_W = "polynomial-in-W"


class BsdeError(RuntimeError):
    pass


class RegressionError(BsdeError):
    pass


@dataclass(frozen=True)
class RegressionBasis:
    family: str
    degree: int
    n_state: int = 0  # state components appended to W when family is FAMILY_WX

    def __post_init__(self):
        if self.family not in (FAMILY_WX, FAMILY_W):
            raise BsdeError(f"unknown basis family {self.family!r}")
        if self.degree < 0:
            raise BsdeError("degree must be >= 0")

    @property
    def n_vars(self):
        return 1 + (self.n_state if self.family == FAMILY_WX else 0)

    @property
    def count(self):
        return comb(self.n_vars + self.degree, self.degree)

    def _monomials(self):
        out = [()]
        for d in range(1, self.degree + 1):
            out.extend(combinations_with_replacement(range(self.n_vars), d))
        return out

    def features(self, w, x=None):
        """Feature matrix (M, count); first column is the constant."""
        w = np.asarray(w, dtype=float).reshape(-1, 1)
        if self.family == FAMILY_WX:
            if x is None:
                raise BsdeError("this basis needs state values")
            cols = np.hstack([w, np.asarray(x, dtype=float).reshape(w.shape[0], -1)])
        else:
            cols = w
        feats = np.empty((w.shape[0], self.count))
        for i, mono in enumerate(self._monomials()):
            feats[:, i] = np.prod(cols[:, list(mono)], axis=1) if mono else 1.0
        return feats


def regress(features, targets):
    """Ridge-regularized least squares: coefficients and fitted values.

    targets may have any trailing shape; each component is fit separately
    against the shared Gram matrix.  lambda = RIDGE_REL * trace(Gram)/p keeps
    the solve well-posed when features degenerate (e.g. deterministic X).
    """
    phi = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    tail = y.shape[1:]
    y2 = y.reshape(y.shape[0], -1)
    gram = phi.T @ phi
    lam = RIDGE_REL * np.trace(gram) / gram.shape[0]
    gram_reg = gram + lam * np.eye(gram.shape[0])
    rhs = phi.T @ y2
    try:
        coef = np.linalg.solve(gram_reg, rhs)
        # one refinement step removes the O(lambda) ridge bias on well-posed
        # systems; on degenerate ones the correction stays tame
        coef += np.linalg.solve(gram_reg, rhs - gram @ coef)
    except np.linalg.LinAlgError as exc:
        raise RegressionError(f"normal equations singular despite ridge: {exc}") from exc
    if not np.all(np.isfinite(coef)):
        raise RegressionError("regression produced non-finite coefficients")
    fitted = phi @ coef
    return coef.reshape(gram.shape[0], *tail), fitted.reshape(y.shape[0], *tail)


@dataclass
class BackwardSolution:
    Y: np.ndarray            # (M, N+1, n)
    Z: np.ndarray            # (M, N, n)
    Ybar: np.ndarray         # (M, N, n), the regressed E[Y_{k+1} | F_k]
    basis: RegressionBasis
    coef_tables: list = field(default_factory=list)   # per step, (p, ...) arrays
    diagnostics: list = field(default_factory=list)   # per step dicts


@dataclass
class MNSolution:
    """Second-moment pair: M carries the uncontrolled cost, N its martingale part.

    carrier is "ensemble" (sampled per path) or "tree" (TreeProcess values).
    bound is the a-priori estimate exp(beta T) sqrt(|G|^2 + 2 K T) with
    beta = K^2 + 2K from the declared coefficient bounds; flagged means the
    sampled max norm exceeded 10x that bound, which indicates the declared
    bounds or the scheme went wrong.
    """

    carrier: str
    M: object
    N: object
    bound: float
    max_norm: float
    flagged: bool


def _setup_check(p, dt):
    K = max(p.coeffs.bound, p.weights.bound)
    if dt * K >= 1.0:
        raise BsdeError(
            f"explicit backward step unstable: dt*bound = {dt * K:.3g} >= 1; "
            "refine the grid")
    return K


def _mm(mat, vec):
    return (mat @ vec[..., None])[..., 0]


def solve_adjoint(p, ens, se, basis=None):
    """Regression solve of the adjoint pair along a simulated ensemble.

    Terminal Y_N = G(W_T) X_N per path (exact, no regression).  Backward:
    Z_k from the martingale-increment projection of Y_{k+1}, Ybar from the
    plain projection, then Y_k = Ybar + (A'Ybar + C'Z + QX + S'u) dt.
    """
    _setup_check(p, ens.dt)
    n = p.n
    if basis is None:
        basis = RegressionBasis(FAMILY_WX, 3, n_state=n)
    M, N = ens.M_paths, ens.N
    dt = ens.dt
    Y = np.empty((M, N + 1, n))
    Z = np.empty((M, N, n))
    Ybar = np.empty((M, N, n))
    G = terminal_batch(p, ens.W[:, N])
    Y[:, N, :] = _mm(G, se.X[:, N, :])
    sol = BackwardSolution(Y=Y, Z=Z, Ybar=Ybar, basis=basis)
    for k in range(N - 1, -1, -1):
        feats = basis.features(ens.W[:, k], se.X[:, k, :])
        y_next = Y[:, k + 1, :]
        coef_y, ybar = regress(feats, y_next)
        # centering the increment target leaves the projection unbiased
        # (E[ybar dW | F_k] = 0) and kills its variance when Y_{k+1} is
        # (nearly) measurable at t_k
        coef_z, z = regress(feats, (y_next - ybar) * ens.dW[:, k][:, None] / dt)
        b = eval_batch(p, ens.times[k], ens.W[:, k])
        drv = (_mm(np.swapaxes(b.A, -1, -2), ybar) + _mm(np.swapaxes(b.C, -1, -2), z)
               + _mm(b.Q, se.X[:, k, :]) + _mm(np.swapaxes(b.S, -1, -2), se.u[:, k, :]))
        Y[:, k, :] = ybar + drv * dt
        Z[:, k, :] = z
        Ybar[:, k, :] = ybar
        gram = feats.T @ feats
        sol.coef_tables.insert(0, (coef_y, coef_z))
        sol.diagnostics.insert(0, {
            "step": k,
            "cond": float(np.linalg.cond(gram)),
            "residual": float(np.linalg.norm(y_next - ybar) / max(1, np.sqrt(M))),
        })
    return sol


def _mn_bound(p, K):
    normG = p.n * p.weights.bound
    beta = K * K + 2.0 * K
    return float(np.exp(beta * p.T) * np.sqrt(normG**2 + 2.0 * K * p.T))


def solve_MN(p, carrier, basis=None):
    """Backward matrix pair (M, N) with terminal M(T) = G.

    On a tree carrier the recursion is the exact one-step congruence
    M_k = E[F' M_{k+1} F | node] + Q dt with F = I + A dt + C dW, so the
    root reproduces the uncontrolled cost exactly.  On an ensemble carrier
    the continuous driver M A + A'M + C'M C + N C + C'N + Q is stepped
    explicitly with regressed conditional expectations.
    """
    if isinstance(carrier, lattice.TreeCoefficients):
        return _solve_MN_tree(p, carrier)
    if isinstance(carrier, lattice.BernoulliTree):
        return _solve_MN_tree(p, lattice.tree_coefficients(p, carrier))
    return _solve_MN_ensemble(p, carrier, basis)


def _solve_MN_tree(p, tc):
    tree = tc.tree
    n = p.n
    K = _setup_check(p, tree.dt)
    m_levels = [None] * (tree.N + 1)
    n_levels = [None] * tree.N
    m_levels[tree.N] = np.ascontiguousarray(
        np.broadcast_to(tc.terminal, (2**tree.N, n, n)).astype(float))
    max_norm = float(np.linalg.norm(m_levels[tree.N], axis=(1, 2)).max())
    for k in range(tree.N - 1, -1, -1):
        nxt = m_levels[k + 1]
        m_up, m_dn = nxt[0::2], nxt[1::2]
        Fu, Fd = tc.F_up[k], tc.F_dn[k]
        b = tc.running[k]
        mk = 0.5 * (np.swapaxes(Fu, -1, -2) @ m_up @ Fu
                    + np.swapaxes(Fd, -1, -2) @ m_dn @ Fd) + b.Q * tree.dt
        mk = sym(np.ascontiguousarray(np.broadcast_to(mk, (2**k, n, n))))
        m_levels[k] = mk
        n_levels[k] = lattice.increment_projection(nxt, tree.sqrt_dt)
        max_norm = max(max_norm, float(np.linalg.norm(mk, axis=(1, 2)).max()))
    bound = _mn_bound(p, K)
    return MNSolution(
        carrier="tree",
        M=lattice.TreeProcess(tree=tree, values=m_levels),
        N=lattice.TreeProcess(tree=tree, values=n_levels),
        bound=bound, max_norm=max_norm, flagged=max_norm > 10.0 * bound)


def _solve_MN_ensemble(p, ens, basis=None):
    n = p.n
    K = _setup_check(p, ens.dt)
    if basis is None:
        basis = RegressionBasis(FAMILY_W, 3)
    M_paths, N = ens.M_paths, ens.N
    dt = ens.dt
    Mv = np.empty((M_paths, N + 1, n, n))
    Nv = np.empty((M_paths, N, n, n))
    G = terminal_batch(p, ens.W[:, N])
    Mv[:, N] = np.broadcast_to(G, (M_paths, n, n))
    max_norm = float(np.linalg.norm(Mv[:, N], axis=(1, 2)).max())
    for k in range(N - 1, -1, -1):
        feats = basis.features(ens.W[:, k])
        nxt = Mv[:, k + 1]
        _, mbar = regress(feats, nxt)
        # centered increment target, same projection with far less noise
        _, nk = regress(feats, (nxt - mbar) * (ens.dW[:, k] / dt)[:, None, None])
        b = eval_batch(p, ens.times[k], ens.W[:, k])
        At = np.swapaxes(b.A, -1, -2)
        Ct = np.swapaxes(b.C, -1, -2)
        drv = mbar @ b.A + At @ mbar + Ct @ mbar @ b.C + nk @ b.C + Ct @ nk + b.Q
        Mv[:, k] = sym(mbar + drv * dt)
        Nv[:, k] = nk
        max_norm = max(max_norm, float(np.linalg.norm(Mv[:, k], axis=(1, 2)).max()))
    bound = _mn_bound(p, K)
    return MNSolution(carrier="ensemble", M=Mv, N=Nv, bound=bound,
                      max_norm=max_norm, flagged=max_norm > 10.0 * bound)


def adjoint_driver(p, tc):
    """Driver f(t,w,x,ybar,z,u) = A'ybar + C'z + Qx + S'u on tree levels.

    Feeding this to lattice.backward_bsde_tree reproduces solve_adjoint with
    exact conditional expectations; it is also the building block the
    operator routes use.
    """
    def f(t, w, x, ybar, z, u):
        b = eval_batch(p, t, w)
        out = (_mm(np.swapaxes(b.A, -1, -2), ybar)
               + _mm(np.swapaxes(b.C, -1, -2), z))
        if x is not None:
            out = out + _mm(b.Q, x)
        if u is not None:
            out = out + _mm(np.swapaxes(b.S, -1, -2), u)
        return out
    return f


def solve_adjoint_tree(p, tc, X, u):
    """Exact-tree adjoint: terminal G X_N, driver as in solve_adjoint."""
    _setup_check(p, tc.tree.dt)
    xT = X.values[tc.tree.N]
    terminal = _mm(tc.terminal, xT)
    return lattice.backward_bsde_tree(tc, terminal, adjoint_driver(p, tc), X=X, u=u)


def diagnostics_to_csv(sol, path):
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "cond", "residual"])
        for d in sol.diagnostics:
            writer.writerow([d["step"], repr(d["cond"]), repr(d["residual"])])
