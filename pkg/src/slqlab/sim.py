"""Monte Carlo carrier: Brownian ensembles, Euler forward runs, cost estimates.

Same discretization conventions as the tree (left-endpoint coefficients,
explicit Euler for the state, left-rule dt-weighted running cost) so that
tree and ensemble numbers for the same policy differ only by sampling error
and by the increment distribution (Gaussian here, Bernoulli there).
"""

from dataclasses import dataclass

import numpy as np

from .model import eval_batch, terminal_batch


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PathEnsemble:
    """M i.i.d. Brownian paths on a uniform grid, reproducible from the seed."""

    T: float
    N: int
    M_paths: int
    seed: int
    times: np.ndarray  # (N+1,)
    dW: np.ndarray     # (M, N)
    W: np.ndarray      # (M, N+1), W[:, 0] = 0

    @property
    def dt(self):
        return self.T / self.N


def generate_ensemble(N, M_paths, T, seed):
    if not (isinstance(N, (int, np.integer)) and N >= 1):
        raise SimulationError(f"need at least one step, got N={N}")
    if not (isinstance(M_paths, (int, np.integer)) and M_paths >= 1):
        raise SimulationError(f"need at least one path, got M_paths={M_paths}")
    dt = T / N
    rng = np.random.default_rng(int(seed))
    dW = rng.standard_normal((M_paths, N)) * np.sqrt(dt)
    W = np.zeros((M_paths, N + 1))
    np.cumsum(dW, axis=1, out=W[:, 1:])
    dW.setflags(write=False)
    W.setflags(write=False)
    return PathEnsemble(T=float(T), N=int(N), M_paths=int(M_paths), seed=int(seed),
                        times=np.linspace(0.0, T, N + 1), dW=dW, W=W)


class ZeroPolicy:
    def __call__(self, k, t, w, x):
        return np.zeros((x.shape[0], self.m))

    def __init__(self, m):
        self.m = m


class FeedbackPolicy:
    """u = gain(t, w) @ x; gain returns (m, n) or a per-path (M, m, n) stack."""

    def __init__(self, gain):
        self.gain = gain

    def __call__(self, k, t, w, x):
        K = np.asarray(self.gain(t, w), dtype=float)
        return (K @ x[..., None])[..., 0]


class OpenLoopPolicy:
    """Adapted open-loop table: per-path per-step controls fixed in advance.

    Build through from_generator so the table can only depend on the path
    history (the generator sees t_k and W(t_k), never the future).
    """

    def __init__(self, table):
        self.table = np.asarray(table, dtype=float)
        if self.table.ndim != 3:
            raise SimulationError("open-loop table must have shape (M, N, m)")

    @classmethod
    def from_generator(cls, ens, fn, m):
        table = np.empty((ens.M_paths, ens.N, m))
        for k in range(ens.N):
            uk = np.asarray(fn(k, ens.times[k], ens.W[:, k]), dtype=float)
            table[:, k, :] = np.broadcast_to(uk.reshape(-1, m), (ens.M_paths, m))
        return cls(table)

    def __call__(self, k, t, w, x):
        return self.table[:, k, :]


@dataclass(frozen=True)
class StateEnsemble:
    ens: PathEnsemble
    X: np.ndarray  # (M, N+1, n)
    u: np.ndarray  # (M, N, m)


def _mm(mat, vec):
    return (mat @ vec[..., None])[..., 0]


def simulate(p, policy, xi, ens):
    """Explicit Euler forward run of dX = (AX+Bu)dt + (CX+Du)dW per path.

    Coefficients are evaluated at (t_k, W(t_k)).  Raises SimulationError on
    the first non-finite state, naming the path and step: indefinite
    problems can genuinely diverge and that must not pass silently.
    """
    n, m = p.n, p.m
    M, N = ens.M_paths, ens.N
    dt = ens.dt
    X = np.empty((M, N + 1, n))
    U = np.empty((M, N, m))
    X[:, 0, :] = np.asarray(xi, dtype=float).reshape(n)
    for k in range(N):
        t = ens.times[k]
        w = ens.W[:, k]
        b = eval_batch(p, t, w)
        x = X[:, k, :]
        uk = np.asarray(policy(k, t, w, x), dtype=float)
        if uk.shape != (M, m):
            uk = np.broadcast_to(uk.reshape(-1, m), (M, m))
        drift = _mm(b.A, x) + _mm(b.B, uk)
        diff = _mm(b.C, x) + _mm(b.D, uk)
        x_next = x + drift * dt + diff * ens.dW[:, k][:, None]
        if not np.all(np.isfinite(x_next)):
            bad = np.argwhere(~np.isfinite(x_next))[0]
            raise SimulationError(
                f"state became non-finite at path {int(bad[0])}, step {k + 1}")
        X[:, k + 1, :] = x_next
        U[:, k, :] = uk
    return StateEnsemble(ens=ens, X=X, u=U)


def evaluate_cost(p, se):
    """Sample mean and standard error of the discrete quadratic cost.

    Per path: <G X_N, X_N> + sum_k (<Q x, x> + 2 <S x, u> + <R u, u>) dt,
    left rule, coefficients at (t_k, W(t_k)).
    """
    ens = se.ens
    dt = ens.dt
    total = np.zeros(ens.M_paths)
    for k in range(ens.N):
        b = eval_batch(p, ens.times[k], ens.W[:, k])
        x = se.X[:, k, :]
        u = se.u[:, k, :]
        rate = (np.einsum("...i,...i->...", _mm(b.Q, x), x)
                + 2.0 * np.einsum("...i,...i->...", _mm(b.S, x), u)
                + np.einsum("...i,...i->...", _mm(b.R, u), u))
        total += rate * dt
    G = terminal_batch(p, se.ens.W[:, ens.N])
    xT = se.X[:, ens.N, :]
    total += np.einsum("...i,...i->...", _mm(G, xT), xT)
    mean = float(np.mean(total))
    if ens.M_paths > 1:
        stderr = float(np.std(total, ddof=1) / np.sqrt(ens.M_paths))
    else:
        stderr = 0.0
    return mean, stderr


def ensemble_to_csv(se, path, max_paths=None):
    """Dump (path, step, t, W, X components, u components) rows."""
    import csv

    ens = se.ens
    P = ens.M_paths if max_paths is None else min(max_paths, ens.M_paths)
    n = se.X.shape[2]
    m = se.u.shape[2]
    header = (["path", "step", "t", "W"] + [f"x_{i}" for i in range(n)]
              + [f"u_{i}" for i in range(m)])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(P):
            for k in range(ens.N + 1):
                u_row = ["" for _ in range(m)] if k == ens.N else \
                    [repr(float(v)) for v in se.u[i, k]]
                writer.writerow([i, k, repr(float(ens.times[k])),
                                 repr(float(ens.W[i, k])),
                                 *[repr(float(v)) for v in se.X[i, k]], *u_row])
