"""Riccati solvers and feedback synthesis.

Three representations of the same object: a backward matrix ODE when the
coefficients are deterministic, an exact backward induction on the tree, and
a regression scheme on Monte Carlo ensembles.  All three symmetrize P every
step, record the smallest eigenvalue of R + D'PD ever met, and refuse to
divide by a numerically singular R + D'PD: for uniformly convex problems
that matrix stays uniformly positive, so near-singularity is a diagnosis,
not a numerical nuisance.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import lattice
from .bsde import RegressionBasis, FAMILY_W, regress
from .model import (KIND_MARKOV, eval_all, eval_batch, sym, terminal_batch)

COND_LIMIT = 1e12


class RiccatiBlowup(RuntimeError):
    """R + D'PD became numerically singular during backward integration."""

    def __init__(self, where, cond):
        self.where = where
        self.cond = float(cond)
        super().__init__(
            f"R + D'PD numerically singular at {where} (condition ~{cond:.3g}); "
            "the problem is not uniformly convex at this resolution")


class GainError(RuntimeError):
    pass


@dataclass
class RiccatiSolution:
    """One backward solve.  Which fields are filled depends on representation.

    representation "ode-table": times, P (K+1,n,n), Theta (K+1,m,n),
    lambda_min_profile (K+1,).
    representation "tree": P, Lambda, Theta, lambda_min_nodes TreeProcesses.
    representation "regression": times, coef_P / coef_Lambda per-step tables,
    P_profile (fitted at w=0), Theta0, stderr0, lambda_min_profile.
    lambda_min is the global minimum eigenvalue of R + D'PD across samples;
    the solution is certified iff it is strictly positive.
    """

    representation: str
    lambda_min: float
    P0: np.ndarray
    times: np.ndarray = None
    P: object = None
    Lambda: object = None
    Theta: object = None
    lambda_min_profile: np.ndarray = None
    lambda_min_nodes: object = None
    P_profile: np.ndarray = None
    Theta0: np.ndarray = None
    stderr0: np.ndarray = None
    coef_P: list = field(default_factory=list)
    coef_Lambda: list = field(default_factory=list)

    @property
    def certified(self):
        return self.lambda_min > 0.0

    def value(self, xi):
        xi = np.asarray(xi, dtype=float).reshape(-1)
        return float(xi @ self.P0 @ xi)


def feedback_gain(P, Lam, b):
    """Gain Theta = -(R+D'PD)^{-1} (B'P + D'PC + D'Lambda + S), with lam_min.

    b is a CoefficientBundle at the evaluation point; Lam may be None for the
    deterministic case.  Raises GainError when R + D'PD is numerically
    singular (condition beyond COND_LIMIT).
    """
    H = sym(b.R + b.D.T @ P @ b.D)
    eigs = np.linalg.eigvalsh(H)
    lam_min = float(eigs[0])
    a_eigs = np.abs(eigs)
    if a_eigs.min() == 0.0 or a_eigs.max() / a_eigs.min() > COND_LIMIT:
        raise GainError(
            f"R + D'PD singular (|eig| range [{a_eigs.min():.3g}, {a_eigs.max():.3g}])")
    U = b.B.T @ P + b.D.T @ P @ b.C + b.S
    if Lam is not None:
        U = U + b.D.T @ Lam
    return -np.linalg.solve(H, U), lam_min


def _riccati_rhs(b, P):
    """Driver F(P) with Lambda = 0; returns (F, H eigenvalues, Theta)."""
    PB = P @ b.B
    CtP = b.C.T @ P
    H = sym(b.R + b.D.T @ (P @ b.D))
    U = PB.T + (CtP @ b.D).T + b.S
    eigs = np.linalg.eigvalsh(H)
    a = np.abs(eigs)
    if a.min() == 0.0 or a.max() / a.min() > COND_LIMIT:
        scale = 1e-12 * max(1.0, float(np.abs(P).max()))
        if np.abs(H).max() <= scale and np.abs(U).max() <= scale:
            # control-degenerate step, Theta = 0 (matches the tree DP escape)
            F = P @ b.A + b.A.T @ P + CtP @ b.C + b.Q
            return F, eigs, np.zeros_like(U)
        return None, eigs, None
    K = np.linalg.solve(H, U)
    F = P @ b.A + b.A.T @ P + CtP @ b.C + b.Q - U.T @ K
    return F, eigs, -K


def _solve_ode_scalar(p, K, h, times, b0):
    """Scalar-state RK4 specialization (n = 1, m <= 2, constant data).

    Same recursion as the general path but in plain floats: at these sizes
    numpy per-call overhead dominates the actual arithmetic by ~50x, and the
    1e4-step reference runs need to stay well under a second.  Closed-form
    2x2 symmetric eigenvalues / inverse.
    """
    m = p.m
    a = float(b0.A[0, 0])
    c = float(b0.C[0, 0])
    q = float(b0.Q[0, 0])
    d = [float(x) for x in b0.D[0]]
    bc = [float(b0.B[0, i]) + c * d[i] for i in range(m)]
    s = [float(b0.S[i, 0]) for i in range(m)]
    lin = 2.0 * a + c * c
    if m == 1:
        r00, dd = float(b0.R[0, 0]), d[0] * d[0]

        def rhs(P):
            h11 = r00 + P * dd
            u1 = P * bc[0] + s[0]
            if h11 == 0.0:
                # control-degenerate step (same escape as the tree DP):
                # linear term gone too, any control is optimal, Theta = 0
                if abs(u1) <= 1e-12 * max(1.0, abs(P)):
                    return lin * P + q, h11, (0.0,)
                return None, h11, None
            k1 = u1 / h11
            return lin * P + q - u1 * k1, h11, (-k1,)
    else:
        r00, r01, r11 = float(b0.R[0, 0]), float(b0.R[0, 1]), float(b0.R[1, 1])
        d11, d12, d22 = d[0] * d[0], d[0] * d[1], d[1] * d[1]

        def rhs(P):
            h11 = r00 + P * d11
            h12 = r01 + P * d12
            h22 = r11 + P * d22
            tr = h11 + h22
            disc = math.sqrt((h11 - h22) ** 2 + 4.0 * h12 * h12)
            lo, hi = 0.5 * (tr - disc), 0.5 * (tr + disc)
            alo, ahi = abs(lo), abs(hi)
            if alo > ahi:
                alo, ahi = ahi, alo
            u1 = P * bc[0] + s[0]
            u2 = P * bc[1] + s[1]
            if alo == 0.0 or ahi > alo * COND_LIMIT:
                scale = 1e-12 * max(1.0, abs(P))
                if max(abs(h11), abs(h12), abs(h22)) <= scale \
                        and max(abs(u1), abs(u2)) <= scale:
                    return lin * P + q, lo, (0.0, 0.0)
                return None, lo, None
            det = h11 * h22 - h12 * h12
            k1 = (h22 * u1 - h12 * u2) / det
            k2 = (h11 * u2 - h12 * u1) / det
            return lin * P + q - (u1 * k1 + u2 * k2), lo, (-k1, -k2)

    P_tab = np.empty((K + 1, 1, 1))
    Th_tab = np.empty((K + 1, m, 1))
    lam_tab = np.empty(K + 1)
    P = float(np.asarray(p.weights.G(p.T, 0.0), dtype=float).reshape(()))
    P_tab[K, 0, 0] = P
    h6 = h / 6.0
    hh = 0.5 * h
    for k in range(K, 0, -1):
        F1, lam, Th = rhs(P)
        if F1 is None:
            raise RiccatiBlowup(f"t={times[k]:.6g}", COND_LIMIT)
        # lambda_min is continuous in t, so a sign flip between grid points
        # means R + D'PD crossed singularity inside the step
        if k < K and lam * lam_tab[k + 1] < 0.0:
            raise RiccatiBlowup(
                f"t in ({times[k]:.6g}, {times[k + 1]:.6g}) "
                f"(lambda_min sign change)", COND_LIMIT)
        Th_tab[k, :, 0] = Th
        lam_tab[k] = lam
        F2, _, _ = rhs(P + hh * F1)
        if F2 is None:
            raise RiccatiBlowup(f"t in ({times[k] - h:.6g}, {times[k]:.6g})", COND_LIMIT)
        F3, _, _ = rhs(P + hh * F2)
        if F3 is None:
            raise RiccatiBlowup(f"t in ({times[k] - h:.6g}, {times[k]:.6g})", COND_LIMIT)
        F4, _, _ = rhs(P + h * F3)
        if F4 is None:
            raise RiccatiBlowup(f"t in ({times[k] - h:.6g}, {times[k]:.6g})", COND_LIMIT)
        P = P + h6 * (F1 + 2.0 * (F2 + F3) + F4)
        if not math.isfinite(P):
            raise RiccatiBlowup(f"P diverged near t={times[k - 1]:.6g}", COND_LIMIT)
        P_tab[k - 1, 0, 0] = P
    F0, lam, Th = rhs(P)
    if F0 is None:
        raise RiccatiBlowup("t=0", COND_LIMIT)
    if lam * lam_tab[1] < 0.0:
        raise RiccatiBlowup(
            f"t in (0, {times[1]:.6g}) (lambda_min sign change)", COND_LIMIT)
    Th_tab[0, :, 0] = Th
    lam_tab[0] = lam
    return RiccatiSolution(
        representation="ode-table", lambda_min=float(lam_tab.min()), P0=P_tab[0],
        times=times, P=P_tab, Theta=Th_tab, lambda_min_profile=lam_tab)


def solve_riccati_ode(p, N_grid):
    """Backward RK4 for the matrix Riccati ODE, deterministic coefficients.

    Grid of N_grid uniform steps from T down to 0; P symmetrized each step.
    Also tabulates the gain and the smallest eigenvalue of R + D'PD at every
    grid time.  Aborts with RiccatiBlowup when that matrix approaches
    singularity (condition number beyond COND_LIMIT).
    """
    if p.coeffs.kind == KIND_MARKOV or p.weights.kind == KIND_MARKOV:
        raise GainError("ODE route requires deterministic coefficients and weights")
    n, m = p.n, p.m
    K = int(N_grid)
    if K < 1:
        raise GainError("need at least one grid step")
    h = p.T / K
    times = np.linspace(0.0, p.T, K + 1)
    if p.coeffs.kind == "constant" and p.weights.kind == "constant":
        b0 = eval_all(p, 0.0, 0.0)
        if n == 1 and m <= 2:
            return _solve_ode_scalar(p, K, h, times, b0)
        get = lambda t: b0
    else:
        get = lambda t: eval_all(p, min(max(t, 0.0), p.T), 0.0)

    P_tab = np.empty((K + 1, n, n))
    Th_tab = np.empty((K + 1, m, n))
    lam_tab = np.empty(K + 1)
    P = sym(np.asarray(p.weights.G(p.T, 0.0), dtype=float)).copy()
    P_tab[K] = P
    for k in range(K, 0, -1):
        t = times[k]
        F1, eigs, Th = _riccati_rhs(get(t), P)
        if F1 is None:
            raise RiccatiBlowup(f"t={t:.6g}", np.abs(eigs).max() / max(np.abs(eigs).min(), 1e-300))
        # singularity between grid points shows up as a sign flip of the
        # (continuous) smallest eigenvalue of R + D'PD
        if k < K and eigs[0] * lam_tab[k + 1] < 0.0:
            raise RiccatiBlowup(
                f"t in ({t:.6g}, {times[k + 1]:.6g}) "
                f"(lambda_min sign change)", COND_LIMIT)
        Th_tab[k] = Th
        lam_tab[k] = eigs[0]
        bh = get(t - 0.5 * h)
        F2, e2, _ = _riccati_rhs(bh, P + 0.5 * h * F1)
        F3, e3, _ = _riccati_rhs(bh, P + 0.5 * h * F2) if F2 is not None else (None, e2, None)
        F4, e4, _ = _riccati_rhs(get(t - h), P + h * F3) if F3 is not None else (None, e3, None)
        if F2 is None or F3 is None or F4 is None:
            raise RiccatiBlowup(f"t in ({t - h:.6g}, {t:.6g})", COND_LIMIT)
        P = sym(P + (h / 6.0) * (F1 + 2.0 * F2 + 2.0 * F3 + F4))
        if not np.all(np.isfinite(P)):
            raise RiccatiBlowup(f"P diverged near t={times[k - 1]:.6g}", COND_LIMIT)
        P_tab[k - 1] = P
    F0, eigs, Th = _riccati_rhs(get(0.0), P)
    if F0 is None:
        raise RiccatiBlowup("t=0", np.abs(eigs).max() / max(np.abs(eigs).min(), 1e-300))
    if eigs[0] * lam_tab[1] < 0.0:
        raise RiccatiBlowup(
            f"t in (0, {times[1]:.6g}) (lambda_min sign change)", COND_LIMIT)
    Th_tab[0] = Th
    lam_tab[0] = eigs[0]
    return RiccatiSolution(
        representation="ode-table", lambda_min=float(lam_tab.min()), P0=P_tab[0],
        times=times, P=P_tab, Theta=Th_tab, lambda_min_profile=lam_tab)


def _batched_gain(b, Pbar, Lam, where):
    """Per-node/path gain; returns (Theta, H eigen floors) or raises."""
    k = Pbar.shape[0]
    m = b.R.shape[-1]
    H = sym(np.broadcast_to(b.R + lattice._mT(b.D) @ Pbar @ b.D, (k, m, m)).copy())
    eigs = np.linalg.eigvalsh(H)
    a = np.abs(eigs)
    bad = (a[:, 0] == 0.0) | (a[:, -1] / np.maximum(a[:, 0], 1e-300) > COND_LIMIT)
    U = lattice._mT(b.B) @ Pbar + lattice._mT(b.D) @ Pbar @ b.C + b.S
    U = U + lattice._mT(b.D) @ Lam
    U = np.broadcast_to(U, (k, m, Pbar.shape[-1])).copy()
    if np.any(bad):
        # control-degenerate nodes (H and cross term both vanish) get
        # Theta = 0, the same escape the tree DP uses; anything else aborts
        scale = 1e-12 * max(1.0, float(np.abs(Pbar).max()))
        h_small = np.abs(H).reshape(k, -1).max(axis=1) <= scale
        u_small = np.abs(U).reshape(k, -1).max(axis=1) <= scale
        degenerate = bad & h_small & u_small
        hard = bad & ~degenerate
        if np.any(hard):
            j = int(np.argmax(hard))
            raise RiccatiBlowup(f"{where}, sample {j}",
                                a[j, -1] / max(a[j, 0], 1e-300))
        H[degenerate] = np.eye(m)
        U[degenerate] = 0.0
    return -np.linalg.solve(H, U), eigs[:, 0]


def solve_sre_tree(p, tc):
    """Backward Euler for the stochastic Riccati pair (P, Lambda) on the tree.

    P_N = G at the leaves; at each node Pbar = E[P_{k+1}|node] and Lambda is
    the martingale-increment projection of P_{k+1}; one explicit step of the
    Riccati driver built from (Pbar, Lambda) with coefficients at (t_k, w).
    Distinct from lattice.dp_solve by construction: that one is the exact
    discrete argmin, this one discretizes the continuous-time equation, and
    their agreement is a genuine two-route check.
    """
    if isinstance(tc, lattice.BernoulliTree):
        tc = lattice.tree_coefficients(p, tc)
    tree = tc.tree
    n = p.n
    P_levels = [None] * (tree.N + 1)
    L_levels = [None] * tree.N
    T_levels = [None] * tree.N
    lam_levels = [None] * tree.N
    P_levels[tree.N] = np.ascontiguousarray(
        np.broadcast_to(tc.terminal, (2**tree.N, n, n)).astype(float))
    lam_global = np.inf
    for k in range(tree.N - 1, -1, -1):
        nxt = P_levels[k + 1]
        Pbar = lattice.cond_expect(nxt)
        Lam = lattice.increment_projection(nxt, tree.sqrt_dt)
        b = tc.running[k]
        Theta, lam = _batched_gain(b, Pbar, Lam, f"node (level={k}, index=*)")
        At = lattice._mT(b.A)
        Ct = lattice._mT(b.C)
        U = lattice._mT(b.B) @ Pbar + lattice._mT(b.D) @ Pbar @ b.C \
            + lattice._mT(b.D) @ Lam + b.S
        drv = (Pbar @ b.A + At @ Pbar + Ct @ Pbar @ b.C + Lam @ b.C + Ct @ Lam
               + b.Q + lattice._mT(U) @ Theta)
        P_levels[k] = sym(Pbar + drv * tree.dt)
        L_levels[k] = Lam
        T_levels[k] = Theta
        lam_levels[k] = lam
        lam_global = min(lam_global, float(lam.min()))
    return RiccatiSolution(
        representation="tree", lambda_min=lam_global, P0=P_levels[0][0],
        times=tree.times,
        P=lattice.TreeProcess(tree=tree, values=P_levels),
        Lambda=lattice.TreeProcess(tree=tree, values=L_levels),
        Theta=lattice.TreeProcess(tree=tree, values=T_levels),
        lambda_min_nodes=lattice.TreeProcess(tree=tree, values=lam_levels))


def solve_sre_lsmc(p, ens, basis=None):
    """Regression version of the SRE backward induction on a path ensemble.

    P and Lambda are regressed componentwise on a polynomial basis in W(t_k)
    (they are functions of (t, w) for Markov coefficients), then one explicit
    step of the same driver as the tree solver.  Keeps per-step coefficient
    tables rather than full sampled fields; P_profile is the fitted value at
    w = 0 per step and stderr0 the standard error of the step-0 projection.
    """
    if basis is None:
        basis = RegressionBasis(FAMILY_W, 3)
    n = p.n
    M, N = ens.M_paths, ens.N
    dt = ens.dt
    Pv = np.ascontiguousarray(
        np.broadcast_to(terminal_batch(p, ens.W[:, N]), (M, n, n)).astype(float))
    coef_P = [None] * N
    coef_L = [None] * N
    P_profile = np.empty((N + 1, n, n))
    P_profile[N] = terminal_batch(p, np.array([0.0]))[0] if "G" in p.weights.w_dependent \
        else terminal_batch(p, np.array([0.0]))
    lam_tab = np.empty(N)
    lam_global = np.inf
    stderr0 = None
    for k in range(N - 1, -1, -1):
        feats = basis.features(ens.W[:, k])
        cp, Pbar = regress(feats, Pv)
        Pbar = sym(Pbar)
        # centered increment target: unbiased for Lambda, much lower variance
        cl, Lam = regress(feats, (Pv - Pbar) * (ens.dW[:, k] / dt)[:, None, None])
        Lam = sym(Lam)
        if k == 0:
            resid = Pv - Pbar
            stderr0 = np.std(resid, axis=0, ddof=1) / np.sqrt(M)
        b = eval_batch(p, ens.times[k], ens.W[:, k])
        Theta, lam = _batched_gain(b, Pbar, Lam, f"step {k}")
        At = lattice._mT(b.A)
        Ct = lattice._mT(b.C)
        U = lattice._mT(b.B) @ Pbar + lattice._mT(b.D) @ Pbar @ b.C \
            + lattice._mT(b.D) @ Lam + b.S
        drv = (Pbar @ b.A + At @ Pbar + Ct @ Pbar @ b.C + Lam @ b.C + Ct @ Lam
               + b.Q + lattice._mT(U) @ Theta)
        Pv = sym(Pbar + drv * dt)
        coef_P[k] = cp
        coef_L[k] = cl
        P_profile[k] = cp[0]
        lam_tab[k] = float(lam.min())
        lam_global = min(lam_global, lam_tab[k])
    P0 = sym(Pv[0].copy())  # all paths identical at k=0: features are constant there
    Lam0 = coef_L[0][0]
    Theta0, _ = feedback_gain(P0, Lam0, eval_all(p, 0.0, 0.0))
    return RiccatiSolution(
        representation="regression", lambda_min=lam_global, P0=P0,
        times=ens.times, lambda_min_profile=lam_tab, P_profile=P_profile,
        Theta0=Theta0, stderr0=stderr0, coef_P=coef_P, coef_Lambda=coef_L)


def ode_gain_function(sol, p):
    """(t, w) -> gain from an ode-table solution, P linearly interpolated."""
    if sol.representation != "ode-table":
        raise GainError(f"no time-interpolated gain for {sol.representation!r}")
    times, P_tab = sol.times, sol.P

    def gain(t, w):
        tt = min(max(float(t), times[0]), times[-1])
        i = min(int(np.searchsorted(times, tt, side="right")) - 1, len(times) - 2)
        lam = (tt - times[i]) / (times[i + 1] - times[i])
        P = (1.0 - lam) * P_tab[i] + lam * P_tab[i + 1]
        th, _ = feedback_gain(P, None, eval_all(p, tt, 0.0))
        return th
    return gain


def lsmc_gain_function(sol, p):
    """(t, w array) -> per-path gains from regression coefficient tables."""
    if sol.representation != "regression":
        raise GainError(f"expected a regression solution, got {sol.representation!r}")
    times = sol.times
    N = len(times) - 1
    basis = RegressionBasis(FAMILY_W, sol.coef_P[0].shape[0] - 1)

    def gain(t, w):
        k = min(int(np.searchsorted(times, float(t), side="right")) - 1, N - 1)
        k = max(k, 0)
        feats = basis.features(np.atleast_1d(w))
        Pbar = sym(np.einsum("ip,pjl->ijl", feats, sol.coef_P[k]))
        Lam = sym(np.einsum("ip,pjl->ijl", feats, sol.coef_Lambda[k]))
        b = eval_batch(p, times[k], np.atleast_1d(w))
        th, _ = _batched_gain(b, Pbar, Lam, f"gain eval at step {k}")
        return th
    return gain


def riccati_to_csv(sol, path):
    """Column layout: t, w, row-major P, row-major Theta, lambda_min."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if sol.representation == "ode-table":
            n = sol.P.shape[-1]
            m = sol.Theta.shape[-2]
            writer.writerow(["t", "w"] + [f"p_{i}{j}" for i in range(n) for j in range(n)]
                            + [f"theta_{i}{j}" for i in range(m) for j in range(n)]
                            + ["lambda_min"])
            for k, t in enumerate(sol.times):
                writer.writerow([repr(float(t)), ""]
                                + [repr(float(v)) for v in sol.P[k].ravel()]
                                + [repr(float(v)) for v in sol.Theta[k].ravel()]
                                + [repr(float(sol.lambda_min_profile[k]))])
        elif sol.representation == "tree":
            tree = sol.P.tree
            n = sol.P.values[0].shape[-1]
            m = sol.Theta.values[0].shape[-2]
            writer.writerow(["t", "w", "level", "index"]
                            + [f"p_{i}{j}" for i in range(n) for j in range(n)]
                            + [f"theta_{i}{j}" for i in range(m) for j in range(n)]
                            + ["lambda_min"])
            for k in range(tree.N + 1):
                Pk = sol.P.values[k]
                for j in range(2**k):
                    row = [repr(float(tree.times[k])), repr(float(tree.w[k][j])), k, j]
                    row += [repr(float(v)) for v in Pk[j].ravel()]
                    if k < tree.N:
                        row += [repr(float(v)) for v in sol.Theta.values[k][j].ravel()]
                        row += [repr(float(sol.lambda_min_nodes.values[k][j]))]
                    else:
                        row += ["" for _ in range(m * n)] + [""]
                    writer.writerow(row)
        else:
            n = sol.P_profile.shape[-1]
            writer.writerow(["t", "w"] + [f"p_{i}{j}" for i in range(n) for j in range(n)]
                            + ["lambda_min"])
            for k, t in enumerate(sol.times):
                lam = repr(float(sol.lambda_min_profile[k])) if k < len(sol.lambda_min_profile) else ""
                writer.writerow([repr(float(t)), "0.0"]
                                + [repr(float(v)) for v in sol.P_profile[k].ravel()]
                                + [lam])
