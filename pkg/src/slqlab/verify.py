"""Cross-verification suite: identities of the control problem as residuals.

Each check computes a residual with an explicit tolerance and returns a
CheckReport; pass means residual <= tolerance.  Tree tolerances are absolute
(the carrier is exact); ensemble checks allow 3 standard errors plus a
stated discretization term.  Fixtures designed to fail (non-convex weights,
deliberately suboptimal control) must fail: the suite checks its own power,
and those reports carry expected_failure=True.
"""

from dataclasses import dataclass, field

import numpy as np

from . import lattice, operators, riccati
from .lattice import TreeProcess, _mT, _mm


@dataclass
class CheckReport:
    name: str
    residual: float
    tolerance: float
    passed: bool
    expected_failure: bool = False
    details: dict = field(default_factory=dict)

    @property
    def ok(self):
        """Suite-level verdict: expected failures must fail, the rest pass."""
        return (not self.passed) if self.expected_failure else self.passed

    def line(self):
        tag = "PASS" if self.passed else ("XFAIL" if self.expected_failure else "FAIL")
        if self.expected_failure and self.passed:
            tag = "UNEXPECTED-PASS"
        return (f"{tag:>15}  {self.name:<24} residual {self.residual:12.4e}  "
                f"tol {self.tolerance:g}")


def _report(name, residual, tol, **details):
    residual = float(residual)
    return CheckReport(name=name, residual=residual, tolerance=float(tol),
                       passed=residual <= tol, details=details)


def _failed(name, tol, exc):
    return CheckReport(name=name, residual=float("inf"), tolerance=float(tol),
                       passed=False, details={"error": f"{type(exc).__name__}: {exc}"})


def _optimal_control(ctx, xi, cg_tol=1e-12):
    return operators.solve_open_loop_cg(ctx, xi, tol=cg_tol).u


def check_stationarity(ctx, xi, u, tol=1e-8):
    """Residual sup |B'Y + D'Z + S X + R u| along the pair generated by u."""
    if ctx.is_tree:
        r, _, _ = operators._sweep_tree(ctx, xi, u)
        res = max(float(np.abs(r.values[k]).max())
                  for k in range(ctx.k0, ctx.tc.tree.N))
        meta = {"carrier": "tree", "depth": ctx.tc.tree.N}
    else:
        r = operators._apply_ensemble(ctx, xi, np.asarray(u, dtype=float))
        res = float(np.abs(r).max())
        meta = {"carrier": "ensemble", "paths": ctx.ens.M_paths, "seed": ctx.ens.seed}
    return _report("stationarity", res, tol, **meta)


def check_value_representation(ctx, xi, u=None, tol=0.05, cg_tol=1e-12):
    """|J - xi'P(0)xi| (P from the tree Riccati route) and |J - <Y(0), xi>|."""
    p = ctx.problem
    if u is None:
        u = _optimal_control(ctx, xi, cg_tol)
    J = operators.control_cost(ctx, xi, u)
    sre = riccati.solve_sre_tree(p, ctx.tc)
    xi_v = np.asarray(xi, dtype=float).reshape(-1)
    res_P = abs(J - float(xi_v @ sre.P0 @ xi_v))
    _, _, Y = operators._sweep_tree(ctx, xi, u)
    res_Y = abs(J - float(Y.values[ctx.k0].mean(axis=0) @ xi_v))
    return _report("value-representation", max(res_P, res_Y), tol,
                   J=J, riccati_residual=res_P, adjoint_residual=res_Y,
                   depth=ctx.tc.tree.N)


def _rollout(tc, Theta, xi, k0=0):
    """Closed-loop pair under a per-node gain TreeProcess from level k0."""
    tree = tc.tree
    xi_arr = np.asarray(xi, dtype=float).reshape(-1)
    x_levels = [np.zeros((2**k, xi_arr.shape[0])) for k in range(k0)]
    x_levels.append(np.broadcast_to(xi_arr, (2**k0, xi_arr.shape[0])).copy())
    u_levels = [np.zeros((2**k, Theta.values[0].shape[-2])) for k in range(k0)]
    for k in range(k0, tree.N):
        x = x_levels[k]
        uk = _mm(Theta.values[k], x)
        u_levels.append(uk)
        x_up = _mm(tc.F_up[k], x) + _mm(tc.G_up[k], uk)
        x_dn = _mm(tc.F_dn[k], x) + _mm(tc.G_dn[k], uk)
        x_levels.append(lattice._interleave(x_up, x_dn))
    return (TreeProcess(tree=tree, values=x_levels),
            TreeProcess(tree=tree, values=u_levels))


def check_closed_loop_agreement(ctx, xi, gain_source="dp", tol_u=1e-8,
                                tol_J=1e-6, cg_tol=1e-12, u_cg=None):
    """Open-loop optimum vs feedback rollout: u*(s) = Theta(s) X*(s).

    With the dynamic-programming gain both sides minimize the same discrete
    quadratic, so agreement is at solver precision; with the discretized
    Riccati gain the difference is O(dt) and the tolerances must say so.
    """
    p = ctx.problem
    tc = ctx.tc
    if u_cg is None:
        u_cg = _optimal_control(ctx, xi, cg_tol)
    if gain_source == "dp":
        Theta = lattice.dp_solve(p, tc).Theta
    elif gain_source == "sre":
        Theta = riccati.solve_sre_tree(p, tc).Theta
    else:
        raise ValueError(f"unknown gain source {gain_source!r}")
    X_fb, u_fb = _rollout(tc, Theta, xi, ctx.k0)
    res_u = max(float(np.abs(u_cg.values[k] - u_fb.values[k]).max())
                for k in range(ctx.k0, tc.tree.N))
    J_cg = operators.control_cost(ctx, xi, u_cg)
    J_fb = operators.control_cost(ctx, xi, u_fb)
    res_J = abs(J_cg - J_fb)
    rep = CheckReport(
        name=f"closed-loop-{gain_source}",
        residual=max(res_u, res_J), tolerance=max(tol_u, tol_J),
        passed=(res_u <= tol_u) and (res_J <= tol_J),
        details={"control_residual": res_u, "cost_residual": res_J,
                 "J_open": J_cg, "J_feedback": J_fb, "depth": tc.tree.N})
    return rep


def check_yx_identity(ctx, tol=0.05, cg_tol=1e-12, cond_limit=1e12):
    """P = Y X^{-1} from n optimizer runs with unit initial states.

    Builds per-node matrices whose columns are the optimal state/adjoint for
    xi = e_1..e_n, compares Y X^{-1} against the dynamic-programming kernel,
    and monitors invertibility of X (min |det|, max condition number).
    """
    p = ctx.problem
    tc = ctx.tc
    tree = tc.tree
    n = p.n
    cols = []
    for i in range(n):
        xi = np.zeros(n)
        xi[i] = 1.0
        u_i = _optimal_control(ctx, xi, cg_tol)
        _, X_i, Y_i = operators._sweep_tree(ctx, xi, u_i)
        cols.append((X_i, Y_i))
    P_ref = lattice.dp_solve(p, tc).P
    res = 0.0
    min_det = np.inf
    max_cond = 0.0
    singular = False
    for k in range(ctx.k0, tree.N + 1):
        XX = np.stack([cols[i][0].values[k] for i in range(n)], axis=-1)
        YY = np.stack([cols[i][1].values[k] for i in range(n)], axis=-1)
        dets = np.linalg.det(XX)
        conds = np.linalg.cond(XX)
        min_det = min(min_det, float(np.abs(dets).min()))
        max_cond = max(max_cond, float(conds.max()))
        if np.any(conds > cond_limit):
            singular = True
            continue
        ratio = _mT(np.linalg.solve(_mT(XX), _mT(YY)))
        res = max(res, float(np.abs(ratio - P_ref.values[k]).max()))
    if singular:
        rep = _report("yx-identity", float("inf"), tol,
                      min_abs_det=min_det, max_cond=max_cond, singular=True)
    else:
        rep = _report("yx-identity", res, tol, min_abs_det=min_det,
                      max_cond=max_cond, singular=False, depth=tree.N)
    return rep


def check_optimality_principle(ctx, xi, k_mid, u=None, tol=1e-9):
    """Restriction of the global optimum stays optimal on every subtree.

    Compares the cost-to-go of the (restricted) control at each level-k_mid
    node against the dynamic-programming value <P(k_mid) x, x> started from
    the realized state there.  With the true optimum the gap is zero in
    exact arithmetic; with a suboptimal control it is the value gap.
    """
    p = ctx.problem
    tc = ctx.tc
    dp = lattice.dp_solve(p, tc)
    if u is None:
        X, u = lattice.closed_loop_rollout(tc, dp, np.asarray(xi, dtype=float))
    else:
        X = operators._sweep_tree(ctx, xi, u)[1]
    V = lattice.cost_to_go(tc, X, u)
    x_mid = X.values[k_mid]
    P_mid = dp.P.values[k_mid]
    v_dp = np.einsum("ji,ji->j", _mm(P_mid, x_mid), x_mid)
    gaps = V.values[k_mid] - v_dp
    return _report("optimality-principle", float(np.abs(gaps).max()), tol,
                   k_mid=int(k_mid), mean_gap=float(gaps.mean()),
                   min_gap=float(gaps.min()), depth=tc.tree.N)


def check_cost_perturbation(ctx, xi, n_perturb=20, seed=20260814,
                            eps_list=(0.01, 0.1, 1.0), tol=1e-9, u=None,
                            cg_tol=1e-12):
    """Optimality by perturbation, plus the exact quadratic gap law.

    For random normalized adapted v and each epsilon, the cost gap
    J(u* + eps v) - J(u*) must be nonnegative (within tol) and must equal
    eps^2 [[N v, v]]: on the tree the quadratic expansion is exact, making
    this the sharpest single test of the operator stack.  The report's
    residual is -min(gap); law_deviation is in the details.
    """
    if u is None:
        u = _optimal_control(ctx, xi, cg_tol)
    J0 = operators.control_cost(ctx, xi, u)
    rng = np.random.default_rng(int(seed))
    min_gap = np.inf
    law_dev = 0.0
    for i in range(int(n_perturb)):
        v = operators.random_control(ctx, rng, smooth=(i % 10 == 9))
        q = operators.inner_product(ctx, operators.apply_N(ctx, v), v)
        for eps in eps_list:
            u_pert = operators._axpy(ctx, float(eps), v, u)
            gap = operators.control_cost(ctx, xi, u_pert) - J0
            min_gap = min(min_gap, gap)
            law_dev = max(law_dev, abs(gap - eps * eps * q))
    rep = _report("cost-perturbation", -min_gap, tol,
                  min_gap=float(min_gap), law_deviation=float(law_dev),
                  trials=int(n_perturb) * len(eps_list), seed=int(seed))
    return rep


def check_convexity(ctx, n_samples=200, seed=20260814, tol=0.0):
    """delta-hat = min [[N u, u]] over normalized probes; fail iff negative."""
    try:
        cert = operators.convexity_probe(ctx, n_samples, seed)
    except Exception as exc:  # probing must not crash the suite
        return _failed("convexity-probe", tol, exc)
    return _report("convexity-probe", -cert.delta, tol,
                   delta=cert.delta, samples=cert.samples, seed=int(seed))


ALL_CHECKS = (
    "closed-loop-dp",
    "closed-loop-sre",
    "convexity-probe",
    "cost-perturbation",
    "optimality-principle",
    "stationarity",
    "value-representation",
    "yx-identity",
)


def run_suite(fixture, depth=10, seed=20260814, samples=200, k_mid=None,
              cg_tol=1e-12, checks=None):
    """Run the verification suite for a registered fixture on a fresh tree.

    Returns CheckReports sorted by name.  Checks the fixture declares as
    expected failures are marked so; solver exceptions inside a check yield
    a failed report instead of aborting the suite.
    """
    p = fixture.build()
    ctx = operators.OperatorContext.on_tree(p, depth)
    xi = np.asarray(fixture.xi, dtype=float)
    if k_mid is None:
        k_mid = depth // 2
    # Comparisons against the explicit-Euler tree Riccati route carry an
    # O(dt) scheme gap; the allowance scales with the step and never drops
    # below the 0.05 floor quoted for the benchmark at depth 12.
    sre_allow = max(0.05, 0.8 * p.T / depth)
    wanted = list(checks) if checks is not None else \
        list(fixture.suite if fixture.suite is not None else ALL_CHECKS)

    u_override = None
    if fixture.control_override == "zero":
        u_override = operators.zero_control(ctx)

    u_cg = None
    def optimal():
        nonlocal u_cg
        if u_override is not None:
            return u_override
        if u_cg is None:
            u_cg = _optimal_control(ctx, xi, cg_tol)
        return u_cg

    reports = []
    for name in sorted(set(wanted)):
        try:
            if name == "stationarity":
                rep = check_stationarity(ctx, xi, optimal())
            elif name == "value-representation":
                rep = check_value_representation(ctx, xi, u=optimal(),
                                                 tol=sre_allow)
            elif name == "closed-loop-dp":
                rep = check_closed_loop_agreement(ctx, xi, "dp", u_cg=optimal())
            elif name == "closed-loop-sre":
                rep = check_closed_loop_agreement(
                    ctx, xi, "sre", tol_u=sre_allow, tol_J=sre_allow,
                    u_cg=optimal())
            elif name == "yx-identity":
                rep = check_yx_identity(ctx, cg_tol=cg_tol)
            elif name == "optimality-principle":
                rep = check_optimality_principle(ctx, xi, k_mid, u=u_override)
            elif name == "cost-perturbation":
                rep = check_cost_perturbation(ctx, xi, seed=seed, u=u_override,
                                              cg_tol=cg_tol)
            elif name == "convexity-probe":
                rep = check_convexity(ctx, n_samples=samples, seed=seed)
            else:
                raise ValueError(f"unknown check {name!r}")
        except Exception as exc:
            rep = _failed(name, 0.0, exc)
        rep.expected_failure = name in fixture.expected_failures
        reports.append(rep)
    return reports


def suite_ok(reports):
    return all(r.ok for r in reports)


def reports_to_csv(reports, path):
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["check", "residual", "tolerance", "passed",
                         "expected_failure", "details"])
        for r in reports:
            writer.writerow([r.name, repr(r.residual), repr(r.tolerance),
                             int(r.passed), int(r.expected_failure),
                             repr(r.details)])


def format_summary(reports):
    lines = [r.line() for r in reports]
    verdict = "OK" if suite_ok(reports) else "FAILED"
    lines.append(f"suite: {verdict} ({sum(r.ok for r in reports)}/{len(reports)})")
    return "\n".join(lines)
