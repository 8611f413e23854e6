"""The indefinite benchmark solved three independent ways.

The "example-3-7" fixture has running weight R = diag(5, -1): the second
control channel is *rewarded*, not penalized, so classical positive-definite
LQ theory does not apply. The problem is still uniformly convex, because the
noise loading D = [[0, 1]] makes channel-2 activity feed the terminal weight
through the state variance: R + D'PD = diag(5, P - 1) stays positive along
the solution. This script solves it by all three routes and shows they agree.

Run: python3 demos/three_routes.py   (artifacts in demos/out/)
"""

import os

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from slqlab import lattice, operators, problems, riccati, sim

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)
SEED = 20260814

p = problems.get_problem("example-3-7")
xi = np.array([1.0])
p_exact = lambda t: 20.0 / (9.0 - 4.0 * t)

print("=== route 1: backward Riccati ODE (deterministic data) ===")
ode = riccati.solve_riccati_ode(p, 10000)
err = np.abs(ode.P[:, 0, 0] - p_exact(ode.times)).max()
print(f"P(0) = {ode.P0[0, 0]:.12f}   (closed form 20/9 = {20 / 9:.12f})")
print(f"max |P - closed form| over the grid: {err:.2e}")
print(f"certificate: min eig(R + D'PD) = {ode.lambda_min:.6f} > 0 "
      f"despite R having eigenvalue -1")

print("\n=== route 2: exact dynamic programming on the Bernoulli tree ===")
for depth in (4, 8, 12):
    dp = lattice.dp_solve(p, lattice.build_tree(depth, p.T))
    print(f"depth {depth:2d}: value {lattice.dp_value(dp, xi):.15f}  "
          f"(Hessian floor {dp.hessian_floor.min():.4f})")
print("the discrete DP step coincides with the exact value flow here, so")
print("the tree value is 20/9 to machine precision at every depth")

print("\n=== route 3: conjugate gradient in the space of adapted controls ===")
ctx = operators.OperatorContext.on_tree(p, 12)
cg = operators.solve_open_loop_cg(ctx, xi, tol=1e-12)
J = operators.control_cost(ctx, xi, cg.u)
print(f"CG value {J:.15f} in {cg.iterations} iteration(s), "
      f"residual {cg.residual:.1e}")
print("one iteration is not a bug: the optimal control of this fixture is")
print(f"constant in time, u* = (-4/9, 0), and CG's first direction spans it; "
      f"u at the root: {cg.u.values[0][0]}")

print("\n=== cross-checks ===")
dp = lattice.dp_solve(p, ctx.tc)
_, u_fb = lattice.closed_loop_rollout(ctx.tc, dp, xi)
u_gap = max(np.abs(cg.u.values[k] - u_fb.values[k]).max()
            for k in range(ctx.tc.tree.N))
print(f"max |u_cg - Theta_dp X*| over all nodes: {u_gap:.2e}")

ens = sim.generate_ensemble(200, 20000, p.T, SEED)
se = sim.simulate(p, sim.FeedbackPolicy(riccati.ode_gain_function(ode, p)),
                  xi, ens)
mc, stderr = sim.evaluate_cost(p, se)
print(f"Monte Carlo feedback cost ({ens.M_paths} paths): {mc:.12f} "
      f"+- {stderr:.1e}")

fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
axes[0].plot(ode.times, ode.P[:, 0, 0], label="ODE table")
axes[0].plot(ode.times, p_exact(ode.times), ":", label="20/(9-4t)")
axes[0].set_xlabel("t")
axes[0].set_ylabel("P(t)")
axes[0].legend()
axes[1].plot(ode.times, ode.lambda_min_profile, label="min eig(R + D'PD)")
axes[1].axhline(0.0, color="gray", linewidth=0.8)
axes[1].set_xlabel("t")
axes[1].set_ylabel("positivity certificate")
axes[1].legend()
fig.tight_layout()
fig.savefig(os.path.join(OUT, "three_routes.svg"))
print(f"\nwrote {os.path.join(OUT, 'three_routes.svg')}")
