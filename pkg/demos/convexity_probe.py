"""Where solvability ends: probing uniform convexity, and watching it fail.

The solvable regime is characterized by uniform convexity of u -> J(t, 0; u),
not by positive definiteness of the weights. This script walks three cases:

  1. a classical positive-definite problem and the indefinite benchmark,
     where the sampled convexity constant delta-hat stays positive;
  2. the negated benchmark, where a single sample certifies delta-hat < 0
     and every solver route refuses;
  3. a terminal reward G = -1/2 with unit control noise, where convexity
     holds for short horizons but fails past T = 1 - ln 2: the Riccati
     solver integrates until min eig(R + D'PD) crosses zero, then aborts
     and names the bracketing interval.

Run: python3 demos/convexity_probe.py   (artifacts in demos/out/)
"""

import os

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from slqlab import operators, problems, riccati
from slqlab.operators import NotUniformlyConvex, OperatorContext

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)
SEED = 20260814

print("=== sampled convexity constants (depth-8 tree, 200 probes) ===")
for name in ("standard-condition", "example-3-7", "negated-weights"):
    ctx = OperatorContext.on_tree(problems.get_problem(name), 8)
    cert = operators.convexity_probe(ctx, 200, SEED)
    verdict = "uniformly convex (evidence)" if cert.delta > 0 else \
        "NOT convex (certified)"
    print(f"{name:>22}: delta_hat = {cert.delta:+.4f}   {verdict}")

print("\n=== what the solvers do with the negated problem ===")
ctx = OperatorContext.on_tree(problems.get_problem("negated-weights"), 8)
try:
    operators.solve_open_loop_cg(ctx, np.array([1.0]))
except NotUniformlyConvex as exc:
    print(f"CG: {type(exc).__name__}: {exc}")

print("\n=== a horizon-dependent failure: G = -1/2, D = 1 ===")


def reward_problem(T):
    return problems.build_problem({
        "T": T, "A": [[0.0]], "B": [[1.0]], "C": [[0.0]], "D": [[1.0]],
        "Q": [[0.0]], "S": [[0.0]], "R": [[1.0]], "G": [[-0.5]]})


curves = []
for T in (0.15, 0.25, 0.3):
    sol = riccati.solve_riccati_ode(reward_problem(T), 4000)
    curves.append((T, sol.times, sol.lambda_min_profile.copy()))
    print(f"T = {T:4.2f}: P(0) = {sol.P0[0, 0]:+.6f}, "
          f"min eig(R + D'PD) = {sol.lambda_min:.6f}  -> solvable")

try:
    riccati.solve_riccati_ode(reward_problem(1.0), 4000)
except riccati.RiccatiBlowup as exc:
    print(f"T = 1.00: {type(exc).__name__}: {exc}")
# separating P' = P^2/(1+P) gives blowup when -1/P + ln|P| drops by
# 1 - ln 2 below its terminal value, so the critical horizon is 1 - ln 2
# and the T = 1 run crosses at t = 1 - (1 - ln 2) = ln 2
print(f"(analytic threshold: horizon 1 - ln 2 = {1.0 - np.log(2):.6f}; "
      f"the abort above lands near t = ln 2 = {np.log(2):.6f})")

fig, ax = plt.subplots(figsize=(5.5, 3.4))
for T, ts, lam in curves:
    ax.plot(ts, lam, label=f"T = {T:g}")
ax.axhline(0.0, color="gray", linewidth=0.8)
ax.set_xlabel("t")
ax.set_ylabel("min eig(R + D'PD)")
ax.set_title("positivity margin shrinks as the horizon grows")
ax.legend()
fig.tight_layout()
fig.savefig(os.path.join(OUT, "convexity_probe.svg"))
print(f"\nwrote {os.path.join(OUT, 'convexity_probe.svg')}")
