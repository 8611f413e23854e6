"""Config-driven experiment runner.

Commands: solve, verify, compare, sweep.  A config file (TOML or JSON)
names a problem and carrier parameters; every run writes a manifest.json
echoing the fully resolved configuration, and rerunning a command straight
from that manifest reproduces all numeric outputs bitwise (floats are
serialized with repr, plots carry no timestamps, seeds are explicit).
Exit status is 0 iff no solver route errored and all non-expected-failure
checks passed.
"""

import argparse
import json
import os
import sys

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from . import __version__, lattice, operators, problems, riccati, sim, verify
from .bsde import FAMILY_W, RegressionBasis
from .model import ModelError

DEFAULT_SEED = 20260814


def _load_config(path):
    with open(path, "rb") as fh:
        if path.endswith(".json"):
            cfg = json.load(fh)
        else:
            cfg = tomllib.load(fh)
    meta = {}
    if "config" in cfg and "command" in cfg:  # rerun from a manifest
        meta = {k: cfg.get(k) for k in ("command", "seed", "threads")}
        cfg = cfg["config"]
    return cfg, meta


def _atomic_text(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _atomic_csv(path, write_fn):
    tmp = path + ".tmp"
    write_fn(tmp)
    os.replace(tmp, path)


def _write_manifest(out_dir, command, cfg, seed, threads):
    manifest = {
        "artifact": "slqlab",
        "version": __version__,
        "command": command,
        "seed": int(seed),
        "threads": threads,
        "config": cfg,
    }
    _atomic_text(os.path.join(out_dir, "manifest.json"),
                 json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _fixture_for(cfg):
    prob_cfg = cfg.get("problem", {})
    if "name" in prob_cfg:
        return problems.get_fixture(prob_cfg["name"])
    p = problems.build_problem(prob_cfg)
    return problems.FixtureSpec(name="inline", build=lambda: p,
                                xi=tuple(1.0 for _ in range(p.n)))


def _xi_for(cfg, section, fixture):
    xi = cfg.get(section, {}).get("xi", None)
    if xi is None:
        xi = list(fixture.xi)
    return np.asarray(xi, dtype=float)


def _plot(path, curves, xlabel, ylabel, hline=None):
    """curves: list of (label, xs, ys).  Deterministic SVG, no timestamps."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "slqlab"
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for label, xs, ys in curves:
        ax.plot(xs, ys, marker="o", markersize=3, label=label)
    if hline is not None:
        ax.axhline(hline, color="gray", linestyle=":", linewidth=1,
                   label="analytic")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=8)
    fig.tight_layout()
    tmp = path + ".tmp"
    fig.savefig(tmp, format="svg", metadata={"Date": None})
    plt.close(fig)
    os.replace(tmp, path)


def _values_csv(path, rows):
    import csv

    def write(tmp):
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["route", "resolution", "value", "stderr"])
            for r in rows:
                writer.writerow([r[0], r[1], repr(float(r[2])), repr(float(r[3]))])
    _atomic_csv(path, write)


def _route_value(route, fixture, cfg, seed, xi):
    """One (value, stderr, resolution) for a named route at config resolution."""
    p = fixture.build()
    if route == "ode":
        steps = int(cfg.get("solve", {}).get("ode_steps",
                    cfg.get("compare", {}).get("ode_steps", 10000)))
        sol = riccati.solve_riccati_ode(p, steps)
        return sol.value(xi), 0.0, steps
    if route == "tree":
        depth = int(cfg.get("carrier", {}).get("depth", 12))
        tc = lattice.tree_coefficients(p, lattice.build_tree(depth, p.T))
        dp = lattice.dp_solve(p, tc)
        return lattice.dp_value(dp, xi), 0.0, depth
    if route == "lsmc":
        e = cfg.get("ensemble", {})
        ens = sim.generate_ensemble(int(e.get("steps", 100)),
                                         int(e.get("paths", 100000)),
                                         p.T, seed)
        basis = RegressionBasis(FAMILY_W, int(e.get("basis_degree", 3)))
        sol = riccati.solve_sre_lsmc(p, ens, basis)
        xv = np.asarray(xi, dtype=float).reshape(-1)
        stderr = float(xv @ sol.stderr0 @ xv)
        return sol.value(xi), stderr, ens.M_paths
    raise ModelError(f"unknown route {route!r}")


def cmd_solve(cfg, out_dir, seed):
    fixture = _fixture_for(cfg)
    p = fixture.build()
    xi = _xi_for(cfg, "solve", fixture)
    routes = cfg.get("solve", {}).get("routes", ["ode", "tree"])
    rows = []
    for route in routes:
        try:
            if route == "ode":
                steps = int(cfg.get("solve", {}).get("ode_steps", 10000))
                sol = riccati.solve_riccati_ode(p, steps)
                _atomic_csv(os.path.join(out_dir, "riccati_ode.csv"),
                            lambda tmp: riccati.riccati_to_csv(sol, tmp))
                _plot(os.path.join(out_dir, "lambda_min_ode.svg"),
                      [("ode", sol.times, sol.lambda_min_profile)],
                      "t", "min eig(R + D'PD)")
                rows.append(("ode", steps, sol.value(xi), 0.0))
            elif route == "tree":
                depth = int(cfg.get("carrier", {}).get("depth", 12))
                tree = lattice.build_tree(depth, p.T)
                tc = lattice.tree_coefficients(p, tree)
                dp = lattice.dp_solve(p, tc)
                rows.append(("tree-dp", depth, lattice.dp_value(dp, xi), 0.0))
                _atomic_csv(os.path.join(out_dir, "dp_P.csv"),
                            lambda tmp: lattice.process_to_csv(dp.P, tmp, name="p"))
                _atomic_csv(os.path.join(out_dir, "dp_gain.csv"),
                            lambda tmp: lattice.process_to_csv(dp.Theta, tmp, name="theta"))
                sre = riccati.solve_sre_tree(p, tc)
                rows.append(("tree-sre", depth, sre.value(xi), 0.0))
                _atomic_csv(os.path.join(out_dir, "riccati_tree.csv"),
                            lambda tmp: riccati.riccati_to_csv(sre, tmp))
                ctx = operators.OperatorContext.on_tree(p, tc)
                cg = operators.solve_open_loop_cg(ctx, xi)
                J = operators.control_cost(ctx, xi, cg.u)
                rows.append(("tree-cg", depth, J, 0.0))
                _atomic_csv(os.path.join(out_dir, "cg_trace.csv"),
                            lambda tmp: operators.cg_trace_to_csv(cg, tmp))
                _atomic_csv(os.path.join(out_dir, "cg_control.csv"),
                            lambda tmp: lattice.process_to_csv(cg.u, tmp, name="u"))
            elif route == "lsmc":
                value, stderr, paths = _route_value("lsmc", fixture, cfg, seed, xi)
                e = cfg.get("ensemble", {})
                ens = sim.generate_ensemble(int(e.get("steps", 100)),
                                                 int(e.get("paths", 100000)),
                                                 p.T, seed)
                basis = RegressionBasis(FAMILY_W, int(e.get("basis_degree", 3)))
                sol = riccati.solve_sre_lsmc(p, ens, basis)
                _atomic_csv(os.path.join(out_dir, "riccati_lsmc.csv"),
                            lambda tmp: riccati.riccati_to_csv(sol, tmp))
                rows.append(("lsmc", paths, sol.value(xi),
                             float(xi @ sol.stderr0 @ xi)))
            else:
                raise ModelError(f"unknown route {route!r}")
        except Exception as exc:
            print(f"solve: route {route!r} failed: {exc}", file=sys.stderr)
            return 1
    _values_csv(os.path.join(out_dir, "values.csv"), rows)
    for r in rows:
        print(f"{r[0]:>10} (resolution {r[1]}): value {r[2]!r}"
              + (f" +- {r[3]!r}" if r[3] else ""))
    return 0


def cmd_verify(cfg, out_dir, seed):
    fixture = _fixture_for(cfg)
    v = cfg.get("verify", {})
    depth = int(v.get("depth", 10))
    reports = verify.run_suite(
        fixture, depth=depth, seed=seed,
        samples=int(v.get("samples", 200)),
        k_mid=v.get("k_mid"),
        checks=v.get("checks"))
    _atomic_csv(os.path.join(out_dir, "verify.csv"),
                lambda tmp: verify.reports_to_csv(reports, tmp))
    print(verify.format_summary(reports))
    return 0 if verify.suite_ok(reports) else 1


def cmd_compare(cfg, out_dir, seed):
    fixture = _fixture_for(cfg)
    c = cfg.get("compare", {})
    routes = c.get("routes", ["ode", "tree"])
    if len(routes) < 2:
        print("compare: need at least two routes", file=sys.stderr)
        return 1
    xi = _xi_for(cfg, "compare", fixture)
    depths = [int(d) for d in c.get("depths", [8, 10, 12])]
    rows = []
    final = {}
    curves = []
    try:
        for route in routes:
            if route == "tree":
                xs, ys = [], []
                for d in depths:
                    sub = dict(cfg)
                    sub["carrier"] = {"depth": d}
                    value, stderr, res = _route_value("tree", fixture, sub, seed, xi)
                    rows.append(("tree", res, value, stderr))
                    xs.append(d)
                    ys.append(value)
                final["tree"] = ys[-1]
                curves.append(("tree", xs, ys))
            else:
                value, stderr, res = _route_value(route, fixture, cfg, seed, xi)
                rows.append((route, res, value, stderr))
                final[route] = value
    except Exception as exc:
        print(f"compare failed: {exc}", file=sys.stderr)
        return 1
    _values_csv(os.path.join(out_dir, "compare.csv"), rows)
    gap_rows = []
    names = list(final)
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            gap_rows.append((f"gap:{names[i]}-{names[j]}", "",
                             final[names[i]] - final[names[j]], 0.0))
    if fixture.known_value is not None:
        for name in names:
            gap_rows.append((f"gap:{name}-analytic", "",
                             final[name] - fixture.known_value, 0.0))
    _values_csv(os.path.join(out_dir, "compare_gaps.csv"), gap_rows)
    if curves:
        _plot(os.path.join(out_dir, "compare.svg"), curves, "tree depth",
              "value", hline=fixture.known_value)
    for r in rows + gap_rows:
        print(f"{r[0]:>20} {r[1]!s:>8}: {r[2]!r}")
    return 0


def cmd_sweep(cfg, out_dir, seed):
    fixture = _fixture_for(cfg)
    s = cfg.get("sweep", {})
    route = s.get("route", "tree")
    param = s.get("parameter", "depth")
    values = s.get("values", [4, 6, 8, 10, 12])
    xi = _xi_for(cfg, "sweep", fixture)
    rows = []
    try:
        for v in values:
            sub = json.loads(json.dumps(cfg))  # deep copy, config is plain data
            if param == "depth":
                sub.setdefault("carrier", {})["depth"] = int(v)
            elif param == "steps":
                if route == "ode":
                    sub.setdefault("solve", {})["ode_steps"] = int(v)
                else:
                    sub.setdefault("ensemble", {})["steps"] = int(v)
            elif param == "paths":
                sub.setdefault("ensemble", {})["paths"] = int(v)
            else:
                raise ModelError(f"unknown sweep parameter {param!r}")
            value, stderr, _ = _route_value(route, fixture, sub, seed, xi)
            rows.append((route, int(v), value, stderr))
    except Exception as exc:
        print(f"sweep failed: {exc}", file=sys.stderr)
        return 1
    _values_csv(os.path.join(out_dir, "sweep.csv"), rows)
    _plot(os.path.join(out_dir, "sweep.svg"),
          [(route, [r[1] for r in rows], [r[2] for r in rows])],
          param, "value", hline=fixture.known_value)
    for r in rows:
        print(f"{param}={r[1]:>8}: {r[2]!r}")
    return 0


COMMANDS = {
    "solve": cmd_solve,
    "verify": cmd_verify,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="slqlab",
        description="stochastic linear-quadratic control laboratory")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="TOML or JSON config, "
                        "or a manifest.json from a previous run")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS thread pools (recorded in the manifest)")
    args = parser.parse_args(argv)

    try:
        cfg, meta = _load_config(args.config)
    except (OSError, ValueError) as exc:
        print(f"cannot read config {args.config!r}: {exc}", file=sys.stderr)
        return 1

    seed = args.seed if args.seed is not None else \
        meta.get("seed") if meta.get("seed") is not None else \
        cfg.get("seed", DEFAULT_SEED)
    out_dir = args.out or cfg.get("output", {}).get("dir", "out")
    os.makedirs(out_dir, exist_ok=True)

    threads = args.threads if args.threads is not None else meta.get("threads")
    limiter = None
    if threads is not None:
        try:
            from threadpoolctl import threadpool_limits
            limiter = threadpool_limits(limits=int(threads))
        except ImportError:
            print("threadpoolctl not available; --threads recorded only",
                  file=sys.stderr)

    _write_manifest(out_dir, args.command, cfg, seed, threads)
    try:
        return COMMANDS[args.command](cfg, out_dir, int(seed))
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
