"""Command-line experiment runner: ``mfctree {solve,verify,derivatives,lq-bench,master-residual}``.

Exit codes: 0 success, 1 a check failed, 2 configuration error, 3 the
solver refused the problem (non-positive convexity margin).
"""
import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig
from .derivatives import (SkippedError, gaussian_direction, second_directional, tagged_solve)
from .dynamics import TimeGrid, build_tree, draw_noise, sample_initial_particles
from .lq_oracle import ParameterError
from .model import ConfigurationError, make_problem
from .solver import SolvabilityError, SolveOptions, solve_mfc
from . import verify as V

log = logging.getLogger("mfctree")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_REFUSED = 0, 1, 2, 3
ALL_CHECKS = ("gradient", "convexity_gap", "ito", "dpp", "flow", "bellman", "independence", "value_bounds",
              "lipschitz_DV")


# ---------------------------------------------------------------------------
# building blocks

def build_problem(cfg):
    params = dict(cfg["problem"]["params"])
    try:
        return make_problem(cfg["problem"]["family"], **params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for family {cfg['problem']['family']!r}: {exc}") from None


def build_setup(cfg, spec, seed):
    g, t, p = cfg["grid"], cfg["tree"], cfg["particles"]
    tree = build_tree(TimeGrid(float(g["t0"]), spec.T, int(g["K"])), int(t["branching"]), t["mode"], spec.n)
    workers = int(cfg["run"]["workers"])
    noise = draw_noise(tree, int(p["N"]), seed, t["center"], workers=workers)
    X0 = sample_initial_particles(int(p["N"]), spec.n, seed, p["init_mean"], p["init_std"])
    return tree, noise, X0


def solver_options(cfg):
    s = cfg["solver"]
    return SolveOptions(max_iters=int(s["max_iters"]), grad_tol=float(s["grad_tol"]), step_rule=s["step_rule"],
                        backend=s["backend"], workers=int(cfg["run"]["workers"]))


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(V._jsonable(obj), fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _manifest(out, cfg, command, seed, started, outputs):
    _write_json(out / "manifest.json", {
        "command": command, "config_source": cfg.source, "config_hash": cfg.hash(), "config": cfg.data,
        "seed": seed, "workers": int(cfg["run"]["workers"]), "wall_clock_seconds": time.perf_counter() - started,
        "versions": {"mfctree": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "outputs": sorted(outputs),
    })


# ---------------------------------------------------------------------------
# subcommands

def cmd_solve(cfg, out, seed):
    spec = build_problem(cfg)
    tree, noise, X0 = build_setup(cfg, spec, seed)
    sol = solve_mfc(spec, X0, tree, noise, solver_options(cfg))
    summary = dict(sol.summary(), config_hash=cfg.hash(), seed=seed, K=tree.K, N=X0.shape[0],
                   n=spec.n, children=tree.n_children, family=cfg["problem"]["family"])
    _write_json(out / "summary.json", summary)
    Z0 = np.asarray(sol.Z0)[0]
    U0 = np.asarray(sol.control.levels[0])[0]
    rows = [[i] + list(X0[i]) + list(U0[i]) + list(Z0[i]) for i in range(X0.shape[0])]
    n = spec.n
    header = ["particle"] + [f"x{j}" for j in range(n)] + [f"u{j}" for j in range(n)] + [f"z{j}" for j in range(n)]
    _write_csv(out / "initial.csv", header, rows)
    _write_csv(out / "history.csv", ["iteration", "cost"], list(enumerate(sol.history)))
    return EXIT_OK, ["summary.json", "initial.csv", "history.csv"]


def run_checks(cfg, seed, select=None):
    spec = build_problem(cfg)
    c = cfg["checks"]
    select = select or c["select"] or ALL_CHECKS
    unknown = set(select) - set(ALL_CHECKS)
    if unknown:
        raise ConfigError(f"unknown checks {sorted(unknown)}")
    reports = []
    tree, noise, X0 = build_setup(cfg, spec, seed)
    sol = None

    def solution():
        nonlocal sol
        if sol is None:
            sol = solve_mfc(spec, X0, tree, noise, solver_options(cfg))
        return sol

    k1 = int(c["k1"]) if c["k1"] is not None else tree.K // 2
    for name in ALL_CHECKS:
        if name not in select:
            continue
        log.info("running check %s", name)
        if name == "gradient":
            rep = V.check_gradient(spec, tree, noise, X0, seed=seed)
        elif name == "convexity_gap":
            rep = V.check_convexity_gap(spec, tree, noise, X0, seed=seed)
        elif name == "ito":
            from .model import moment_functional

            rep = V.check_ito(spec, moment_functional(1.0), K=tree.K, N=int(c["ito_N"]),
                              branching=tree.branching, seed=seed, paths=int(c["ito_paths"]))
        elif name == "dpp":
            rep = V.check_dpp(solution(), k1)
        elif name == "flow":
            rep = V.check_flow(solution(), k1)
        elif name == "bellman":
            rep = V.check_bellman(solution(), n_dirs=int(c["bellman_dirs"]), dir_seed=seed)
        elif name == "independence":
            rep = V.check_independence(spec.F, X0, seed=seed)
        elif name == "value_bounds":
            rep = V.check_value_bounds(spec, seed=seed)
        else:
            rep = V.check_lipschitz_DV(spec, seed=seed)
        reports.append(rep)
    return reports


def cmd_verify(cfg, out, seed):
    reports = run_checks(cfg, seed)
    _write_json(out / "report.json", [r.to_dict() for r in reports])
    for r in reports:
        log.info("%s %s observed=%.6g bound=%.6g tol=%.3g", r.name, r.status, r.observed, r.bound_or_target,
                 r.tolerance)
        print(f"{r.name}: {r.status} (observed {r.observed:.6g}, bound {r.bound_or_target:.6g}, tol {r.tolerance:.3g})")
    failed = any(r.status == V.FAIL for r in reports)
    return (EXIT_CHECK_FAILED if failed else EXIT_OK), ["report.json"]


def cmd_derivatives(cfg, out, seed):
    spec = build_problem(cfg)
    tree, noise, X0 = build_setup(cfg, spec, seed)
    sol = solve_mfc(spec, X0, tree, noise, solver_options(cfg))
    d = cfg["derivatives"]
    xs = np.linspace(float(d["x_min"]), float(d["x_max"]), int(d["x_num"]))
    pts = np.zeros((len(xs), spec.n))
    pts[:, 0] = xs
    tg = tagged_solve(spec, sol, pts, seed)
    header = [f"x{j}" for j in range(spec.n)] + ["U"] + [f"DU{j}" for j in range(spec.n)]
    _write_csv(out / "U.csv", header, [list(pts[i]) + [tg.U[i]] + list(tg.DU[i]) for i in range(len(xs))])
    N = X0.shape[0]
    quotients, results, dirs = [], [], []
    summary = {"config_hash": cfg.hash(), "seed": seed, "value": sol.value}
    try:
        for m in range(int(d["directions"])):
            dv = gaussian_direction(N, spec.n, seed + m, center=False)
            sd = second_directional(spec, sol, dv)
            quotients.append(sd.pair(dv) / (float(np.sum(dv * dv)) / N))
            results.append(sd)
            dirs.append(dv)
        asym = max((abs(a.pair(dirs[j]) - b.pair(dirs[i])) for i, a in enumerate(results)
                    for j, b in enumerate(results) if i < j), default=0.0)
        summary["second_derivative"] = {
            "rayleigh_quotients": quotients, "min": min(quotients), "max": max(quotients),
            "mean": float(np.mean(quotients)), "max_asymmetry": asym,
            "bound_ratios": [r.bound_ratio for r in results],
        }
    except SkippedError as exc:
        summary["second_derivative"] = {"status": "SKIPPED", "reason": str(exc)}
    _write_json(out / "derivatives.json", summary)
    return EXIT_OK, ["U.csv", "derivatives.json"]


def cmd_lq_bench(cfg, out, seed):
    from .lq_oracle import LQSpec, lqr_tree_solve, riccati_solve

    if cfg["problem"]["family"] != "lq":
        raise ConfigError("lq-bench needs problem.family = 'lq'")
    try:
        lq = LQSpec(**cfg["problem"]["params"])
    except TypeError as exc:
        raise ConfigError(f"bad parameters for family 'lq': {exc}") from None
    spec = lq.to_problem()
    b = cfg["bench"]
    N, B = int(b["N"]), int(cfg["tree"]["branching"])
    X0 = sample_initial_particles(N, spec.n, seed, cfg["particles"]["init_mean"], cfg["particles"]["init_std"])
    rows = []
    for K in b["K_values"]:
        tree = build_tree(TimeGrid(0.0, spec.T, int(K)), B, cfg["tree"]["mode"], spec.n)
        noise = draw_noise(tree, N, seed, cfg["tree"]["center"])
        sol = solve_mfc(spec, X0, tree, noise, solver_options(cfg))
        oracle = lqr_tree_solve(lq, tree, noise, X0)
        ric = riccati_solve(lq, tree.grid)
        ctrl_err = sol.control.max_abs_diff(oracle.control)
        gap = max(float(np.max(np.abs(np.asarray(sol.control.levels[k]) - ric.feedback(k, sol.ensemble.levels[k]))))
                  for k in range(tree.K))
        rows.append([int(K), N, B, ctrl_err, abs(sol.value - oracle.value), abs(sol.value - ric.value(X0)), gap])
    Ks = np.array([r[0] for r in rows], dtype=float)
    gaps = np.array([r[6] for r in rows])
    order = float(-np.polyfit(np.log(Ks), np.log(gaps), 1)[0]) if len(rows) > 1 and np.all(gaps > 0) else float("nan")
    rows = [r + [order] for r in rows]
    _write_csv(out / "lq_bench.csv", ["K", "N", "B", "control_error_tree", "value_error_tree", "value_error_riccati",
                                      "riccati_control_gap", "fitted_order"], rows)
    return EXIT_OK, ["lq_bench.csv"]


def cmd_master_residual(cfg, out, seed):
    spec = build_problem(cfg)
    tree, noise, X0 = build_setup(cfg, spec, seed)
    sol = solve_mfc(spec, X0, tree, noise, solver_options(cfg))
    m = cfg["master"]
    xs = np.zeros((len(m["x_samples"]), spec.n))
    xs[:, 0] = m["x_samples"]
    rep = V.check_master_residual(spec, sol, xs, h=float(m["h"]), copies=m["copies"])
    _write_json(out / "master.json", rep.to_dict())
    print(f"{rep.name}: {rep.status} (observed {rep.observed:.6g}, tol {rep.tolerance:.3g})")
    return (EXIT_CHECK_FAILED if rep.status == V.FAIL else EXIT_OK), ["master.json"]


COMMANDS = {
    "solve": cmd_solve, "verify": cmd_verify, "derivatives": cmd_derivatives, "lq-bench": cmd_lq_bench,
    "master-residual": cmd_master_residual,
}


def make_parser():
    parser = argparse.ArgumentParser(prog="mfctree", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="TOML experiment file")
        p.add_argument("--seed", type=int, help="seed (overrides run.seed)")
        p.add_argument("--out", type=Path, help="output directory (overrides run.out)")
        p.add_argument("--workers", type=int, help="worker threads (overrides run.workers)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="set a dotted configuration key; repeatable")
    return parser


def main(argv=None):
    logging.basicConfig(level=os.environ.get("MFC_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = make_parser().parse_args(argv)
    overrides = list(args.override)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"run.workers={args.workers}")
    if args.out is not None:
        overrides.append(f"run.out={json.dumps(str(args.out))}")
    started = time.perf_counter()
    try:
        cfg = ExperimentConfig.load(args.config, overrides)
        out = Path(cfg["run"]["out"])
        out.mkdir(parents=True, exist_ok=True)
        seed = int(cfg["run"]["seed"])
        code, outputs = COMMANDS[args.command](cfg, out, seed)
    except (ConfigError, ConfigurationError, ParameterError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolvabilityError as exc:
        print(f"solver refused the problem: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    _manifest(out, cfg, args.command, seed, started, outputs + ["manifest.json"])
    return code


if __name__ == "__main__":
    sys.exit(main())
