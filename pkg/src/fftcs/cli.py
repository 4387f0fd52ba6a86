"""Command-line front end.

    fftcs solve    --config eta1.json --out runs/eta1
    fftcs sweep    --config eta1.json --eta 0,0.2,0.5,0.8,1,2,10 --out runs/sweep
    fftcs compare  --config multiplicative.json --out runs/compare
    fftcs validate --solution runs/eta1/solution.json --config eta1.json --out runs/eta1

``--config`` accepts a path or the name of a bundled config (``eta1``,
``multiplicative``). Exit status: 0 converged, 2 iteration cap reached,
1 error. Output formats are described in the README.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys

import numpy as np

from . import __version__
from .config import bundled_config, load_config, spec_from_config
from .errors import FftcsError
from .montecarlo import validate, write_report, write_std_csv
from .scp import run
from .subproblem import SolverStatus, SubproblemSolution

log = logging.getLogger("fftcs.cli")

EXIT_OK, EXIT_ERROR, EXIT_MAX_ITER = 0, 1, 2

# reference final times for the additive-noise sweep
TABLE_TF = {0.0: 1.60, 0.2: 1.43, 0.5: 1.35, 0.8: 1.28, 1.0: 1.22, 2.0: 1.08, 10.0: 0.99}
DEFAULT_ETAS = (0.0, 0.2, 0.5, 0.8, 1.0, 2.0, 10.0)


def _say(args, *parts):
    if not args.quiet:
        print(*parts)


def _fmt(x):
    return repr(float(x))


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(type(x).__name__)


def _dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _resolve_config(arg, default):
    name = arg or default
    if os.path.exists(name):
        return load_config(name)
    stem = os.path.splitext(os.path.basename(name))[0]
    try:
        return bundled_config(stem)
    except FileNotFoundError:
        raise FftcsError(f"config not found: {name}") from None


# -- solution files -----------------------------------------------------------

_ARRAYS = ("xbar", "Sigma_x", "v", "sigma", "U", "Y", "Sigma_tilde",
           "kappa_x", "kappa_u", "xi", "zeta_x", "zeta_u")


def solution_to_dict(result, spec):
    sol = result.solution
    return {
        "converged": result.converged,
        "status": result.status,
        "iterations": result.iterations,
        "mode": spec.mode,
        "eta": spec.eta,
        "t_f": result.t_f,
        "policy": {"v": sol.v, "sigma": sol.sigma, "K": result.gains},
        "moments": {"xbar": sol.xbar, "Sigma_x": sol.Sigma_x},
        "gains": result.gains,
        "variables": {k: getattr(sol, k) for k in _ARRAYS},
        "objective_value": sol.objective_value,
        "solver_status": sol.status.value,
    }


def solution_from_dict(doc):
    """Rebuild the :class:`SubproblemSolution` stored in a solution file."""
    var = doc["variables"]
    arrays = {k: np.asarray(var[k], dtype=float) for k in _ARRAYS}
    N = arrays["sigma"].shape[0]
    for key in ("kappa_x", "kappa_u", "zeta_x", "zeta_u"):
        if arrays[key].size == 0:
            arrays[key] = arrays[key].reshape(N, 0)
    return SubproblemSolution(**arrays, objective_value=float(doc["objective_value"]),
                              status=SolverStatus(doc["solver_status"]))


def _t_phys(spec, sigma):
    return np.concatenate([[0.0], np.cumsum(spec.delta_tau * sigma)])


def write_trajectory_csvs(result, spec, out):
    sol = result.solution
    tau, t = spec.tau, _t_phys(spec, sol.sigma)
    n, m = sol.xbar.shape[1], sol.v.shape[1]
    std = np.sqrt(np.maximum(np.diagonal(sol.Sigma_x, axis1=1, axis2=2), 0.0))
    with open(os.path.join(out, "trajectory.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "tau", "t_phys"] + [f"mean_{i}" for i in range(n)] + [f"std_{i}" for i in range(n)])
        for k in range(sol.xbar.shape[0]):
            w.writerow([k, _fmt(tau[k]), _fmt(t[k])] + [_fmt(x) for x in sol.xbar[k]] + [_fmt(x) for x in std[k]])
    K = result.gains
    with open(os.path.join(out, "controls.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["interval", "tau", "t_phys", "sigma"] + [f"v_{j}" for j in range(m)]
                   + [f"K_{j}{i}" for j in range(m) for i in range(n)])
        for k in range(sol.v.shape[0]):
            w.writerow([k, _fmt(tau[k]), _fmt(t[k]), _fmt(sol.sigma[k])] + [_fmt(x) for x in sol.v[k]]
                       + [_fmt(x) for x in K[k].ravel()])


def _solve(spec, out, args):
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "iterations.jsonl")
    with open(path, "w") as fh:
        def record(rec):
            fh.write(json.dumps(rec.as_dict(), sort_keys=True) + "\n")
            _say(args, f"  iter {rec.iteration:3d}  dJ={rec.DeltaJ:+.3e}  chi={rec.chi:.2e}  "
                       f"rho={rec.rho:+.3f}  tr={rec.tr_radius:.2e}  t_f={rec.t_f:.4f}")
        result = run(spec, threads=args.threads, callback=record)
    _dump_json(solution_to_dict(result, spec), os.path.join(out, "solution.json"))
    write_trajectory_csvs(result, spec, out)
    return result


def _spec(args, doc, eta=None, mode=None):
    if eta is not None:
        doc = dict(doc, objective=dict(doc.get("objective", {}), eta=float(eta)))
    return spec_from_config(doc, mode=mode or args.mode, seed=args.seed)


# -- commands -----------------------------------------------------------------

def cmd_solve(args):
    doc = _resolve_config(args.config, "eta1")
    etas = _parse_etas(args.eta) if args.eta else [None]
    if len(etas) != 1:
        raise FftcsError("solve takes one --eta value; use sweep for several")
    spec = _spec(args, doc, etas[0])
    _say(args, f"solving: mode={spec.mode} eta={spec.eta} N={spec.N}")
    result = _solve(spec, args.out, args)
    _say(args, f"{result.status} after {result.iterations} iterations, t_f = {result.t_f:.4f}")
    return EXIT_OK if result.converged else EXIT_MAX_ITER


def _parse_etas(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise FftcsError(f"--eta: expected a comma-separated list of numbers, got {text!r}") from None


def cmd_sweep(args):
    doc = _resolve_config(args.config, "eta1")
    etas = _parse_etas(args.eta) if args.eta else list(DEFAULT_ETAS)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for eta in etas:
        spec = _spec(args, doc, eta)
        _say(args, f"eta = {eta:g}")
        result = _solve(spec, os.path.join(args.out, f"eta_{eta:g}"), args)
        rows.append((eta, result.t_f, result.iterations, result.converged))
    with open(os.path.join(args.out, "sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eta", "t_f", "iterations", "converged"])
        for eta, tf, it, ok in rows:
            w.writerow([_fmt(eta), _fmt(tf), it, int(ok)])

    _say(args, f"\n{'eta':>6} {'t_f':>8} {'table':>6} {'rel':>7} {'iters':>5}  converged")
    for eta, tf, it, ok in rows:
        ref = TABLE_TF.get(eta)
        rel = f"{(tf - ref) / ref:+.1%}" if ref else "-"
        _say(args, f"{eta:6g} {tf:8.4f} {ref if ref else '-':>6} {rel:>7} {it:5d}  {ok}")
    order = sorted(rows)
    monotone = all(b[1] <= a[1] + 1e-9 for a, b in zip(order, order[1:]))
    if not monotone:
        print("error: final time is not monotone nonincreasing in eta", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK if all(r[3] for r in rows) else EXIT_MAX_ITER


def cmd_compare(args):
    doc = _resolve_config(args.config, "multiplicative")
    os.makedirs(args.out, exist_ok=True)
    reports, results, specs = {}, {}, {}
    for mode in ("full", "frozen"):
        spec = _spec(args, doc, mode=mode)
        _say(args, f"mode = {mode}")
        results[mode] = _solve(spec, os.path.join(args.out, mode), args)
        reports[mode] = validate(spec.dynamics, results[mode], spec, threads=args.threads)
        write_report(reports[mode], os.path.join(args.out, mode, "mc_report.json"))
        specs[mode] = spec

    n = specs["full"].dynamics.state_dim
    with open(os.path.join(args.out, "compare.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["node", "tau"]
        for mode in ("full", "frozen"):
            header += [f"t_phys_{mode}"]
            header += [f"{kind}_std_{i}_{mode}" for kind in ("analytic", "empirical") for i in range(n)]
        w.writerow(header)
        for k in range(specs["full"].N + 1):
            row = [k, _fmt(specs["full"].tau[k])]
            for mode in ("full", "frozen"):
                rep = reports[mode]
                emp = np.sqrt(np.maximum(np.diag(rep.empirical_cov[k]), 0.0))
                row += [_fmt(rep.node_time[k])] + [_fmt(x) for x in rep.analytic_std[k]] + [_fmt(x) for x in emp]
            w.writerow(row)

    target = math.sqrt(specs["full"].Sigma_f[0, 0])
    summary = {"target_position_std": target, "seed": reports["full"].seed}
    for mode in ("full", "frozen"):
        rep = reports[mode]
        summary[mode] = {
            "converged": results[mode].converged,
            "iterations": results[mode].iterations,
            "t_f": results[mode].t_f,
            "terminal_position_std": float(rep.terminal_std[0]),
            "planned_terminal_position_std": float(rep.analytic_std[-1, 0]),
            # empirical minus the std the discrete model predicts for this policy
            "terminal_position_std_error": float(rep.terminal_std[0] - rep.analytic_std[-1, 0]),
            "terminal_position_std_error_vs_target": float(rep.terminal_std[0] - target),
        }
    _dump_json(summary, os.path.join(args.out, "compare_summary.json"))
    _say(args, f"terminal position std error: full {summary['full']['terminal_position_std_error']:+.4f}, "
               f"frozen {summary['frozen']['terminal_position_std_error']:+.4f}")
    return EXIT_OK if all(r.converged for r in results.values()) else EXIT_MAX_ITER


def cmd_validate(args):
    if not args.solution:
        raise FftcsError("validate requires --solution")
    doc = _resolve_config(args.config, "eta1")
    with open(args.solution) as fh:
        stored = json.load(fh)
    spec = _spec(args, doc, stored.get("eta"), mode=args.mode or stored.get("mode"))
    sol = solution_from_dict(stored)
    report = validate(spec.dynamics, sol, spec, threads=args.threads)
    out = args.out or os.path.dirname(os.path.abspath(args.solution))
    os.makedirs(out, exist_ok=True)
    write_report(report, os.path.join(out, "mc_report.json"))
    write_std_csv(report, os.path.join(out, "mc_std.csv"))
    _say(args, f"{report.n_rollouts} rollouts (seed {report.seed}, {report.n_failed} failed): "
               f"terminal std {np.round(report.terminal_std, 4).tolist()}, "
               f"worst-case control risk {report.worst_case_control_risk:.3f}")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "sweep": cmd_sweep, "compare": cmd_compare, "validate": cmd_validate}


def build_parser():
    p = argparse.ArgumentParser(prog="fftcs", description="Free-final-time covariance steering.")
    p.add_argument("--version", action="version", version=f"fftcs {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="config path or bundled name")
        s.add_argument("--out", default=None if name == "validate" else f"fftcs_{name}",
                       help="output directory")
        s.add_argument("--mode", choices=("full", "frozen"))
        s.add_argument("--eta", help="comma-separated list of eta values")
        s.add_argument("--seed", type=int, help="Monte Carlo seed, overrides the config")
        s.add_argument("--quiet", action="store_true")
        if name == "validate":
            s.add_argument("--solution", help="solution.json from a previous solve")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    env = os.environ.get("FFTCS_THREADS")
    args.threads = int(env) if env and env.isdigit() else 1
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except FftcsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
