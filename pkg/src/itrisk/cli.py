"""Command-line entry point: ``itrisk {simulate,run,risk,debias}``.

Exit status is 0 on success, 2 for configuration or usage errors and 1 for
any other failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .errors import ConfigError, InvalidParameterError
from .harness import RISK_COLUMNS, ExperimentConfig, emit_csv, format_value, run_experiment
from .inference import early_stop, inference_report, risk_path
from .memory import DEFAULT_SKETCH_SIZE, METHODS, build_memory, save_memory, weights
from .model import SimulationConfig, generate_instance, load_instance, save_instance, true_risk_path
from .solvers import SolverConfig, run_trajectory, save_trajectory

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

INFERENCE_COLUMNS = ("t", "j", "b_debias", "z", "ci_lo", "ci_hi", "covered")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _load_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _add_solver_flags(p):
    p.add_argument("--algorithm", default="GD", help="GD, AGD, ISTA, FISTA or LQA_MCP")
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--T", type=int, default=100, help="number of iterates")


def _add_memory_flags(p):
    p.add_argument("--method", choices=METHODS, default=None)
    p.add_argument("--m", type=int, default=None, help="sketch width for --method hutchinson")


def build_parser():
    parser = _Parser(prog="itrisk", description="Risk estimation along first-order solver trajectories.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic instance and save it as CSV")
    p.add_argument("--config", help="JSON with a 'sim' object (or the bare simulation fields)")
    p.add_argument("--n", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--snr", type=float)
    p.add_argument("--sigma2", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--rep", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="run a replicated experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out")
    _add_memory_flags(p)

    for name, help_ in (("risk", "risk curve for a saved instance"), ("debias", "debiased coordinates and intervals")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--instance", required=True, help="directory written by 'simulate'")
        p.add_argument("--config", help="JSON solver object (same fields as an entry of 'solvers')")
        _add_solver_flags(p)
        _add_memory_flags(p)
        p.add_argument("--seed", type=int, default=0, help="sketch seed")
        p.add_argument("--out", required=True)
        if name == "debias":
            p.add_argument("--t", type=int, default=None, help="iterate (default: estimated-risk minimizer)")
            p.add_argument("--j", type=int, nargs="+", default=[1], help="1-based coordinates")
            p.add_argument("--alpha", type=float, default=0.05)
    return parser


def _cmd_simulate(args):
    fields = {}
    if args.config:
        obj = _load_json(args.config)
        fields = dict(obj.get("sim", obj))
    for key in ("n", "p", "rho", "snr", "sigma2", "seed"):
        val = getattr(args, key)
        if val is not None:
            fields[key] = val
    try:
        cfg = SimulationConfig(**fields)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    inst = generate_instance(cfg, rep=args.rep)
    save_instance(inst, args.out)
    print(f"wrote instance n={cfg.n} p={cfg.p} seed={cfg.seed} rep={args.rep} to {args.out}")


def _cmd_run(args):
    cfg = ExperimentConfig.from_json(args.config)
    cfg = cfg.with_overrides(seed=args.seed, threads=args.threads, output_dir=args.out, memory_method=args.method, m=args.m)
    out = run_experiment(cfg)
    paths = emit_csv(out, cfg.output_dir)
    print(f"wrote {len(paths)} files to {cfg.output_dir}")


def _solver_from_args(args):
    if args.config:
        return SolverConfig.from_dict(_load_json(args.config))
    return SolverConfig(args.algorithm, T=args.T, eta=args.eta, lam=args.lam, tau=args.tau)


def _fit_saved(args):
    inst = load_instance(args.instance)
    solver = _solver_from_args(args)
    method = args.method or "exact"
    traj = run_trajectory(inst, solver)
    mem = build_memory(traj, inst.X, method=method, m=args.m or DEFAULT_SKETCH_SIZE, seed=args.seed)
    W = weights(mem, inst.n)
    return inst, solver, traj, mem, W


def _cmd_risk(args):
    inst, solver, traj, mem, W = _fit_saved(args)
    r_hat = risk_path(traj.F, W)
    r_true = true_risk_path(traj.B, inst.truth) if inst.truth is not None else [None] * traj.T
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "risk_curve.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RISK_COLUMNS)
        for t in range(1, traj.T + 1):
            w.writerow([format_value(v) for v in (0, solver.name, t, float(r_hat[t - 1]), r_true[t - 1], None)])
    save_memory(mem, W, args.out)
    save_trajectory(traj, args.out)
    print(f"t_hat={early_stop(r_hat)} r_hat={r_hat[early_stop(r_hat) - 1]:.6g}; wrote {args.out}")


def _cmd_debias(args):
    inst, solver, traj, mem, W = _fit_saved(args)
    r_hat = risk_path(traj.F, W)
    t = early_stop(r_hat) if args.t is None else args.t
    if inst.truth is not None:
        Sigma, b_star = inst.truth.Sigma, inst.truth.b_star
    else:
        Sigma, b_star = np.eye(inst.p), None
    report = inference_report(traj, W, Sigma, [t], args.j, alpha=args.alpha, b_star=b_star, r_hat=r_hat)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "inference.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INFERENCE_COLUMNS)
        for e in report.entries:
            w.writerow([format_value(v) for v in (e.t, e.j, e.b_debias, e.z, e.ci_lo, e.ci_hi, e.covered)])
    print(f"wrote {len(report.entries)} rows at t={t} to {args.out}")


COMMANDS = {"simulate": _cmd_simulate, "run": _cmd_run, "risk": _cmd_risk, "debias": _cmd_debias}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        COMMANDS[args.command](args)
    except (ConfigError, InvalidParameterError) as exc:
        print(f"itrisk: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"itrisk: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
