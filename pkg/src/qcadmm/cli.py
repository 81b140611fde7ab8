"""Command-line front end: instance generation, solving, Monte-Carlo campaigns.

Exit codes: 0 success, 1 the solver reported infeasibility on some trial,
2 usage or I/O error.  All numeric CSV columns reproduce bit-exactly for a
fixed seed (wall-time columns excepted).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import sys
from dataclasses import replace

import numpy as np

from . import apps
from .admm import SolverConfig, run
from .apps import (BeamformingInstance, FppInstance, PhaseRetrievalInstance,
                   gen_instance, load_instance, metric_mse, save_instance)
from .errors import QcadmmError
from .model import QcqpProblem

SOLVE_HEADER = ("seed", "phase1_iters", "phase2_iters", "objective",
                "max_violation", "kkt_stationarity", "mse_db", "wall_time")
CAMPAIGN_HEADER = ("kind", "n", "m", "trials", "success_rate", "mean_objective",
                   "mean_iterations", "mean_mse_db", "mean_wall_time")


def _config_from_args(args, seed: int) -> SolverConfig:
    cfg = SolverConfig(seed=seed)
    if args.rho is not None:
        cfg = replace(cfg, rho=args.rho)
    if args.max_iter is not None:
        cfg = replace(cfg, max_iter_phase1=min(args.max_iter, 1000),
                      max_iter_phase2=args.max_iter)
    if args.tol is not None:
        cfg = replace(cfg, tol_successive=args.tol)
    if args.restarts is not None:
        cfg = replace(cfg, restarts_phase1=args.restarts)
    cfg = replace(cfg, root_method=args.root_method)
    return cfg


def _trace_path(base, trial: int, trials: int):
    if base is None:
        return None
    if trials == 1:
        return base
    stem, dot, ext = base.rpartition(".")
    return f"{stem}_trial{trial}.{ext}" if dot else f"{base}_trial{trial}"


def _solve_one(inst, args, seed: int, trace):
    cfg = _config_from_args(args, seed)
    rho = args.rho
    if isinstance(inst, FppInstance):
        report = apps.fpp_solve(inst, cfg if rho is None else replace(cfg, rho=rho),
                                trace_path=trace)
        mse = None
    elif isinstance(inst, BeamformingInstance):
        if inst.l > 0:
            report = apps.mb_secondary(inst, cfg, rho=rho, trace_path=trace)
        else:
            report = apps.mb_single_group(inst, cfg, rho=rho, trace_path=trace)
        mse = None
    elif isinstance(inst, PhaseRetrievalInstance):
        if args.max_iter is None:
            cfg = replace(cfg, max_iter_phase2=100000)
        report = apps.pr_solve(inst, cfg, trace_path=trace)
        mse = report.mse_db
    elif isinstance(inst, QcqpProblem):
        report = run(inst, cfg, trace_path=trace)
        mse = None
    else:
        raise QcadmmError(f"cannot solve {type(inst).__name__}")
    return report, mse


def _solve_row(report, mse, seed: int):
    return [seed, report.iterations_phase1, report.iterations_phase2,
            repr(report.objective), repr(report.max_violation),
            repr(report.kkt_stationarity),
            "" if mse is None else repr(mse), repr(report.wall_time)]


def _write_rows(path, header, rows):
    fh = open(path, "w", newline="", encoding="utf-8") if path else sys.stdout
    try:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    finally:
        if path:
            fh.close()


def _trial_job(payload):
    inst_dict, args_dict, seed, trace = payload
    inst = apps.instance_from_dict(inst_dict)
    args = argparse.Namespace(**args_dict)
    report, mse = _solve_one(inst, args, seed, trace)
    return _solve_row(report, mse, seed), report.phase1_feasible


def cmd_generate(args) -> int:
    kwargs = {}
    if args.kind == "mb":
        kwargs = {"snr_target": args.tau, "interference_cap": args.eta}
    elif args.kind == "pr":
        kwargs = {"eps": args.eps, "snr_db": args.snr_db}
        inst = gen_instance("pr", args.n, args.m, noise=args.noise,
                            seed=args.seed, **kwargs)
        save_instance(inst, args.out)
        energy = float(np.sum(np.abs(inst.truth) ** 2))
        print(f"signal energy: {energy:.6g}", file=sys.stderr)
        return 0
    inst = gen_instance(args.kind, args.n, args.m, l=args.l, seed=args.seed,
                        **kwargs)
    save_instance(inst, args.out)
    if isinstance(inst, FppInstance):
        print(f"embedded feasible point norm^2: "
              f"{float(np.sum(np.abs(inst.x_feas) ** 2)):.6g}", file=sys.stderr)
    return 0


def cmd_solve(args) -> int:
    inst = load_instance(args.instance)
    rows = []
    any_infeasible = False
    if args.threads > 1:
        inst_dict = apps.instance_to_dict(inst)
        payloads = [(inst_dict, vars(args), args.seed + t,
                     _trace_path(args.trace, t, args.trials))
                    for t in range(args.trials)]
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.threads) as ex:
            for row, feasible in ex.map(_trial_job, payloads):
                rows.append(row)
                any_infeasible |= not feasible
    else:
        for t in range(args.trials):
            seed = args.seed + t
            report, mse = _solve_one(inst, args, seed,
                                     _trace_path(args.trace, t, args.trials))
            rows.append(_solve_row(report, mse, seed))
            any_infeasible |= not report.phase1_feasible
    _write_rows(args.out, SOLVE_HEADER, rows)
    return 1 if any_infeasible else 0


def cmd_campaign(args) -> int:
    m_values = [int(v) for v in args.m_list.split(",")]
    agg_rows = []
    detail_rows = []
    any_infeasible = False
    for m in m_values:
        successes = 0
        objs, iters, mses, walls = [], [], [], []
        for t in range(args.trials):
            seed = args.seed + t
            inst = gen_instance(args.kind, args.n, m, l=args.l,
                                noise=args.noise, seed=seed)
            report, mse = _solve_one(inst, args, seed, None)
            total_iters = report.iterations_phase1 + report.iterations_phase2
            if args.kind == "pr":
                err = apps.alignment_error(report.x, inst.truth)
                ok = err < 1e-5
            else:
                ok = report.phase1_feasible and report.max_violation <= 1e-6
            successes += ok
            any_infeasible |= not report.phase1_feasible
            objs.append(report.objective)
            iters.append(total_iters)
            walls.append(report.wall_time)
            if mse is not None:
                mses.append(mse)
            detail_rows.append([m] + _solve_row(report, mse, seed))
        agg_rows.append([args.kind, args.n, m, args.trials,
                         repr(successes / args.trials),
                         repr(float(np.mean(objs))),
                         repr(float(np.mean(iters))),
                         repr(float(np.mean(mses))) if mses else "",
                         repr(float(np.mean(walls)))])
    _write_rows(args.out, CAMPAIGN_HEADER, agg_rows)
    if args.details:
        _write_rows(args.details, ("m",) + SOLVE_HEADER, detail_rows)
    return 1 if any_infeasible else 0


def _add_solver_flags(sub):
    sub.add_argument("--rho", type=float, default=None)
    sub.add_argument("--max-iter", type=int, default=None)
    sub.add_argument("--tol", type=float, default=None)
    sub.add_argument("--root-method", choices=("bisection", "newton"),
                     default="bisection")
    sub.add_argument("--restarts", type=int, default=None)
    sub.add_argument("--threads", type=int, default=1)
    sub.add_argument("--trials", type=int, default=1)
    sub.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qcadmm")
    cmds = parser.add_subparsers(dest="command", required=True)

    gen = cmds.add_parser("generate", help="write a random instance file")
    gen.add_argument("kind", choices=("fpp", "mb", "pr"))
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--m", type=int, required=True)
    gen.add_argument("--l", type=int, default=0)
    gen.add_argument("--tau", type=float, default=1.0)
    gen.add_argument("--eta", type=float, default=1.0)
    gen.add_argument("--noise", choices=apps.NOISE_MODELS, default="noiseless")
    gen.add_argument("--eps", type=float, default=0.5)
    gen.add_argument("--snr-db", type=float, default=20.0)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_generate)

    solve = cmds.add_parser("solve", help="solve an instance file")
    solve.add_argument("instance")
    solve.add_argument("--out", default=None)
    solve.add_argument("--trace", default=None)
    _add_solver_flags(solve)
    solve.set_defaults(func=cmd_solve)

    camp = cmds.add_parser("campaign", help="sweep m over fresh instances")
    camp.add_argument("--kind", choices=("fpp", "mb", "pr"), required=True)
    camp.add_argument("--n", type=int, required=True)
    camp.add_argument("--m-list", required=True,
                      help="comma-separated measurement/constraint counts")
    camp.add_argument("--l", type=int, default=0)
    camp.add_argument("--noise", choices=apps.NOISE_MODELS, default=None)
    camp.add_argument("--out", default=None)
    camp.add_argument("--details", default=None)
    _add_solver_flags(camp)
    camp.set_defaults(func=cmd_campaign)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (QcadmmError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
