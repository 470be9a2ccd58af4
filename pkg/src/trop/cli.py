"""Command-line surface: estimate, calibrate, simulate, diagnose.

Structured results go to JSON, Monte Carlo tables to CSV; every output file
is written atomically (temp file + rename) and echoes the seed.  Exit codes:
0 ok, 2 input/data error, 3 solver non-convergence under --strict.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile

import numpy as np
import pandas as pd

from . import seeds
from .baselines import did, mc, sc, sdid
from .errors import TropError
from .estimator import AttResult, att_result_to_json, estimate_att
from .inference import bootstrap_variance
from .panel import load_panel
from .simlab import (
    ablate,
    calibrate,
    run_study,
    spec_from_json,
    spec_to_json,
    sweep,
)
from .theory import theory_battery
from .weights import TuningTriple

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

METHOD_CHOICES = ("trop", "did", "sc", "difp", "sdid", "mc")


def _atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_lambda(text: str) -> TuningTriple:
    """Parse 'unit,time,nn' with 'inf' accepted for the nuclear term."""
    parts = text.split(",")
    if len(parts) != 3:
        raise ValueError(f"--lambda expects unit,time,nn, got {text!r}")
    u, t = float(parts[0]), float(parts[1])
    nn = math.inf if parts[2].strip().lower() in ("inf", "infinity") else float(parts[2])
    return TuningTriple(lambda_unit=u, lambda_time=t, lambda_nn=nn)


def _default_seed() -> int:
    env = os.environ.get("TROP_SEED")
    return int(env) if env else 42


def _emit(args, text: str) -> None:
    if args.output:
        _atomic_write(args.output, text)
    else:
        print(text)


def cmd_estimate(args) -> int:
    panel = load_panel(args.input)
    lam = _parse_lambda(args.lam) if args.lam else None

    if args.method == "trop":
        result = estimate_att(panel, lam=lam)
    else:
        grid = {
            "did": lambda: did(panel),
            "sc": lambda: sc(panel, intercept=False),
            "difp": lambda: sc(panel, intercept=True),
            "sdid": lambda: sdid(panel),
            "mc": lambda: mc(panel, lam_nn=lam.lambda_nn if lam else None),
        }[args.method]()
        taus = {c: float(panel.Y[c] - v) for c, v in grid.yhat0.items()}
        result = AttResult(
            att=grid.att,
            tau_cells=taus,
            lam=lam or (grid.lam or TuningTriple()),
            method=args.method,
            unit_labels=panel.unit_labels,
            time_labels=panel.time_labels,
        )

    if args.strict and not result.converged:
        print("numerical failure: solver hit its iteration cap", file=sys.stderr)
        return EXIT_NUMERIC

    if args.bootstrap:
        boot = bootstrap_variance(
            panel, method=args.method, B=args.bootstrap, seed=args.seed,
            lam=result.lam if args.method in ("trop", "mc") else None,
        )
        result.se = boot.se

    doc = json.loads(att_result_to_json(result))
    doc["seed"] = args.seed
    _emit(args, json.dumps(doc, indent=2))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    panel = seeds.strong_interactive_seed() if args.bundled == "strong" else (
        seeds.small_country_seed() if args.bundled == "small" else load_panel(args.input)
    )
    spec = calibrate(
        panel,
        rank=args.rank,
        n_tr=args.n_tr,
        t_post=args.t_post,
        assignment_mode=args.assignment,
        effect=args.effect,
    )
    doc = json.loads(spec_to_json(spec))
    doc["seed"] = args.seed
    _emit(args, json.dumps(doc))
    return EXIT_OK


def cmd_simulate(args) -> int:
    with open(args.design) as fh:
        spec = spec_from_json(fh.read())
    if args.ablate:
        spec = ablate(spec, args.ablate)
    methods = tuple(args.methods.split(","))
    kw = dict(
        methods=methods,
        reps=args.reps,
        seed=args.seed,
        q_cells_limit=args.q_cells,
        jobs=args.jobs,
    )
    if args.sweep:
        values = [float(v) for v in args.values.split(",")]
        reports = sweep(spec, args.sweep, values, **kw)
        rows = [r for rep in reports for r in rep.rows()]
    else:
        rows = run_study(spec, **kw).rows()
    csv_text = pd.DataFrame(rows).to_csv(index=False)
    _emit(args, csv_text)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    if args.theory:
        counts = theory_battery(instances=args.instances, seed=args.seed)
        doc = {"seed": args.seed, "identities": counts,
               "all_pass": all(v["fail"] == 0 for v in counts.values())}
        _emit(args, json.dumps(doc, indent=2))
        return EXIT_OK
    from .diagnostics import diagnostic_report

    panel = load_panel(args.input)
    lam = _parse_lambda(args.lam) if args.lam else None
    report = diagnostic_report(panel, lam=lam, seed=args.seed)
    doc = json.loads(report.to_json())
    doc["seed"] = args.seed
    _emit(args, json.dumps(doc, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="trop",
        description="Triply robust panel estimation, baselines, and simulation studies.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=_default_seed(),
                        help="RNG seed (env TROP_SEED overrides the default 42)")
        sp.add_argument("--output", help="write result to this file (atomic)")

    e = sub.add_parser("estimate", help="estimate the ATT on a long CSV panel")
    e.add_argument("--input", required=True)
    e.add_argument("--method", choices=METHOD_CHOICES, default="trop")
    e.add_argument("--lambda", dest="lam", default=None,
                   help="fixed tuning triple unit,time,nn ('inf' allowed for nn)")
    e.add_argument("--bootstrap", type=int, default=0, metavar="B",
                   help="bootstrap draws for the standard error")
    e.add_argument("--strict", action="store_true",
                   help="exit 3 on solver non-convergence")
    common(e)
    e.set_defaults(func=cmd_estimate)

    c = sub.add_parser("calibrate", help="fit a simulation design to a seed panel")
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="seed panel CSV")
    src.add_argument("--bundled", choices=("strong", "small"),
                     help="use a bundled synthetic seed panel")
    c.add_argument("--rank", type=int, default=4)
    c.add_argument("--n-tr", type=int, default=10, dest="n_tr")
    c.add_argument("--t-post", type=int, default=10, dest="t_post")
    c.add_argument("--assignment", default="logistic",
                   choices=("logistic", "uniform_random", "sc_weighted", "actual_unit"))
    c.add_argument("--effect", type=float, default=0.0)
    common(c)
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("simulate", help="Monte Carlo study from a design JSON")
    s.add_argument("--design", required=True)
    s.add_argument("--methods", default=",".join(METHOD_CHOICES))
    s.add_argument("--reps", type=int, default=200)
    s.add_argument("--ablate", choices=("no_ar", "no_M", "no_F", "only_noise"))
    s.add_argument("--sweep", choices=("n_control", "t_pre", "n_treated", "t_post"))
    s.add_argument("--values", help="comma-separated sweep values")
    s.add_argument("--q-cells", type=int, default=None, dest="q_cells",
                   help="subsample size for the cross-validation criterion")
    s.add_argument("--jobs", type=int, default=1,
                   help="worker processes (results identical for any value)")
    common(s)
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("diagnose", help="panel diagnostics or theory identity battery")
    d.add_argument("--input", help="panel CSV (omit with --theory)")
    d.add_argument("--lambda", dest="lam", default=None)
    d.add_argument("--theory", action="store_true",
                   help="run the identity checks instead of panel diagnostics")
    d.add_argument("--instances", type=int, default=200)
    common(d)
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "simulate" and args.sweep and not args.values:
        print("error: --sweep requires --values", file=sys.stderr)
        return EXIT_INPUT
    if args.command == "diagnose" and not args.theory and not args.input:
        print("error: diagnose needs --input (or --theory)", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except TropError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except np.linalg.LinAlgError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
