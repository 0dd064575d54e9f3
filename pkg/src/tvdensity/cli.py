"""Command-line interface: fit, eval, target, tf, simulate, sample.

Exit codes: 0 on success, 1 on numerical failure (solver or targeting did
not produce a result), 2 on usage or I/O errors (bad flags, unreadable or
out-of-range input, malformed JSON).  Every subcommand accepts --seed and is
deterministic under it.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from . import __version__
from .basis import make_basis_spec, validate_support
from .cv import CvPlan, cross_validate, default_lambda_grid
from .dgp import DGP_ORDER, get_dgp, sample
from .errors import DataError, SupportError, TvdError
from .harness import load_plan, run_experiments
from .inference import DEFAULT_RIDGE_SCALE, delta_method_band
from .model import (
    FittedDensity,
    LogSplineProblem,
    QuadratureGrid,
    default_grid_size,
    load_model,
    save_model,
)
from .solvers import SolverConfig, fit_penalized
from .targeting import parse_estimand, report_to_dict, tmle_target
from .trendfilter import AdmmConfig, admm_fit, make_tf_problem, tfpp_variant

ALGORITHM_CHOICES = ("prox_newton", "fista", "prox_adagrad", "prox_newton_lbfgs")


def read_data(path: str, col: str | None = None) -> np.ndarray:
    """Newline-delimited floats, or a named CSV column when ``col`` is given."""
    if not os.path.isfile(path):
        raise DataError(f"no data: cannot read '{path}'")
    values: list[float] = []
    try:
        with open(path, "r", encoding="utf-8") as handle:
            if col is not None:
                reader = csv.DictReader(handle)
                if reader.fieldnames is None or col not in reader.fieldnames:
                    raise DataError(f"no data: column '{col}' not found in '{path}'")
                for row in reader:
                    values.append(float(row[col]))
            else:
                for line in handle:
                    line = line.strip()
                    if line:
                        values.append(float(line))
    except ValueError as exc:
        raise DataError(f"no data: could not parse '{path}': {exc}") from exc
    return validate_support(np.asarray(values, dtype=np.float64))


def _count_active_knots(fit: FittedDensity) -> int:
    num_parametric = fit.spec.num_parametric
    return int(np.sum(fit.active_set >= num_parametric))


def cmd_fit(args: argparse.Namespace) -> int:
    data = read_data(args.data, args.col)
    n = data.size
    if args.max_knots is not None and args.max_knots <= 0:
        args.max_knots = None
    grid_size = args.grid if args.grid is not None else default_grid_size(n)
    grid = QuadratureGrid.uniform(grid_size)
    if args.cv:
        lam_grid = default_lambda_grid(data, size=args.cv_points, max_knots=args.max_knots, grid=grid)
        plan = CvPlan(
            lambda_grid=lam_grid,
            seed=args.seed,
            undersmooth_factor=args.undersmooth,
            max_knots=args.max_knots,
        )
        result = cross_validate(data, plan, SolverConfig(algorithm=args.solver))
        fit = result.fit
        lam, order = result.best_lambda, result.best_order
    else:
        if args.lam is None:
            print("error: provide --lambda or --cv", file=sys.stderr)
            return 2
        spec = make_basis_spec(data, order=args.order, max_knots=args.max_knots)
        problem = LogSplineProblem(spec, data, grid)
        fit = fit_penalized(problem, SolverConfig(algorithm=args.solver, lam=args.lam))
        lam, order = args.lam, args.order
    if args.out:
        save_model(fit, args.out)
    nll = -float(fit.log_density(data).sum())
    print(
        f"n={n} order={order} lambda={lam:.6g} active_knots={_count_active_knots(fit)} "
        f"nll={nll:.6f} converged={fit.converged}"
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    fit = load_model(args.model)
    if args.at is not None:
        x = np.array([args.at])
    else:
        x = np.linspace(0.0, 1.0, args.grid_points)
    if args.ci:
        if args.data is None:
            print("error: --ci requires --data", file=sys.stderr)
            return 2
        data = read_data(args.data, args.col)
        band = delta_method_band(fit, data, x, ridge_scale=args.ridge_scale)
        if args.out:
            band.to_csv(args.out)
        else:
            for i in range(x.size):
                print(f"{x[i]:.6f} {band.density[i]:.8f} {band.se[i]:.8f} {band.lo[i]:.8f} {band.hi[i]:.8f}")
        return 0
    dens = fit.pdf(x)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as handle:
            handle.write("x,density\n")
            for i in range(x.size):
                handle.write(f"{float(x[i])!r},{float(dens[i])!r}\n")
    else:
        for i in range(x.size):
            print(f"{x[i]:.6f} {dens[i]:.8f}")
    return 0


def cmd_target(args: argparse.Namespace) -> int:
    try:
        spec = parse_estimand(args.estimand)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    fit = load_model(args.model)
    data = read_data(args.data, args.col)
    report = tmle_target(fit, spec, data)
    payload = report_to_dict(report)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as handle:
            json.dump(payload, handle, indent=2)
    print(
        f"estimand={spec.label()} plugin={report.plugin_value:.8f} tmle={report.tmle_value:.8f} "
        f"se={report.se:.8f} ci=({report.ci95[0]:.8f}, {report.ci95[1]:.8f}) "
        f"steps={len(report.steps)} converged={report.converged}"
    )
    return 0


def cmd_tf(args: argparse.Namespace) -> int:
    data = read_data(args.data, args.col)
    problem = make_tf_problem(data, order=args.order, lam=args.lam, bins=args.bins, rho=args.rho)
    if args.tfpp:
        problem = tfpp_variant(problem)
    fit = admm_fit(problem, AdmmConfig(max_iters=args.max_iters))
    if args.out:
        fit.to_csv(args.out)
    nll = -float(fit.log_pdf(data).sum())
    print(
        f"n={data.size} bins={problem.num_bins} order={args.order} lambda={args.lam:.6g} "
        f"nll={nll:.6f} iterations={fit.iterations} converged={fit.converged}"
    )
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    if not os.path.isfile(args.plan):
        raise DataError(f"no data: cannot read '{args.plan}'")
    try:
        plan = load_plan(args.plan)
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        print(f"error: invalid plan: {exc}", file=sys.stderr)
        return 2
    overrides = {}
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    if overrides:
        plan = dataclasses.replace(plan, **overrides)
    manifest = run_experiments(plan)
    print(
        f"experiments={','.join(plan.experiments)} outputs={len(manifest['outputs'])} "
        f"wall_time={manifest['wall_time_seconds']}s out_dir={plan.out_dir}"
    )
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    try:
        spec = get_dgp(args.dgp)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    draws = sample(spec, args.n, seed=args.seed)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as handle:
            for value in draws:
                handle.write(f"{float(value)!r}\n")
    else:
        for value in draws:
            print(repr(float(value)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tvdensity",
        description="Penalized log-spline density estimation on [0, 1]",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for any randomized step")
    common.add_argument("--col", default=None, help="CSV column name holding the data")

    p_fit = sub.add_parser("fit", parents=[common], help="fit a penalized log-spline density")
    p_fit.add_argument("data", help="newline-delimited floats in [0,1], or CSV with --col")
    p_fit.add_argument("--order", type=int, default=0, choices=(0, 1, 2))
    p_fit.add_argument("--lambda", dest="lam", type=float, default=None, help="L1 penalty level")
    p_fit.add_argument("--cv", action="store_true", help="select lambda and order by cross-validation")
    p_fit.add_argument("--cv-points", type=int, default=20, help="lambda grid size for --cv")
    p_fit.add_argument("--undersmooth", type=float, default=1.0, help="L1 inflation factor after CV")
    p_fit.add_argument("--solver", default="prox_newton", choices=ALGORITHM_CHOICES)
    p_fit.add_argument("--grid", type=int, default=None, help="quadrature grid size")
    p_fit.add_argument("--max-knots", type=int, default=64,
                       help="cap on knot count (default 64; 0 removes the cap)")
    p_fit.add_argument("--out", default=None, help="write the fitted model JSON here")
    p_fit.set_defaults(func=cmd_fit)

    p_eval = sub.add_parser("eval", parents=[common], help="evaluate a fitted model on a grid")
    p_eval.add_argument("model", help="model JSON from 'fit'")
    p_eval.add_argument("--grid-points", type=int, default=201)
    p_eval.add_argument("--at", type=float, default=None, help="evaluate at a single point")
    p_eval.add_argument("--ci", action="store_true", help="add delta-method se/lo/hi columns")
    p_eval.add_argument("--data", default=None, help="data file (required with --ci)")
    p_eval.add_argument("--ridge-scale", type=float, default=DEFAULT_RIDGE_SCALE)
    p_eval.add_argument("--out", default=None, help="write CSV here instead of stdout")
    p_eval.set_defaults(func=cmd_eval)

    p_target = sub.add_parser("target", parents=[common], help="TMLE-target an estimand")
    p_target.add_argument("model", help="model JSON from 'fit'")
    p_target.add_argument("data", help="the data the model was fitted on")
    p_target.add_argument(
        "--estimand",
        required=True,
        help="mean | moment:m | survival:x0 | cdf:x0 | median | quantile:q",
    )
    p_target.add_argument("--out", default=None, help="write the report JSON here")
    p_target.set_defaults(func=cmd_target)

    p_tf = sub.add_parser("tf", parents=[common], help="trend-filter density on uniform bins")
    p_tf.add_argument("data")
    p_tf.add_argument("--order", type=int, default=0, choices=(0, 1, 2))
    p_tf.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p_tf.add_argument("--bins", type=int, default=None, help="number of bins (default n+1)")
    p_tf.add_argument("--rho", type=float, default=None, help="ADMM penalty parameter (default lambda)")
    p_tf.add_argument("--tfpp", action="store_true", help="penalize the polynomial block too")
    p_tf.add_argument("--max-iters", type=int, default=2000)
    p_tf.add_argument("--out", default=None, help="write bin CSV here")
    p_tf.set_defaults(func=cmd_tf)

    p_sim = sub.add_parser("simulate", help="run a Monte Carlo experiment plan")
    p_sim.add_argument("plan", help="plan JSON file")
    p_sim.add_argument("--seed", type=int, default=None, help="override the plan's master seed")
    p_sim.add_argument("--out-dir", default=None, help="override the plan's output directory")
    p_sim.set_defaults(func=cmd_simulate)

    p_sample = sub.add_parser("sample", parents=[common], help="draw from a built-in DGP")
    p_sample.add_argument("--dgp", required=True, help=f"one of: {', '.join(DGP_ORDER)}")
    p_sample.add_argument("--n", type=int, required=True)
    p_sample.add_argument("--out", default=None, help="write newline floats here")
    p_sample.set_defaults(func=cmd_sample)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, SupportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TvdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
