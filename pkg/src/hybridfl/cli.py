"""Command-line entry point: ``hybridfl <subcommand> ...``.

Exit codes: 0 success, 1 validation error (bad arguments, config or
constants), 2 runtime failure (training aborted, I/O, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import seeding
from .errors import BoundInputError, CompareError, ConfigError, HybridFLError
from .harness import (
    Target,
    build_problem,
    compare_runs,
    format_comparison,
    parse_config,
    parse_constants,
    render_constants,
    run_experiment,
)
from .model import finite_diff_check, init_params
from .theory import BOUNDS, estimate_constants

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this CLI reserves 2 for runtime failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _load(args):
    config = parse_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    return config


def cmd_run(args) -> int:
    config = _load(args)
    summary = run_experiment(config)
    print(summary)
    return EXIT_OK


def _expand(paths):
    out = []
    for p in map(Path, paths):
        out.extend(sorted(p.glob("*.csv")) if p.is_dir() else [p])
    return out


def cmd_compare(args) -> int:
    try:
        target = Target.parse(args.target) if args.target else None
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cmp = compare_runs(_expand(args.traces), target, baseline=args.baseline)
    sys.stdout.write(format_comparison(cmp))
    return EXIT_OK


def cmd_bounds(args) -> int:
    config = _load(args)
    constants = parse_constants(args.constants)
    reports = [BOUNDS[name](constants, config.hp, args.T) for name in BOUNDS]
    if args.json:
        print(json.dumps([r.to_dict() for r in reports], indent=2))
        return EXIT_OK
    for r in reports:
        print(f"{r.algorithm}: total = {r.total:.6g}")
        for name, value in r.terms.items():
            print(f"  {name:<18} {value:.6g}")
        for p in r.preconditions:
            mark = "ok" if p.satisfied else "VIOLATED"
            print(f"  {p.name:<24} {p.lhs:.4g} <= {p.rhs:.4g}  {mark}")
    return EXIT_OK


def cmd_check_grad(args) -> int:
    config = _load(args)
    problem = build_problem(config)
    data = problem.population
    rng = seeding.derive_rng(config.master_seed, seeding.ESTIMATION, 0)
    if data.n > args.samples:
        data = data.subset(np.sort(rng.choice(data.n, size=args.samples, replace=False)))
    worst = 0.0
    for _ in range(args.instances):
        x = init_params(problem.objective, rng) + args.scale * rng.standard_normal(problem.objective.dim)
        worst = max(worst, finite_diff_check(problem.objective, x, data))
    ok = worst <= args.tol
    print(f"max relative error {worst:.3e} over {args.instances} points (tol {args.tol:g}): "
          f"{'ok' if ok else 'FAILED'}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_estimate_constants(args) -> int:
    config = _load(args)
    problem = build_problem(config)
    rng = seeding.derive_rng(config.master_seed, seeding.ESTIMATION, 1)
    x0 = init_params(problem.objective, seeding.derive_rng(config.master_seed, seeding.MODEL_INIT))
    c = estimate_constants(problem.objective, problem.shards, config.hp.m_s, x0, rng,
                           num_pairs=args.pairs, sigma_trials=args.trials)
    text = render_constants(c)
    if args.output:
        Path(args.output).write_text(text)
        print(args.output)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override experiment.master_seed")

    parser = _Parser(prog="hybridfl", description="Hybrid federated learning simulator.")
    sub = parser.add_subparsers(dest="command", metavar="{run,compare,bounds,check-grad,estimate-constants}",
                                parser_class=_Parser)

    p = sub.add_parser("run", parents=[common], help="run an experiment and write traces")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="rounds-to-target table across trace files")
    p.add_argument("traces", nargs="+", help="trace files or directories of them")
    p.add_argument("--target", default=None, help="e.g. 'loss <= 0.5' (default: from trace headers)")
    p.add_argument("--baseline", default="clg-sgd")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bounds", parents=[common], help="evaluate the three convergence bounds")
    p.add_argument("config")
    p.add_argument("--constants", required=True, help="file with a [constants] section")
    p.add_argument("--T", type=int, default=None, help="round count (default: hyperparams.T)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("check-grad", parents=[common], help="finite-difference gradient check")
    p.add_argument("config")
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--samples", type=int, default=256, help="subsample size for the check")
    p.add_argument("--scale", type=float, default=0.5)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_check_grad)

    p = sub.add_parser("estimate-constants", parents=[common], help="estimate L, sigma, sigma_g, f0, f*")
    p.add_argument("config")
    p.add_argument("--pairs", type=int, default=50)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--output", "-o", default=None)
    p.set_defaults(func=cmd_estimate_constants)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (ConfigError, CompareError, BoundInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (HybridFLError, OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
