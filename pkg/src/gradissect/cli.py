"""Command-line front end.

Subcommands run one experiment each from a JSON config with flag
overrides; exit code 0 on success, 1 on a failed experiment check or grid
cell, 2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import sys

from .harness import (
    DEFAULTS,
    resolve_config,
    run_experiment,
    shift_seeds,
    validate_config,
)

_EXPERIMENT_HELP = {
    "run": "optimizer grid (methods x step sizes x seeds) on one problem",
    "figure2": "gradient vs sign descent across conditioning/orientation/noise",
    "factors": "emit the three variance-adaptation factor curves",
    "theorem1": "idealized variance adaptation convergence-rate check",
    "wilson": "sign-based iterate confinement checks on classification instances",
    "selftest": "run the built-in invariant battery",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gradissect",
        description="Stochastic-gradient update rules dissected into sign and "
        "variance-adaptation components, with analysis experiments.",
    )
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in DEFAULTS:
        p = sub.add_parser(name, help=_EXPERIMENT_HELP[name])
        p.add_argument("--config", help="JSON config file (merged over defaults)")
        p.add_argument("--out", default="out", help="output directory or .csv path")
        p.add_argument("--seed", type=int, help="base replication seed")
        p.add_argument("--steps", type=int, help="step budget override")
        p.add_argument("--eval-every", type=int, help="loss evaluation interval")
        p.add_argument("--workers", type=int, help="parallel worker count")
        p.add_argument("--plot", action="store_true", help="also write SVG figures")
        p.add_argument(
            "--alpha", type=float, help="single step size (run experiment)"
        )
        p.add_argument(
            "--method",
            action="append",
            help="method name, repeatable (run experiment)",
        )
        p.add_argument(
            "--mc-samples", type=int, help="sign-curvature Monte Carlo draws"
        )
        p.add_argument(
            "--denominator",
            choices=("mc", "bound"),
            help="sign-descent optimal-step denominator mode",
        )
    return parser


def cli_main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    file_cfg = None
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot load config {args.config}: {exc}", file=sys.stderr)
            return 2

    overrides = {}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.eval_every is not None:
        overrides["eval_every"] = args.eval_every
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.mc_samples is not None:
        overrides["mc_samples"] = args.mc_samples
    if getattr(args, "denominator", None):
        overrides["denominator"] = args.denominator
    if args.plot:
        overrides["plot"] = True
    if args.experiment == "run":
        if args.alpha is not None:
            overrides["alphas"] = [args.alpha]
        if args.method:
            overrides["methods"] = args.method

    try:
        cfg = resolve_config(args.experiment, file_cfg, overrides)
        if args.seed is not None:
            shift_seeds(cfg, args.seed)
        validate_config(args.experiment, cfg)
    except (ValueError, TypeError, KeyError) as exc:
        print(f"error: bad configuration: {exc}", file=sys.stderr)
        return 2

    try:
        outcome = run_experiment(args.experiment, cfg, args.out)
    except Exception as exc:
        print(f"error: experiment failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1

    for message in outcome.messages:
        print(message)
    for path in outcome.csv_paths + outcome.svg_paths:
        print(f"wrote {path}")
    return outcome.exit_code


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
