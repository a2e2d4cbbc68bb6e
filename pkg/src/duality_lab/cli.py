"""Command-line interface.

Subcommands map to check groups; `all` runs everything the configured model
supports and accepts --check to subselect.  `report` renders figures from
the delimited outputs of a previous run.

    duality-lab duality-check --config configs/trinomial2.json
    duality-lab sensitivity   --config configs/bs_crra.json --seed 42 --jobs 4
    duality-lab all           --config configs/bs_crra.json --out out/
    duality-lab report        --out out/

Exit status is 0 iff every selected check passed.
"""

from __future__ import annotations

import argparse
import sys

from .config import CHECK_GROUPS, ConfigError, RunConfig
from .runner import Runner


def _add_run_args(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", required=True, help="path to a JSON run config")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the config seed")
    sub.add_argument("--out", default=None, help="override the output directory")
    sub.add_argument("--jobs", type=int, default=1,
                     help="worker threads for path-chunk parallelism")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="duality-lab",
        description="primal/dual indirect-utility checks on trees and "
                    "discretized diffusion markets",
    )
    subs = parser.add_subparsers(dest="command", required=True)
    for name in ("duality-check", "perturb-check", "convergence", "sensitivity"):
        sub = subs.add_parser(name, help=f"run the {name} group")
        _add_run_args(sub)
    sub_all = subs.add_parser("all", help="run every configured check")
    _add_run_args(sub_all)
    sub_all.add_argument("--check", nargs="*", default=None,
                         help="subset of check names to run")
    sub_rep = subs.add_parser("report", help="render figures from run outputs")
    sub_rep.add_argument("--out", required=True,
                         help="output directory of a previous run")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "report":
        from .plots import render_report
        written = render_report(args.out)
        for path in written:
            print(f"wrote {path}")
        return 0

    try:
        config = RunConfig.load(args.config)
        group = CHECK_GROUPS[args.command]
        selected = [c for c in group if c in config.checks]
        if args.command == "all" and args.check is not None:
            unknown = [c for c in args.check if c not in CHECK_GROUPS["all"]]
            if unknown:
                raise ConfigError(f"unknown check names: {unknown}")
            selected = [c for c in selected if c in args.check]
        runner = Runner(config, jobs=args.jobs, seed=args.seed, out_dir=args.out)
        manifest = runner.run(selected)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    for name, status in manifest["checks"].items():
        label = status if status == "skipped" else ("pass" if status else "FAIL")
        print(f"{name}: {label}")
    print(f"manifest: config {manifest['config_hash'][:12]} seed {manifest['seed']}"
          f" wall {manifest['wall_clock_s']:.2f}s")
    return 0 if manifest["all_passed"] else 1


if __name__ == "__main__":
    sys.exit(main())
