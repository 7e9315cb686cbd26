"""Command-line entry point.

    gpc-phs [--out DIR] [--seed N] [--quiet] <command> <config.json>

Commands run the pipeline up to and including their stage, reusing any
finished artifacts in the output directory. Exit status is 0 on success,
2 when the robustness certificate does not pass, 1 on errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .experiment import ExperimentConfig, StageError, data_sweep, run_pipeline

COMMANDS = {
    "generate-data": "simulate the true plant and write noisy samples",
    "train": "filter the data and fit the GP-PHS hyperparameters",
    "synthesize": "build the desired Hamiltonian and equilibrium shift",
    "certify": "grid-check the matching PDE and the robustness inequality",
    "simulate": "run open-loop validation and the closed loop",
    "sweep": "closed-loop error against the desired PHS for several data sizes",
    "pipeline": "everything above plus the sweep",
}


def _add_globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--out", type=Path, default=default if suppress else Path("runs/latest"), help="output directory")
    p.add_argument("--seed", type=int, default=default, help="master seed, overrides the config")
    p.add_argument("--quiet", action="store_true", default=default if suppress else False, help="only log warnings")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpc-phs", description=__doc__.splitlines()[0])
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", type=Path, help="experiment config (JSON)")
        _add_globals(p, suppress=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    log = logging.getLogger("gpc_phs")
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        cfg.validate()
        if args.command == "sweep":
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            result = data_sweep(cfg, out / "sweep")
            (out / "sweep_report.json").write_text(
                json.dumps({"config_digest": cfg.digest(), **result}, indent=1, sort_keys=True)
            )
            _print(args, result)
            return 1 if result["failures"] and not result["time_averaged_mse"] else 0
        report = run_pipeline(cfg, args.out, until=args.command)
    except StageError as exc:
        log.error("%s", exc)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1
    _print(args, report)
    cert = report.get("certificate")
    if cert is not None and not cert["passed"]:
        log.warning("robustness certificate did not pass (min margin %.3g)", cert["min_robustness_margin"])
        return 2
    return 0


def _print(args, payload) -> None:
    if not args.quiet:
        json.dump(payload, sys.stdout, indent=1, sort_keys=True)
        sys.stdout.write("\n")


if __name__ == "__main__":
    sys.exit(main())
