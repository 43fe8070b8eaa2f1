"""CLI entry point for leafrep."""
from __future__ import annotations

import argparse
import logging
import os
from typing import List, Optional

from .config import ExperimentConfig, config_from_dict, load_config
from .data import make_census_like
from .harness import run_experiment
from .report import write_experiment

logger = logging.getLogger(__name__)

_SUBCOMMANDS = ("fidelity", "cleaning", "roar", "runtime", "case-study")


def _setup_logging(verbose: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        format="%(asctime)s  %(levelname)-8s  %(name)s  %(message)s",
        datefmt="%H:%M:%S",
        level=level,
    )


def _csv_list(text: str) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _seed_list(text: str) -> List[int]:
    try:
        return [int(s) for s in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Seeds must be comma-separated integers, got {text!r}") from None


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file (or defaults), then CLI overrides, then validation."""
    config = load_config(args.config) if args.config else config_from_dict({})
    config.experiment = args.command.replace("-", "_")
    if args.data is not None:
        config.data.path = args.data
    if args.label_col is not None:
        config.data.label_column = args.label_col
    if args.positive is not None:
        config.data.positive_value = args.positive
    if args.kernel is not None:
        config.kernel = args.kernel
    if args.methods is not None:
        config.methods = [m.lower() for m in args.methods]
    if args.seeds is not None:
        config.seeds = args.seeds
    if args.out is not None:
        config.output_dir = args.out
    return config.validate()


def _run_experiment(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    result = run_experiment(config)
    path = write_experiment(result, config.output_dir, config.to_dict())
    print(f"Results saved to {path}")
    return 0


def _run_make_data(args: argparse.Namespace) -> int:
    frame = make_census_like(n=args.rows, seed=args.seed)
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    frame.to_csv(args.out, index=False, lineterminator="\n")
    print(f"Wrote {len(frame)} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="leafrep",
        description="leafrep: instance attribution for gradient-boosted trees",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name in _SUBCOMMANDS:
        p = sub.add_parser(name, help=f"Run the {name} experiment.")
        p.add_argument("--config", help="Path to experiment config JSON.")
        p.add_argument("--data", help="CSV file; omit to use the generated income table.")
        p.add_argument("--label-col", help="Name of the label column.")
        p.add_argument("--positive", help="Label value treated as the positive class.")
        p.add_argument("--kernel", help="leafpath, treeoutput, leafoutput (or 'all' for fidelity).")
        p.add_argument("--methods", type=_csv_list, help="Comma-separated method tags.")
        p.add_argument("--seeds", type=_seed_list, help="Comma-separated seeds.")
        p.add_argument("--out", help="Output directory.")
        p.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")
        p.set_defaults(func=_run_experiment)

    p = sub.add_parser("make-data", help="Write the generated income table to CSV.")
    p.add_argument("--out", required=True, help="Destination CSV path.")
    p.add_argument("--rows", type=int, default=2000, help="Number of rows.")
    p.add_argument("--seed", type=int, default=0, help="Generator seed.")
    p.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")
    p.set_defaults(func=_run_make_data)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        logger.error("No results written. Aborting.")
        return 1
    except Exception as exc:
        logger.error("Run failed: %s", exc, exc_info=True)
        return 1
