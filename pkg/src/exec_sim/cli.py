"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ExperimentConfig, load_config
from .errors import ConfigError
from . import experiment as ex

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="exec-sim", description="Order book simulation and execution agents.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str, config_required: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=config_required, help="experiment JSON file")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--workers", type=int, help="parallel trials (default: $EXEC_SIM_WORKERS or 1)")
        p.add_argument("--resume", action="store_true", help="reuse trained tables and resume the search checkpoint")
        return p

    add("simulate", "run the background flow alone and export events and trades")
    add("train-local", "train the flat agent or the local options, depending on the configured agent")
    add("search-meta", "successive-halving search over the meta selector")
    add("evaluate", "evaluate the configured agent on every seed")
    add("pipeline", "train options, search the meta selector, evaluate the hierarchy")
    rp = add("replay", "turn an episode trace into plot-ready quote and fill series", config_required=False)
    rp.add_argument("--trace", required=True, help="trace CSV written by evaluate")
    return parser


def _out_dir(cfg: ExperimentConfig, args: argparse.Namespace) -> Path:
    return Path(args.out or cfg.output_dir)


def _dispatch(args: argparse.Namespace) -> None:
    if args.command == "replay":
        out = Path(args.out or ".")
        out.mkdir(parents=True, exist_ok=True)
        target = out / f"replay_{Path(args.trace).stem}.csv"
        ex.replay(args.trace, target)
        print(f"wrote {target}")
        return

    cfg = load_config(args.config)
    out = _out_dir(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "simulate":
        ex.simulate(cfg, out)
    elif args.command == "train-local":
        if cfg.agent == "flat_cerl":
            ex.train_flat_table(cfg, out)
        else:
            ex.train_options(cfg, out, reuse=args.resume)
    elif args.command == "search-meta":
        study = ex.search_meta(cfg, out, workers=args.workers, resume=args.resume)
        print(f"best trial {study.best.index}: utility {study.best.utility_estimate!r}")
    elif args.command == "evaluate":
        summary, _ = ex.run_evaluate(cfg, out)
        print(_summary_line(summary))
    elif args.command == "pipeline":
        summary = ex.run_pipeline(cfg, out, workers=args.workers, resume=args.resume)
        cfg = dataclasses.replace(cfg, agent="hierarchical")
        print(_summary_line(summary))
    ex.write_manifest(cfg, out, args.command)


def _summary_line(summary: dict) -> str:
    return (
        f"{summary['agent']}: {summary['episodes']} episodes, "
        f"mean slippage {summary['slippage_mean']:.4f}, "
        f"participation error {summary['participation_error_mean']:.4f}"
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
