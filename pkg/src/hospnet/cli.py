"""Command line entry point: ``hospnet <subcommand> [options]``.

Exit status is 0 on success, 1 on a fatal I/O or configuration error and 2
when no record was accepted or every facility was excluded from the network.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from dataclasses import replace
from datetime import date

from . import __version__
from .pipeline import OUTPUTS, RunConfig, run
from .synthgen import ConfigError, GeneratorConfig, write_cohort

log = logging.getLogger("hospnet")


def _date(text: str) -> date:
    try:
        return date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an ISO date: {text!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default="out", help="output directory (default: %(default)s)")
    p.add_argument("--workers", type=int, default=1,
                   help="worker processes; results never depend on it (default: 1)")
    p.add_argument("--memory-mb", type=int, default=2048,
                   help="memory budget for sorting records (default: %(default)s)")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hospnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hospnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic cohort")
    _common(gen)
    gen.add_argument("--config", help="generator config file (key = value lines)")
    gen.add_argument("--seed", type=int, help="random seed (default: 42)")
    gen.add_argument("--patients", type=int, help="number of patients (default: 10000)")
    gen.add_argument("--window-start", type=_date)
    gen.add_argument("--window-end", type=_date)

    for name in ("validate", "transfers", "overlaps", "stats", "matrix", "metrics", "all"):
        p = sub.add_parser(name, help=f"write {', '.join(OUTPUTS[name][:3])} ...")
        _common(p)
        p.add_argument("--input", required=True, help="stay records TSV")
        p.add_argument("--window-start", type=_date, help="first day of the observation window")
        p.add_argument("--window-end", type=_date, help="last day of the observation window")
        p.add_argument("--spill-dir", help="directory for temporary sort runs")
        p.add_argument("--count-overlap-transfers-as-direct", action=argparse.BooleanOptionalAction,
                       default=True,
                       help="merge one-day overlaps at two facilities into direct transfers")
        p.add_argument("--inactivity-days", type=int, default=90,
                       help="drop facilities idle longer than this (default: %(default)s)")
        p.add_argument("--inactivity-mode", choices=("occupancy", "admissions"),
                       default="occupancy")
        p.add_argument("--community-los", choices=("node", "global"), default="node",
                       help="mean community stay per node or one global mean")
        p.add_argument("--distance-scope", choices=("largest-scc", "reachable"),
                       default="largest-scc")
        p.add_argument("--census-scope", choices=("dataset", "facility"), default="dataset")
    return parser


def _window(args):
    if args.window_start is None and args.window_end is None:
        return None
    if args.window_start is None or args.window_end is None:
        raise ConfigError("--window-start and --window-end go together")
    if args.window_end < args.window_start:
        raise ConfigError("window ends before it starts")
    return (args.window_start, args.window_end)


def _gen(args) -> int:
    cfg = GeneratorConfig.from_file(args.config) if args.config else GeneratorConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.patients is not None:
        overrides["n_patients"] = args.patients
    window = _window(args)
    if window is not None:
        overrides["window"] = window
    cfg = replace(cfg, **overrides).validate()
    text = cfg.to_text()
    digest = hashlib.sha256(text.encode()).hexdigest()[:16]
    header = f"# hospnet {__version__} config={digest} input=-\n"
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "generator.conf"), "w", encoding="utf-8") as fh:
        fh.write(header + text)
    with open(os.path.join(args.out, "cohort.tsv"), "w", encoding="utf-8", newline="\n") as fh, \
            open(os.path.join(args.out, "manifest.tsv"), "w", encoding="utf-8", newline="\n") as mf:
        fh.write(header)
        mf.write(header)
        n = write_cohort(cfg, fh, mf, workers=args.workers)
    log.info("wrote %d records to %s", n, os.path.join(args.out, "cohort.tsv"))
    return 0


def _analyse(args) -> int:
    config = RunConfig(
        input=args.input, out=args.out, window=_window(args), memory_mb=args.memory_mb,
        workers=args.workers, spill_dir=args.spill_dir,
        count_overlap_transfers_as_direct=args.count_overlap_transfers_as_direct,
        inactivity_days=args.inactivity_days, inactivity_mode=args.inactivity_mode,
        community_los=args.community_los, distance_scope=args.distance_scope,
        census_scope=args.census_scope,
    )
    result = run(args.command, config)
    r = result.report
    log.info("%d rows: %d accepted, %d rejected", r.total_rows, r.accepted, r.rejected)
    if r.accepted == 0:
        log.error("no record was accepted")
    if result.empty_network:
        log.error("every facility was excluded (%d); see exclusions.tsv", len(result.excluded))
    return result.exit_code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.command == "gen":
            return _gen(args)
        return _analyse(args)
    except (OSError, ValueError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
