"""Command line entry point: ``fastddc {simulate,estimate,mc,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .dp import EntryModelParams, Panel, default_params, simulate_panel
from .estimator import EstimatorConfig, fast_estimate
from .harness import McConfig, load_records, run_experiment, write_reports

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _targets(flag):
    return {"em": ("EM",), "h": ("H",), "both": ("H", "EM")}[flag]


def build_parser():
    p = _Parser(prog="fastddc", description="Two-step estimation of a firm-entry model with market types.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate a panel and write it as CSV")
    s.add_argument("--config", help="model parameters as JSON (default: built-in design)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output CSV path")
    s.add_argument("--n", type=int, default=100, help="number of markets")
    s.add_argument("--T", type=int, default=8, help="number of periods")

    e = sub.add_parser("estimate", help="run the full pipeline on one panel")
    e.add_argument("panel", help="panel CSV")
    e.add_argument("--config", help="estimator settings as JSON")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--target", choices=("em", "h"), default="h")
    e.add_argument("--no-target-star", action="store_true", help="skip the unconstrained target estimator")
    e.add_argument("--out", help="output JSON path (default: stdout)")

    m = sub.add_parser("mc", help="Monte Carlo experiment (resumable)")
    m.add_argument("--config", help="experiment settings as JSON")
    m.add_argument("--seed", type=int, default=None, help="master seed")
    m.add_argument("--out", help="records directory")
    m.add_argument("--jobs", type=int, default=None, help="parallel replications (default: available cores)")
    m.add_argument("--target", choices=("em", "h", "both"), default=None)
    m.add_argument("--no-target-star", action="store_true")

    r = sub.add_parser("report", help="summary tables from a records directory")
    r.add_argument("records", help="records directory")
    r.add_argument("--out", help="table directory (default: the records directory)")
    return p


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def cmd_simulate(args):
    params = EntryModelParams.from_dict(_read_json(args.config)) if args.config else default_params()
    panel = simulate_panel(params, args.n, args.T, args.seed)
    panel.to_csv(args.out)
    return EXIT_OK


def cmd_estimate(args):
    settings = _read_json(args.config) if args.config else {}
    settings["target"] = args.target.upper()
    if args.seed is not None:
        settings["seed"] = args.seed
    if args.no_target_star:
        settings["compute_target"] = False
    config = EstimatorConfig.from_dict(settings)
    result = fast_estimate(Panel.from_csv(args.panel), config)
    text = result.to_json()
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return EXIT_OK


def cmd_mc(args):
    settings = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        settings["master_seed"] = args.seed
    if args.out:
        settings["output_dir"] = args.out
    if args.target:
        settings["targets"] = _targets(args.target)
    settings["jobs"] = args.jobs if args.jobs is not None else settings.get("jobs", os.cpu_count() or 1)
    if args.no_target_star:
        settings["estimator"] = {**settings.get("estimator", {}), "compute_target": False}
    config = McConfig.from_dict(settings)
    records = run_experiment(config)
    failed = sum(r["status"] != "ok" for r in records)
    print(f"{len(records)} records in {config.output_dir} ({failed} failed)")
    return EXIT_OK


def cmd_report(args):
    records = load_records(args.records)
    if not records:
        raise RuntimeError(f"no records found in {args.records}")
    for path in write_reports(records, args.out or args.records):
        print(path)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "mc": cmd_mc, "report": cmd_report}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"fastddc {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
