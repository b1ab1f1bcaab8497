"""Command line entry point: simulate, validate, compare, plot.

Exit codes: 0 success, 1 configuration or inequality violation, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config
from .errors import ConfigError, ContractError, SimulationError
from . import runner

log = logging.getLogger("iidob")

OK, BAD_CONFIG, RUNTIME = 0, 1, 2


def _simulate(args) -> int:
    cfg = load_config(args.config)
    if args.oracle:
        cfg = cfg.replace(oracle=True)
    out = Path(args.out or cfg.output_dir)
    try:
        res = runner.run(cfg, progress=args.verbose)
    except SimulationError as exc:
        partial = getattr(exc, "log", None)
        if partial is not None and len(partial):
            runner.emit_csv(partial, out / "trajectory_partial.csv")
            print(f"partial log written to {out / 'trajectory_partial.csv'}", file=sys.stderr)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return RUNTIME
    runner.emit_csv(res.log, out / "trajectory.csv")
    runner.emit_report(res.checks, out / "report.txt", res.metrics)
    (out / "metrics.json").write_text(json.dumps(res.metrics, indent=2) + "\n")
    nbar = len(res.setup.scenario.barriers)
    runner.emit_svg(res.log, [f"h{k + 1}" for k in range(nbar)], out / "barriers.svg")
    sys.stdout.write(runner.format_report(res.checks, res.metrics))
    failed = [c for c in res.checks if not c.passed]
    if failed:
        log.warning("%d check(s) failed; see report.txt", len(failed))
    return OK


def _validate(args) -> int:
    cfg = load_config(args.config)
    setup = runner.prepare(cfg)
    z0 = runner.oracle_z0(setup) if (args.oracle or cfg.oracle) else None
    ic = runner.initial_condition_checks(setup, z0)
    sys.stdout.write(runner.format_report(setup.checks + ic))
    if not all(c.passed for c in setup.checks):
        return BAD_CONFIG
    if not all(c.passed for c in ic):
        # the run may still go ahead; safety is then checked on the trajectory
        print("WARNING: initial-condition checks failed", file=sys.stderr)
    return OK


def _compare(args) -> int:
    cfg = load_config(args.config)
    results = runner.compare(cfg)
    table = runner.comparison_table(results)
    sys.stdout.write(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.txt").write_text(table)
        for name, res in results.items():
            if not isinstance(res, str):
                runner.emit_csv(res.log, out / f"{name}.csv")
    return OK


def _plot(args) -> int:
    tlog = runner.read_csv(args.csv)
    chans = [c for c in args.channels.split(",") if c] if args.channels else []
    runner.emit_svg(tlog, chans, args.out)
    return OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="iidob", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("simulate", help="run one closed loop and write csv, report and svg")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="output directory (default: config output_dir)")
    p.add_argument("--oracle", action="store_true", help="log true disturbance and bound envelopes")
    p.set_defaults(func=_simulate)

    p = sub.add_parser("validate", help="print the design inequality report without simulating")
    p.add_argument("--config", required=True)
    p.add_argument("--oracle", action="store_true", help="evaluate z(0) from the true disturbance")
    p.set_defaults(func=_validate)

    p = sub.add_parser("compare", help="iidob-cbf-qp vs robust-cbf vs nominal-only")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_compare)

    p = sub.add_parser("plot", help="svg line plot of logged channels")
    p.add_argument("--csv", required=True)
    p.add_argument("--channels", default="", help="comma separated column names")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return BAD_CONFIG
    except (ContractError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return BAD_CONFIG if isinstance(exc, (ContractError, ValueError)) else RUNTIME


if __name__ == "__main__":
    sys.exit(main())
