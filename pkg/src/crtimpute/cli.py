"""Command-line entry point: run, calibrate, summarize, anova, acceptance."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import pandas as pd

from . import anova, bench, simrunner
from .datagen import METHODS, build_scenario_grid
from .missingness import calibrate_alpha0

log = logging.getLogger("crtimpute")


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _index_list(text: str) -> list[int]:
    out = []
    for part in _csv_list(text):
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def cmd_run(args) -> int:
    configs = simrunner.load_config(args.config) if args.config else build_scenario_grid(0)
    changes = {}
    if args.seed is not None:
        changes["master_seed"] = args.seed
    if args.replicates is not None:
        changes["N"] = args.replicates
    if args.methods:
        methods = tuple(m.upper() for m in _csv_list(args.methods))
        bad = set(methods) - set(METHODS)
        if bad:
            raise SystemExit(f"unknown methods: {sorted(bad)}")
        changes["methods"] = methods
    configs = [c.with_(**changes) for c in configs]
    if args.scenarios:
        wanted = set(_index_list(args.scenarios))
        configs = [c for c in configs if c.scenario_index in wanted]
        missing = wanted - {c.scenario_index for c in configs}
        if missing:
            raise SystemExit(f"scenarios not in the config: {sorted(missing)}")
    results = simrunner.run_study(configs, args.out, parallelism=args.parallelism)
    log.info("wrote %d scenarios to %s", len(results), args.out)
    return 0


def cmd_calibrate(args) -> int:
    alpha = calibrate_alpha0(args.mechanism, args.eta, args.target)
    print("mechanism,eta,target,alpha0")
    print(f"{args.mechanism},{args.eta!r},{args.target!r},{alpha:.17g}")
    return 0


def cmd_summarize(args) -> int:
    bias, cov = simrunner.summarize_dir(args.in_dir, args.out)
    log.info("summarised %d rows into %s", len(bias), args.out)
    return 0


def _performance(in_dir: Path) -> pd.DataFrame:
    perf = in_dir / "performance.csv"
    if perf.exists():
        return pd.read_csv(perf)
    tmp = in_dir / "summary"
    simrunner.summarize_dir(in_dir, tmp)
    return pd.read_csv(tmp / "performance.csv")


def cmd_anova(args) -> int:
    perf = _performance(Path(args.in_dir))
    report = anova.analyse_performance(perf, args.measure)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.table_frame().to_csv(out, index=False)
    scaled = out.with_name(out.stem + "_scaled.csv")
    if report.scaled is not None:
        report.scaled.to_csv(scaled, index=False)
    log.info("wrote %s and %s", out, scaled)
    return 0


def cmd_acceptance(args) -> int:
    suite = bench.load_suite(args.suite)
    report = bench.run_acceptance(suite, parallelism=args.parallelism, cache_dir=args.cache)
    report.to_csv(args.out, index=False)
    for row in report.itertuples():
        print(f"{row.status.upper():7s} {row.case}: {row.assertion} observed={row.observed} bound={row.bound}")
    return 0 if bench.report_ok(report) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crtimpute", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run scenarios and write replicate records")
    r.add_argument("--config", help="scenario config file (default: full grid)")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--replicates", type=int)
    r.add_argument("--parallelism", type=int, default=1)
    r.add_argument("--scenarios", help="comma-separated scenario indices or ranges, e.g. 0,5,10-12")
    r.add_argument("--methods", help="comma-separated subset of CCA,SMI,FMI,MMI")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("calibrate", help="missingness intercept for a target rate")
    c.add_argument("--mechanism", required=True)
    c.add_argument("--eta", type=float, required=True)
    c.add_argument("--target", type=float, required=True)
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("summarize", help="performance tables from a run directory")
    s.add_argument("--in", dest="in_dir", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_summarize)

    a = sub.add_parser("anova", help="factorial ANOVA of one performance measure")
    a.add_argument("--in", dest="in_dir", required=True)
    a.add_argument("--measure", choices=sorted(anova.MEASURE_COLUMNS), required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_anova)

    t = sub.add_parser("acceptance", help="run an acceptance suite and write a report")
    t.add_argument("--suite", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--parallelism", type=int, default=1)
    t.add_argument("--cache", help="directory for cached scenario results")
    t.set_defaults(func=cmd_acceptance)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
