"""Command-line entry point: ``vct``.

Exit codes: 0 success, 1 usage error, 2 configuration error, 3 more
simulation failures than the configured threshold allows.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from vctrial.errors import ConfigError

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_FAILURES = 0, 1, 2, 3

log = logging.getLogger("vctrial")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _non_negative(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vct", description="Virtual clinical trials for AP algorithms.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-population", help="sample an accepted cohort")
    g.add_argument("--model", required=True, choices=["hovorka", "uvapadova"])
    g.add_argument("--n", required=True, type=_non_negative)
    g.add_argument("--seed", required=True, type=int)
    g.add_argument("--out", required=True)

    r = sub.add_parser("run", help="run a trial from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--workers", type=_non_negative)
    r.add_argument("--deterministic", action="store_true")
    r.add_argument("--out", required=True)

    p = sub.add_parser("report", help="print stored trial results")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--format", choices=["csv", "json"], default="json")

    c = sub.add_parser("compare", help="side-by-side attainment and time in ranges")
    c.add_argument("--a", required=True)
    c.add_argument("--b", required=True)
    return parser


def cmd_generate(args) -> int:
    from vctrial.population import generate_cohort, write_cohort

    records = generate_cohort(args.n, args.model, args.seed)
    write_cohort(args.out, records, args.model, args.seed)
    total = sum(r.rejections.attempts for r in records)
    log.info("wrote %d participants (%d draws) to %s", len(records), total, args.out)
    return EXIT_OK


def cmd_run(args) -> int:
    from dataclasses import replace

    from vctrial.config import load_config
    from vctrial.persist import persist
    from vctrial.population import load_cohort
    from vctrial.runner import run_trial

    trial = load_config(args.config)
    if args.deterministic:
        trial.sim = replace(trial.sim, deterministic=True)
    if args.workers is not None:
        trial.workers = args.workers
    trial.out_dir = args.out
    try:
        records, header = load_cohort(trial.cohort_path)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load cohort {trial.cohort_path}: {exc}") from exc
    result = run_trial(trial, records=records, header=header)
    persist(result, args.out)
    meta = result.metadata
    log.info("%d/%d participants simulated in %.1f s, %d blowups",
             meta["n_simulated"], meta["n_participants"], meta["wall_time_s"], meta["n_blowups"])
    n = meta["n_participants"]
    if n and meta["n_blowups"] / n > trial.max_failure_fraction:
        print(f"{meta['n_blowups']} of {n} participants failed "
              f"(threshold {trial.max_failure_fraction:g})", file=sys.stderr)
        return EXIT_FAILURES
    return EXIT_OK


def cmd_report(args) -> int:
    from vctrial.persist import SUMMARY_FILE, load_report

    if args.format == "csv":
        sys.stdout.write((Path(args.in_dir) / SUMMARY_FILE).read_text(encoding="utf-8"))
    else:
        sys.stdout.write(json.dumps(load_report(args.in_dir), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def _pct(x) -> str:
    return "n/a" if x is None else f"{100 * x:6.2f}%"


def format_comparison(a: dict, b: dict, name_a: str = "A", name_b: str = "B") -> str:
    from vctrial.metrics import RANGE_KEYS, TARGETS

    ra, rb = a["report"], b["report"]
    w = max(len(name_a), len(name_b), 8)
    lines = [f"{'Target':<24}{'Goal':<14}{name_a:>{w}}  {name_b:>{w}}"]
    for key, label, goal in TARGETS + (("all_targets", "All targets", ""),):
        lines.append(f"{label:<24}{goal:<14}{_pct(ra['targets'].get(key)):>{w}}  "
                     f"{_pct(rb['targets'].get(key)):>{w}}")
    lines.append("")
    lines.append(f"{'Time in range':<38}{name_a:>{w}}  {name_b:>{w}}")
    for title, key in (("mean", "mean_time_in_ranges"), ("worst case", "worst_case")):
        for rk in RANGE_KEYS:
            va = ra.get(key) or {}
            vb = rb.get(key) or {}
            if key == "worst_case":
                va, vb = va.get("time_in_ranges", {}), vb.get("time_in_ranges", {})
            lines.append(f"{title + ' ' + rk.upper():<38}{_pct(va.get(rk)):>{w}}  "
                         f"{_pct(vb.get(rk)):>{w}}")
    lines.append(f"{'participants':<38}{ra['n_participants']:>{w}}  {rb['n_participants']:>{w}}")
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    from vctrial.persist import load_report

    a, b = load_report(args.a), load_report(args.b)
    sys.stdout.write(format_comparison(a, b, a["report"].get("model") or "A",
                                       b["report"].get("model") or "B"))
    return EXIT_OK


COMMANDS = {"generate-population": cmd_generate, "run": cmd_run, "report": cmd_report,
            "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"vct: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"vct: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"vct: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
