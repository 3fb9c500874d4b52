"""Command-line front end.

Subcommands: mkcorpus, run, attack, audit, mi, report. Every flag mirrors
a config key; a JSON config file can seed the values and flags override it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .corpus import CORPUS_NAMES, build_corpus
from .fids import parse_event_log
from .harness import (ExperimentConfig, compare_cow, run, run_stress,
                      timing_mi_pair)
from .observer import extinct_lineage_audit, guess_formula, random_guess_attack

US_PER_MS = 1_000


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--t-ms", type=float, help="max observation period, ms")
    p.add_argument("--n-calls", type=int, help="activity trigger threshold")
    p.add_argument("--padding-pct", type=float,
                   help="delay padding percentile, e.g. 0.99")
    p.add_argument("--workload", choices=CORPUS_NAMES)
    p.add_argument("--duration-ms", type=float)
    p.add_argument("--disk-blocks", type=int)
    p.add_argument("--no-cow", action="store_true")
    p.add_argument("--no-padding", action="store_true")
    p.add_argument("--stress", action="store_true",
                   help="drive images from concurrent workers; timing off")
    p.add_argument("--out", help="output directory")


def _config_from_args(args) -> ExperimentConfig:
    values: dict = {}
    if args.config:
        with open(args.config) as f:
            values.update(json.load(f))
    if args.seed is not None:
        values["seed"] = args.seed
    if args.k is not None:
        values["k"] = args.k
    if args.t_ms is not None:
        values["t_us"] = int(args.t_ms * US_PER_MS)
    if args.n_calls is not None:
        values["n_calls"] = args.n_calls
    if args.padding_pct is not None:
        values["padding_percentile"] = args.padding_pct
    if args.workload is not None:
        values["workload"] = args.workload
    if args.duration_ms is not None:
        values["duration_us"] = int(args.duration_ms * US_PER_MS)
    if args.disk_blocks is not None:
        values["disk_blocks"] = args.disk_blocks
    if args.no_cow:
        values["cow"] = False
    if args.no_padding:
        values["padding"] = False
    if args.out is not None:
        values["output_dir"] = args.out
    return ExperimentConfig.from_dict(values)


def cmd_mkcorpus(args) -> int:
    corpus = build_corpus(args.workload, args.seed)
    corpus.save(args.out)
    print(f"wrote corpus '{corpus.name}' to {args.out}")
    print(corpus.library.stats_report(), end="")
    return 0


def cmd_run(args) -> int:
    config = _config_from_args(args)
    if args.stress:
        report = run_stress(config)
        print(report.to_text(), end="")
        return 0 if report.fields.get("stress.errors") == 0 else 1
    if args.compare_cow:
        result = compare_cow(config)
        print(f"cow_on_bytes = {result['cow_on']}")
        print(f"cow_off_bytes = {result['cow_off']}")
        print(f"ratio = {result['ratio']:.3f}")
        return 0
    report = run(config)
    print(report.to_text(), end="")
    print(f"outputs in {config.output_dir}/", file=sys.stderr)
    return 0


def cmd_attack(args) -> int:
    rate = random_guess_attack(args.k, args.n, args.trials, args.seed)
    expect = guess_formula(args.k, args.n)
    print(f"empirical_rate = {rate:.6f}")
    print(f"formula_rate = {expect:.6f}")
    return 0


def cmd_audit(args) -> int:
    with open(args.log) as f:
        events = parse_event_log(f)
    verdict = extinct_lineage_audit(events)
    print(f"verdict = {'PASS' if verdict.passed else 'FAIL'}")
    print(f"k = {verdict.k}")
    print(f"events_checked = {verdict.events_checked}")
    if verdict.first_violation:
        print(f"first_violation = {json.dumps(verdict.first_violation)}")
    return 0 if verdict.passed else 1


def cmd_mi(args) -> int:
    pre, post = timing_mi_pair(args.seed, args.samples, args.padding_pct)
    print(f"mi_unpadded_bits = {pre:.6f}")
    print(f"mi_padded_bits = {post:.6f}")
    return 0


def cmd_report(args) -> int:
    path = os.path.join(args.run_dir, "report.txt")
    with open(path) as f:
        sys.stdout.write(f.read())
    for extra in ("p_curve.dat", "mi.dat"):
        p = os.path.join(args.run_dir, extra)
        if os.path.exists(p):
            print(f"-- {extra} --")
            with open(p) as f:
                sys.stdout.write(f.read())
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sybilfs",
        description="storage obfuscation engine and adversary simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mkcorpus", help="generate a synthetic trace corpus")
    p.add_argument("--workload", choices=CORPUS_NAMES, required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_mkcorpus)

    p = sub.add_parser("run", help="execute an end-to-end experiment")
    _add_run_flags(p)
    p.add_argument("--compare-cow", action="store_true",
                   help="run twice, CoW on and off, and report the ratio")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("attack", help="random-guess attack Monte Carlo")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--n", type=int, default=None,
                   help="plausible-secret count; omit for unbounded")
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("audit", help="extinct-lineage audit of an event log")
    p.add_argument("--log", required=True)
    p.set_defaults(fn=cmd_audit)

    p = sub.add_parser("mi", help="timing mutual-information experiment")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--padding-pct", type=float, default=0.99)
    p.set_defaults(fn=cmd_mi)

    p = sub.add_parser("report", help="print a run's metrics and curves")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(fn=cmd_report)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
