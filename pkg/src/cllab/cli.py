"""Command-line entry point: ``cllab {run,shuffle,report,gradcheck}``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import harness
from .errors import ConfigError
from .gradcheck import format_report, run_gradcheck
from .metrics import aggregate_over_orders


def _load_config(args, **force) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.from_file(args.config) if args.config else harness.ExperimentConfig()
    overrides = dict(force)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.data_dir is not None:
        overrides["data_dir"] = args.data_dir
    return dataclasses.replace(cfg, **overrides)


def _print_summary(doc: dict) -> None:
    print(f"runs: {doc['count']}  tasks: {doc['n_tasks']}")
    print(f"{'pos':>4} {'LA mean':>9} {'LA std':>8} {'DOI mean':>9} {'DOI std':>8}")
    for p in doc["positions"]:
        di = "" if p["doi_mean"] is None else f"{p['doi_mean']:9.4f} {p['doi_std']:8.4f}"
        print(f"{p['absolute_pos']:>4} {p['la_mean']:9.4f} {p['la_std']:8.4f} {di}")
    print(f"final accuracy: {doc['final_mean']:.4f} +- {doc['final_std']:.4f}")


def cmd_run(args) -> int:
    cfg = _load_config(args, orders=1, repeats=1, exhaustive=False, pin_first=None)
    return _execute(cfg, args.out)


def cmd_shuffle(args) -> int:
    return _execute(_load_config(args), args.out)


def _execute(cfg, out) -> int:
    records = harness.run_experiment(cfg, out)
    if cfg.mode == "reinit_ablation":
        half = len(records) // 2
        for label, recs in (("with re-init", records[:half]), ("without re-init", records[half:])):
            print(f"== {label}")
            _print_summary(harness.report_dict(aggregate_over_orders(recs), recs))
    else:
        _print_summary(harness.report_dict(aggregate_over_orders(records), records))
    if out:
        print(f"wrote {out}")
    return 0


def cmd_report(args) -> int:
    records = harness.records_from_csv(Path(args.csv).read_text())
    doc = harness.report_dict(aggregate_over_orders(records), records)
    _print_summary(doc)
    if args.out:
        Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.seed or 0)
    print(format_report(results))
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cllab", description="Continual-learning experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="flat YAML key/value file")
            p.add_argument("--workers", type=int)
            p.add_argument("--data-dir", help="dataset root (default: $DATA_DIR or ./data)")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--out", help="output directory (JSON file for report)")

    p = sub.add_parser("run", help="train one task sequence in the configured order")
    common(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("shuffle", help="train over many task orders and repeats")
    common(p)
    p.set_defaults(func=cmd_shuffle)
    p = sub.add_parser("report", help="recompute LA/DOI aggregates from a results CSV")
    p.add_argument("csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
