"""Command line entry point: ``dc3 {generate,train,eval,report,sweep,run}``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import bench
from .errors import Dc3Error


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--task", choices=bench.TASKS)
    p.add_argument("--n", type=int, help="number of decision variables (qp / nonconvex)")
    p.add_argument("--n-eq", type=int, dest="n_eq")
    p.add_argument("--n-ineq", type=int, dest="n_ineq")
    p.add_argument("--case", help="bundled case name or path to a MATPOWER file (acopf)")
    p.add_argument("--count", type=int, help="number of instances before the 10:1:1 split")
    p.add_argument("--family-seed", type=int, dest="family_seed")
    p.add_argument("--data-seed", type=int, dest="data_seed")
    p.add_argument("--variant", action="append", dest="variants", metavar="NAME",
                   help="method to run; repeat for several")
    p.add_argument("--seed", action="append", type=int, dest="seeds", metavar="K",
                   help="training seed; repeat for several")
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-reference", action="store_true", help="skip the reference solver row")
    p.add_argument("--out", dest="output", help="run directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dc3", description="Train and benchmark DC3 networks.")
    sub = parser.add_subparsers(dest="verb", required=True)
    gen = sub.add_parser("generate", help="generate datasets, labels and reference solutions")
    gen.add_argument("--labels", action="store_true", help="label every instance with the reference solver")
    sub.add_parser("train", help="train every (variant, seed) cell")
    sub.add_parser("eval", help="evaluate trained cells on the test split")
    sub.add_parser("report", help="aggregate evaluated cells into report.md / report.csv")
    sub.add_parser("run", help="generate, train, evaluate and report in one go")
    sw = sub.add_parser("sweep", help="one run per number of constraints")
    sw.add_argument("--axis", choices=bench.SWEEP_AXES, required=True)
    sw.add_argument("--values", required=True, help="comma separated, e.g. 10,30,50")
    for p in sub.choices.values():
        _add_common(p)
    return parser


def resolve_config(args) -> bench.RunConfig:
    cfg = bench.RunConfig.load(args.config) if args.config else bench.RunConfig()
    changes = {k: getattr(args, k) for k in ("task", "n", "n_eq", "n_ineq", "case", "count",
                                             "family_seed", "data_seed", "variants", "seeds", "output")
               if getattr(args, k) is not None}
    if args.no_reference:
        changes["reference"] = False
    if args.epochs is not None:
        changes["train"] = dict(cfg.train, epochs=args.epochs)
    if changes:
        source = cfg.source
        cfg = cfg.with_changes(**changes)
        cfg.source = source
    return cfg


def _report_failures(failed) -> int:
    for variant, seed, msg in failed:
        print(f"FAILED {variant} seed {seed}: {msg}", file=sys.stderr)
    return 1 if failed else 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.verb == "sweep":
            values = [int(v) for v in args.values.split(",") if v.strip()]
            res = bench.sweep_constraints(cfg, args.axis, values)
            print(res.table, end="")
            return _report_failures(res.failed)
        bench.save_config(cfg)
        if args.verb == "generate":
            ws = bench.prepare(cfg, labels=args.labels or None)
            print(f"{len(ws.data)} instances written to {cfg.output}/data")
            return 0
        if args.verb == "report":
            res = bench.report_only(cfg)
            print(bench.format_markdown(res.report), end="")
            return _report_failures(res.failed)
        if args.verb == "run":
            res = bench.run_experiment(cfg)
            print(bench.format_markdown(res.report), end="")
            return _report_failures(res.failed)
        ws = bench.prepare(cfg)
        failed = bench.train_all(cfg, ws) if args.verb == "train" else bench.eval_all(cfg, ws)
        return _report_failures(failed)
    except Dc3Error as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
