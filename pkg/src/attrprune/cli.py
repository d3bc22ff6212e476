"""Command-line entry point: ``attrprune <command> --config FILE --out DIR [--seed N]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness as H
from .config import load_config
from .errors import ConfigurationError, PlanMismatchError, PruneError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage mistakes are configuration errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="attrprune", description="Layer pruning experiments on toy detectors.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text, checkpoint=None, table=False, rate=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI experiment config (default: built-in)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override init, training and attribution seeds")
        if checkpoint is not None:
            p.add_argument("--checkpoint", required=checkpoint, help="model checkpoint")
        if table:
            p.add_argument("--table", required=True, help="importance table JSON")
        if rate:
            p.add_argument("--rate", type=float, help="override the configured prune rate")
        return p

    command("train", "train the toy detector")
    command("score", "write L1 and attribution importance tables", checkpoint=True)
    command("prune", "apply a prune plan from an importance table", checkpoint=True, table=True, rate=True)
    ev = command("eval", "evaluate one checkpoint", checkpoint=True)
    ev.add_argument("--method", default="Baseline", help="method label for the report row")
    command("compare", "baseline vs L1 vs attribution at one rate", checkpoint=False, rate=True)
    command("sweep", "mAP drop across the configured prune rates", checkpoint=False)
    return parser


def run(args) -> object:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.command == "train":
        return {"checkpoint": str(H.cmd_train(cfg, args.out))}
    if args.command == "score":
        l1, attr = H.cmd_score(cfg, args.checkpoint, args.out)
        return {"l1": str(l1), "attribution": str(attr)}
    if args.command == "prune":
        ckpt, plan = H.cmd_prune(cfg, args.checkpoint, args.table, args.out, args.rate)
        return {"checkpoint": str(ckpt), "plan": str(plan)}
    if args.command == "eval":
        return H.cmd_eval(cfg, args.checkpoint, args.out, args.method).to_record()
    if args.command == "compare":
        rec = H.cmd_compare(cfg, args.out, args.checkpoint, args.rate)
        return {"pruned_sets": rec["pruned_sets"], "plan_diff": rec["plan_diff"],
                "spearman": rec["rank_comparison"]["spearman"],
                "bottom_k_overlap": rec["rank_comparison"]["bottom_k_overlap"]}
    rec = H.cmd_sweep(cfg, args.out, args.checkpoint)
    return {m: [(p["rate"], p["map_50_95"], p["map_drop_percent"]) for p in pts] for m, pts in rec["methods"].items()}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = run(args)
    except (ConfigurationError, PlanMismatchError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PruneError, ArithmeticError, RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
