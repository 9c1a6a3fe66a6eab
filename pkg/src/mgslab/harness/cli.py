"""Command-line entry point: gen-data, train, eval, verify, sweep."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError
from .data import TASKS, gen_task, write_task


def _gen_data(args) -> int:
    splits = gen_task(args.task, {"train": args.train, "valid": args.valid, "test": args.test}, args.seed)
    write_task(splits, args.out)
    print(f"wrote {args.task} splits to {args.out}")
    return 0


def _train(args) -> int:
    from .driver import run_training

    overrides = dict(kv.split("=", 1) for kv in args.set or [])
    out = run_training(args.config, args.seed, args.out, resume=args.resume, overrides=overrides)
    print((out / "summary.json").read_text(encoding="utf-8"), end="")
    return 0


def _eval(args) -> int:
    from .driver import run_eval

    rec = run_eval(args.ckpt, args.data, args.decoder, args.width, args.max_len, args.seed, args.loss, args.scorer)
    print(rec.to_json())
    return 0


def _verify(args) -> int:
    from .verify import run_verify

    return 0 if run_verify(args.suite, args.seed) else 1


def _sweep(args) -> int:
    from .driver import sweep

    for row in sweep(args.config, args.grid, args.out, args.seed, args.jobs):
        print(row)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mgslab", description="MLE-guided parameter search experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic task")
    g.add_argument("--task", choices=TASKS, required=True)
    g.add_argument("--train", type=int, required=True)
    g.add_argument("--valid", type=int, required=True)
    g.add_argument("--test", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_gen_data)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true", help="continue from the run directory's last state")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a data file")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--decoder", choices=("greedy", "ancestral", "beam"), default="greedy")
    e.add_argument("--width", type=int, default=5)
    e.add_argument("--max-len", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--loss", choices=("edit", "sbleu", "lm"), default="edit")
    e.add_argument("--scorer", help="checkpoint scoring the lm loss (default: --ckpt)")
    e.set_defaults(func=_eval)

    v = sub.add_parser("verify", help="run oracle verification suites")
    v.add_argument("--suite", choices=("grad", "snis", "pg", "mrt", "all"), default="all")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=_verify)

    s = sub.add_parser("sweep", help="train over a grid of config overrides")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--jobs", type=int, default=1, help="runs trained in parallel")
    s.set_defaults(func=_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError, FloatingPointError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
