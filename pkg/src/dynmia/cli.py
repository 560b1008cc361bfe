"""``dynmia`` command line: one subcommand per pipeline stage.

The last line written to stdout is always a one-line JSON summary; the exit
code is 0 only when the requested stage succeeded.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .attack import VARIANTS
from .config import load_config
from .errors import DynMIAError
from .pipeline import SHADOW_MODES, run_stage
from .trainers import STEP_COUNTER

EXTRACT_SOURCES = ("target", "shadow", "defended", "defended-shadow")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (key.path = value lines)")
    common.add_argument("--out", help="output directory (default: the config's 'out')")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--force", action="store_true", help="recompute even if the artifact exists")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dynmia", description="Membership inference on dynamic networks.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="draw and save the data partitions")
    sub.add_parser("train-target", parents=[common], help="train the target model")
    s = sub.add_parser("shadow", parents=[common], help="build a shadow model")
    s.add_argument("--mode", choices=SHADOW_MODES, help="fine-tune mode, or 'scratch' for the baseline shadow")
    s = sub.add_parser("extract", parents=[common], help="write member/non-member feature files")
    s.add_argument("which", nargs="?", default="target", choices=EXTRACT_SOURCES)
    s.add_argument("--mode", choices=SHADOW_MODES)
    for name, helptext in (("attack", "train an attack model"), ("eval", "evaluate an attack on the target")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--variant", choices=VARIANTS, default="fusion")
        s.add_argument("--mode", choices=SHADOW_MODES[:-1])
    s = sub.add_parser("defend", parents=[common], help="adversarially regularised target, re-attacked")
    s.add_argument("--mode", choices=SHADOW_MODES[:-1])
    sub.add_parser("run-all", parents=[common], help="every stage end to end")
    return p


def _stage_kwargs(args) -> dict:
    kw = {}
    if getattr(args, "mode", None):
        kw["mode"] = args.mode
    if args.command in ("attack", "eval"):
        kw["variant"] = args.variant
    if args.command == "extract":
        kw["which"] = args.which
    return kw


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    steps0 = STEP_COUNTER["steps"]
    try:
        cfg = load_config(args.config, {"seed": args.seed})
        summary = run_stage(cfg, args.command, out=args.out, force=args.force, **_stage_kwargs(args))
        summary["status"] = "ok"
        code = 0
    except (DynMIAError, OSError) as exc:
        summary = {"stage": args.command, "status": "error", "error": type(exc).__name__,
                   "message": str(exc)}
        code = 1
    summary["train_steps"] = STEP_COUNTER["steps"] - steps0
    print(json.dumps(summary, sort_keys=True))
    return code


if __name__ == "__main__":
    sys.exit(main())
