"""Command-line entry point: ``flowctrl <stage> [--config PATH] [--seed N] [--workspace DIR] [--precision P]``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import config as C
from . import pipeline as P

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3
STAGES = ("generate", "curate", "pretrain", "train-aligner", "rlhr", "eval", "report")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML run configuration (defaults apply if omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--workspace", metavar="DIR", default="workspace", help="stage input/output directory")
    common.add_argument("--precision", choices=("f32", "f64"), help="override the config float precision")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="flowctrl", description="Instruction-conditioned flow policy pipeline on a planar chain.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in STAGES:
        sp = sub.add_parser(name, parents=[common])
        if name == "eval":
            sp.add_argument("--policy", choices=("bc", "rlhr"), default="bc",
                            help="evaluate the pretrained EMA policy or the RL post-trained one")
    return parser


def resolve_config(args) -> C.RunConfig:
    cfg = C.load(args.config) if args.config else C.RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.precision is not None:
        overrides["precision"] = args.precision
    if overrides:
        try:
            cfg = cfg.replace(**overrides)
        except ValueError as exc:
            raise C.ConfigError(str(exc)) from exc
    return cfg


def run(args) -> int:
    cfg = resolve_config(args)
    ws = P.Workspace(args.workspace)
    cmd = args.command
    if cmd == "generate":
        P.cmd_generate(cfg, ws)
    elif cmd == "curate":
        P.cmd_curate(cfg, ws)
    elif cmd == "pretrain":
        P.cmd_pretrain(cfg, ws)
    elif cmd == "train-aligner":
        P.cmd_train_aligner(cfg, ws)
    elif cmd == "rlhr":
        P.cmd_rlhr(cfg, ws)
    elif cmd == "eval":
        print(P.cmd_eval(cfg, ws, args.policy).to_text(), end="")
    elif cmd == "report":
        print(P.cmd_report(cfg, ws), end="")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except C.ConfigError as exc:
        print(f"flowctrl: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except P.PipelineError as exc:
        print(f"flowctrl: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
