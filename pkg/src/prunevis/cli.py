"""Command-line entry point: ``prunevis <command> [--config PATH] ...``.

Exit codes: 0 success, 1 usage, 2 config or I/O problem, 3 contract
violation, 4 a run finished below its acceptance gate.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from . import harness
from .autodiff import ContractError, NumericError, ShapeError
from .model import CheckpointError, TrainingError

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_CONTRACT, EXIT_GATE = 0, 1, 2, 3, 4

COMMANDS = {
    "train": harness.cmd_train,
    "eval": harness.cmd_eval,
    "probe-priors": harness.cmd_probe_priors,
    "flow": harness.cmd_flow,
    "sweep": harness.cmd_sweep,
    "retention": harness.cmd_retention,
    "timing": harness.cmd_timing,
    "fit-scaling": harness.cmd_fit_scaling,
}

log = logging.getLogger("prunevis")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="prunevis", description="Context-pruning experiments on a toy vision-language model.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="global seed override")
    p.add_argument("--out", help="output directory override")
    p.add_argument("--checkpoint", help="checkpoint path override")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> harness.ExperimentConfig:
    cfg = harness.ExperimentConfig.load(args.config) if args.config else harness.ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    if args.checkpoint is not None:
        cfg = replace(cfg, checkpoint=args.checkpoint)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        fn = COMMANDS[args.command]
        if args.command == "train":
            result = fn(cfg, log=lambda row: log.info("step %s bin %s loss %.4f acc %s", *row[:3], row[4]))
        else:
            result = fn(cfg)
    except (harness.ConfigError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractError, ShapeError, NumericError, TrainingError) as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except harness.GateError as exc:
        print(f"gate failed: {exc}", file=sys.stderr)
        return EXIT_GATE
    outputs = result if isinstance(result, tuple) else (result,)
    for path in outputs:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
