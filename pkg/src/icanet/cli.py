"""Command-line entry point: ``icanet {train,eval,predict,gradcheck,synth}``.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure
(non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import tensor as T
from .checkpoint import CheckpointError
from .data import LoadError, load_manifest, load_pair, load_synth_config, synth_dataset
from .engine import (
    TrainConfig,
    TrainingError,
    evaluate,
    model_from_checkpoint,
    predict,
    run_gradcheck,
    train,
)
from .metrics import format_table
from .model import ModelConfig

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad arguments; usage errors here are 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="icanet", description="RGB-thermal salient object detection toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from a manifest")
    t.add_argument("--config", required=True, help="JSON training config")
    t.add_argument("--data", required=True, help="manifest file or dataset directory")
    t.add_argument("--out", required=True, help="directory for checkpoints and the loss log")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--max-steps", type=int, help="stop after this many steps")

    e = sub.add_parser("eval", help="compute metrics for a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="manifest file or dataset directory")
    e.add_argument("--report", required=True, help="directory for CSV reports")
    e.add_argument("--batch-size", type=int, default=4)

    pr = sub.add_parser("predict", help="write 8-bit saliency maps")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--input", required=True, nargs="+", metavar="PATH",
                    help="a manifest/dataset directory, or an RGB and a thermal image")
    pr.add_argument("--out", required=True)
    pr.add_argument("--batch-size", type=int, default=4)

    g = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    g.add_argument("--config", help="JSON config (model, loss and gradcheck sections); default tiny 32x32")
    g.add_argument("--precision", choices=("32", "64", "both"),
                   help="backprop width; default ICANET_PRECISION, or both when unset")

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--spec", required=True, help="JSON: n, size, seed, optional pairs")
    s.add_argument("--out", required=True)
    return p


def _cmd_train(args) -> int:
    cfg = TrainConfig.from_json(args.config)
    manifest = load_manifest(args.data)
    pairs = [load_pair(e, cfg.model.input_size) for e in manifest.entries]
    result = train(cfg, pairs, args.out, resume=args.resume, max_steps=args.max_steps)
    if result.log:
        first, last = result.log[0], result.log[-1]
        print(f"steps {first['step']}..{last['step']}: loss {first['total']:.4f} -> {last['total']:.4f}")
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    model, _, _ = model_from_checkpoint(args.ckpt)
    report = evaluate(model, load_manifest(args.data, split="test"), args.batch_size, args.report)
    print(format_table(report))
    return EXIT_OK


def _cmd_predict(args) -> int:
    model, _, _ = model_from_checkpoint(args.ckpt)
    if len(args.input) == 1:
        m = load_manifest(args.input[0], split="test")
        inputs = [(e.id, e.rgb, e.thermal) for e in m.entries]
    elif len(args.input) == 2:
        rgb, th = (Path(p) for p in args.input)
        inputs = [(rgb.stem, rgb, th)]
    else:
        raise UsageError("--input takes a manifest or exactly two images (RGB, thermal)")
    for path in predict(model, inputs, args.out, args.batch_size):
        print(path)
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig(model=ModelConfig.tiny())
    choice = args.precision or os.environ.get("ICANET_PRECISION") or "both"
    if choice not in ("32", "64", "both"):
        raise UsageError(f"ICANET_PRECISION must be 32 or 64, got {choice!r}")
    widths = (32, 64) if choice == "both" else (int(choice),)
    ok = True
    for bits in widths:
        report = run_gradcheck(cfg.model, cfg.loss, bits, cfg.gradcheck)
        print("\n".join(report.lines()))
        ok &= report.passed
    return EXIT_OK if ok else EXIT_NUMERIC


def _cmd_synth(args) -> int:
    spec = load_synth_config(args.spec)
    manifest = synth_dataset(args.out, spec["n"], spec["size"], spec["seed"], spec["specs"])
    print(manifest)
    return EXIT_OK


COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "gradcheck": _cmd_gradcheck,
    "synth": _cmd_synth,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (TrainingError, T.NonFiniteError) as exc:
        print(f"icanet: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ValueError, LoadError, CheckpointError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"icanet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
