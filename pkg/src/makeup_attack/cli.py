"""``makeup-attack`` command line.

Every subcommand reads and writes one output directory (``--out``). Failures
print a single ``error kind=<Type> message="..."`` line on stderr and exit
nonzero: 2 for configuration problems, 3 for missing or malformed artifacts,
4 for aborted training, 1 for anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import torch

from . import pipeline
from .config import ConfigError, load_config
from .io import ArtifactError
from .meta_attack import AttackError
from .victims import VictimTrainingError

EXIT_CODES = ((ConfigError, 2), (ArtifactError, 3), (FileNotFoundError, 3), (AttackError, 4), (VictimTrainingError, 4))


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment JSON; omitted fields take their defaults")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default="runs/toy", help="output directory (default: %(default)s)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="makeup-attack", description="Makeup-style patch attacks on toy face embedders.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="render the synthetic face and makeup sets")
    sub.add_parser("train-victims", parents=[common], help="train the toy embedders")
    sub.add_parser("calibrate", parents=[common], help="set each victim's tau at the configured FAR")
    ta = sub.add_parser("train-attack", parents=[common], help="train one generator per held-out victim")
    ta.add_argument("--mode", choices=pipeline.MODES, default="meta")
    at = sub.add_parser("attack", parents=[common], help="write adversarial images for every pair")
    at.add_argument("--method", choices=pipeline.METHODS, default="advmakeup")
    at.add_argument("--mode", choices=pipeline.MODES, default="meta", help="which trained generator (advmakeup)")
    at.add_argument("--checkpoint", help="generator checkpoint to use for every holdout")
    ev = sub.add_parser("eval", parents=[common], help="score adversarial images on the held-out victims")
    ev.add_argument("--method", choices=pipeline.METHODS, help="only this method (default: all attacked)")
    ev.add_argument("--mode", choices=pipeline.MODES, default="meta")
    sub.add_parser("report", parents=[common], help="comparison table and threshold-sweep plots")
    run = sub.add_parser("run", parents=[common], help="every stage in order")
    run.add_argument("--mode", choices=pipeline.MODES, default="meta")
    run.add_argument("--methods", nargs="+", choices=pipeline.METHODS, default=["advmakeup", "none"])
    return p


def _dispatch(args, cfg):
    out = args.out
    c = args.command
    if c == "synth":
        return pipeline.cmd_synth(cfg, out)
    if c == "train-victims":
        return pipeline.cmd_train_victims(cfg, out)
    if c == "calibrate":
        return pipeline.cmd_calibrate(cfg, out)
    if c == "train-attack":
        return pipeline.cmd_train_attack(cfg, out, args.mode)
    if c == "attack":
        return pipeline.cmd_attack(cfg, out, args.method, args.mode, args.checkpoint)
    if c == "eval":
        labels = None if args.method is None else [pipeline.method_label(args.method, args.mode)]
        return pipeline.cmd_eval(cfg, out, labels)
    if c == "report":
        return pipeline.cmd_report(cfg, out)
    if c == "run":
        return pipeline.run_all(cfg, out, args.mode, args.methods)
    raise AssertionError(c)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    # one thread keeps runs bit-reproducible across machines with different core counts
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config, args.seed)
        result = _dispatch(args, cfg)
    except Exception as e:  # noqa: BLE001 - every failure becomes one parsable line
        code = next((c for t, c in EXIT_CODES if isinstance(e, t)), 1)
        print(f"error kind={type(e).__name__} message={json.dumps(str(e))}", file=sys.stderr)
        return code
    print(json.dumps({"command": args.command, "out": args.out, "result": result}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
