"""Command line: ``fedapt {pretrain,train,eval,ablate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import config as cfgmod
from .harness.ablate import PRESETS, run_preset
from .harness.config import ExperimentConfig
from .harness.runs import cmd_eval, cmd_pretrain, cmd_train, read_jsonl, run_dir
from .checkpoint import CheckpointError
from .dataset import PretrainGateError
from .tensor import ConfigError


def _config(args) -> ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _seeds(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedapt", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat YAML experiment config (defaults if omitted)")
    common.add_argument("--seed", type=int, help="run seed (overrides the config)")
    common.add_argument("--out", default="fedapt_out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("pretrain", parents=[common], help="pretrain or reuse the frozen backbone")

    p = sub.add_parser("train", parents=[common], help="federated adversarial prompt tuning")
    p.add_argument("--no-figure", action="store_true", help="skip the round-log figure")

    p = sub.add_parser("eval", parents=[common], help="clean / PGD / CW accuracy of a trained run")
    p.add_argument("--run", help="run directory (default: derived from config and seed)")
    p.add_argument("--attack", choices=cfgmod.ATTACKS, action="append",
                   help="attack to run; repeatable (default: config eval_attacks)")
    p.add_argument("--eps", type=float, help="budget in units of 1/255")
    p.add_argument("--steps", type=int, help="attack iterations")

    p = sub.add_parser("ablate", parents=[common], help="run an ablation preset over seeds")
    p.add_argument("--preset", required=True, choices=PRESETS)
    p.add_argument("--seeds", help="comma-separated seeds (default: config seeds)")
    p.add_argument("--attack", choices=cfgmod.ATTACKS, default="pgd")
    p.add_argument("--eps", type=float, help="evaluation budget in units of 1/255")
    p.add_argument("--steps", type=int, help="attack iterations")
    p.add_argument("--no-figure", action="store_true", help="skip the summary figure")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    out = Path(args.out)
    try:
        cfg = _config(args)
        if args.command == "pretrain":
            print(cmd_pretrain(cfg, out))
        elif args.command == "train":
            cmd_pretrain(cfg, out)
            rdir = cmd_train(cfg, out)
            if not args.no_figure:
                from .harness.report import plot_rounds
                plot_rounds(read_jsonl(rdir / "rounds.jsonl"), rdir / "rounds.png")
            print(rdir)
        elif args.command == "eval":
            rdir = Path(args.run) if args.run else run_dir(cfg, out, cfg.seed)
            path = cmd_eval(rdir, out, args.attack, args.eps, args.steps)
            print(path)
        elif args.command == "ablate":
            summary = run_preset(args.preset, cfg, out, _seeds(args.seeds), args.attack, args.eps, args.steps)
            pdir = out / "ablate" / args.preset
            if not args.no_figure:
                from .harness.report import plot_preset
                plot_preset(summary, pdir / f"{args.preset}.png")
            print((pdir / "summary.txt").read_text(), end="")
    except (ConfigError, FileNotFoundError, CheckpointError, PretrainGateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
