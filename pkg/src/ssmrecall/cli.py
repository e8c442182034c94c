"""Command line entry point: ``ssmrecall <verb> [options]``.

Verbs ``train``, ``evaluate``, ``analyze``, ``report`` run one stage against
a run directory; ``run-all`` runs them in order.  ``build-corpus`` writes
the local reference corpus plus a ready-to-use experiment config.

The thread count comes from ``SSMRECALL_THREADS`` (default 1).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import torch
import yaml

from .pipeline import ExperimentConfig, Run
from .refcorpus import build_reference_corpus

log = logging.getLogger("ssmrecall")

STAGES = ("train", "evaluate", "analyze", "report", "run-all")

REFERENCE_CONFIG = {
    "train_data": {"path": "train.txt"},
    "validation_data": {"path": "validation.txt"},
    "eval_data": [{"path": "eval.jsonl", "format": "jsonl"}],
    "paired": {"path": "paired.jsonl", "format": "jsonl", "variant_a": "as_written", "variant_b": "upper_case"},
    "lengths": [4, 8, 16, 32, 64],
    "seed": 0,
    "pretrain": {"steps": 1200, "learning_rate": 3e-3, "batch_size": 32, "window": 64},
    "train": {
        "learning_rate": 5e-3, "batch_size": 32, "eval_every": 250, "patience_window": 1000,
        "min_f1_delta": 0.1, "validation_size": 128, "max_steps": 6000,
    },
    "evaluation": {"n_per_source": 150, "n_synthetic": 200, "n_repeated": 100},
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssmrecall", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in STAGES:
        s = sub.add_parser(verb, help=f"run the {verb} stage" if verb != "run-all" else "run every stage")
        s.add_argument("--config", type=Path, help="experiment YAML (defaults to OUT/config.yaml)")
        s.add_argument("--out", type=Path, help="run directory (default: runs/<timestamp>)")
        s.add_argument("--length", type=int, action="append", help="restrict to this length (repeatable)")
        s.add_argument("--seed", type=int, help="override the config seed")
        s.add_argument("--max-steps", type=int, help="override the per-length step cap")
        s.add_argument("--resume", action="store_true", help="reuse checkpoints already in --out")
        s.add_argument("-v", "--verbose", action="store_true")
    b = sub.add_parser("build-corpus", help="write the local reference corpus and config")
    b.add_argument("out", type=Path)
    b.add_argument("-v", "--verbose", action="store_true")
    return p


def _load_config(args) -> ExperimentConfig:
    path = args.config
    if path is None:
        if args.out is None or not (args.out / "config.yaml").exists():
            raise SystemExit("error: --config is required unless --out holds a previous run")
        path = args.out / "config.yaml"
    cfg = ExperimentConfig.load(path)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _run_dir(args) -> Path:
    if args.out is not None:
        out = args.out
    elif args.verb in ("train", "run-all"):
        out = Path("runs") / time.strftime("%Y%m%d-%H%M%S")
    else:
        raise SystemExit(f"error: {args.verb} needs --out pointing at a run directory")
    creates = args.verb in ("train", "run-all")
    if creates and out.exists() and any(out.iterdir()) and not args.resume:
        raise SystemExit(f"error: {out} is not empty; pass --resume to continue it")
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    torch.set_num_threads(int(os.environ.get("SSMRECALL_THREADS", "1")))

    if args.verb == "build-corpus":
        stats = build_reference_corpus(args.out)
        cfg_path = args.out / "experiment.yaml"
        cfg_path.write_text(yaml.safe_dump(REFERENCE_CONFIG, sort_keys=False))
        for k, v in stats.items():
            print(f"{k}: {v}")
        print(f"config: {cfg_path}")
        return 0

    cfg = _load_config(args)
    out = _run_dir(args)
    run = Run(cfg, out, resume=args.resume or args.verb not in ("train", "run-all"))
    lengths = args.length or cfg.lengths
    if args.verb == "train":
        run.train(lengths, args.max_steps)
    elif args.verb == "evaluate":
        run.evaluate(lengths)
    elif args.verb == "analyze":
        run.analyze(lengths)
    elif args.verb == "report":
        run.report()
    else:
        run.run_all(lengths, args.max_steps)
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
