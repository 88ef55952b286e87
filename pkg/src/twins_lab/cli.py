"""Command-line surface: gen-data, pretrain, finetune, eval, analyze, run."""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .analysis import evaluate, grad_norm_epoch_stats, overfitting_gap
from .checkpoint import load_checkpoint
from .data import load_dataset, save_idx
from .experiment import (ConfigError, ExperimentConfig, read_metrics,
                         run_experiment, run_finetune, run_pretrain)


def _load_config(args):
    cfg = ExperimentConfig.from_file(args.config)
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def _cmd_gen_data(args):
    cfg = _load_config(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    for name, spec in (("target", cfg.target_data),
                       ("source", cfg.source_data)):
        if spec is None:
            continue
        (xt, yt), (xv, yv) = load_dataset(spec)
        x = np.concatenate([xt, xv])
        y = np.concatenate([yt, yv])
        if x.shape[1] == 1:
            save_idx(x, y, os.path.join(cfg.out_dir, f"{name}-images.idx"),
                     os.path.join(cfg.out_dir, f"{name}-labels.idx"))
        else:
            np.savez(os.path.join(cfg.out_dir, f"{name}.npz"), x=x, y=y)
        print(f"{name}: {len(y)} samples "
              f"({len(yt)} train / {len(yv)} val)")
    return 0


def _cmd_pretrain(args):
    cfg = _load_config(args)
    if args.seed is not None:
        cfg.pretrain = dataclasses.replace(cfg.pretrain, seed=args.seed)
    os.makedirs(cfg.out_dir, exist_ok=True)
    _, history = run_pretrain(cfg, out_dir=cfg.out_dir)
    print(f"pre-training done: final clean acc {history[-1].clean_acc:.3f}, "
          f"pgd acc {history[-1].pgd_acc:.3f}")
    return 0


def _cmd_finetune(args):
    cfg = _load_config(args)
    if args.method:
        cfg.finetune = dataclasses.replace(cfg.finetune, method=args.method)
    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt = args.checkpoint or os.path.join(cfg.out_dir, "pretrained.ckpt")
    pretrained, _ = load_checkpoint(ckpt)
    seeds = [args.seed] if args.seed is not None else cfg.seeds
    for seed in seeds:
        _, history = run_finetune(cfg, pretrained, seed, out_dir=cfg.out_dir,
                                  tag=cfg.finetune.method)
        print(f"seed {seed}: clean {history[-1].clean_acc:.3f}, "
              f"pgd {history[-1].pgd_acc:.3f}")
    return 0


def _cmd_eval(args):
    cfg = _load_config(args)
    model, meta = load_checkpoint(args.checkpoint)
    _, val = load_dataset(cfg.target_data)
    attack = cfg.eval_attack or cfg.finetune.attack
    clean, robust = evaluate(model, val, attack,
                             rng=np.random.default_rng(args.seed or 0))
    print(json.dumps({"checkpoint": args.checkpoint,
                      "method": meta.get("method"),
                      "clean_acc": clean, "pgd_acc": robust}, indent=2))
    return 0


def _cmd_analyze(args):
    for path in args.metrics:
        rows = read_metrics(path)
        robust = [r["pgd_acc"] for r in rows]
        best, final, gap = overfitting_gap(robust)
        gmean, _, gcv = grad_norm_epoch_stats(
            [r["grad_norm_mean"] for r in rows])
        print(f"{path}: epochs={len(rows)} best_pgd={best:.4f} "
              f"final_pgd={final:.4f} gap={gap:.4f} "
              f"grad_norm_mean={gmean:.4g} grad_norm_cv={gcv:.4g} "
              f"final_weight_dist={rows[-1]['weight_dist']:.4g}")
    return 0


def _cmd_run(args):
    results = run_experiment(args.config, seed_override=args.seed,
                             out_override=args.out,
                             method_override=args.method)
    print(json.dumps(results, indent=2, sort_keys=True))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="twins-lab",
        description="Dual-branch batch-norm adversarial fine-tuning lab")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **extra):
        p = sub.add_parser(name)
        p.set_defaults(fn=fn)
        return p

    for name, fn, needs_cfg in (
            ("gen-data", _cmd_gen_data, True),
            ("pretrain", _cmd_pretrain, True),
            ("finetune", _cmd_finetune, True),
            ("eval", _cmd_eval, True),
            ("run", _cmd_run, True)):
        p = add(name, fn)
        p.add_argument("config", help="experiment config (JSON)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        if name in ("finetune", "run"):
            p.add_argument("--method", default=None,
                           help="override the fine-tuning method")
        if name in ("finetune", "eval"):
            p.add_argument("--checkpoint",
                           default=None if name == "finetune" else None,
                           required=(name == "eval"),
                           help="checkpoint path")
    p = add("analyze", _cmd_analyze)
    p.add_argument("metrics", nargs="+", help="metrics CSV files")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
