"""Config-driven experiment orchestration and metrics emission."""

import dataclasses
import json
import os

import numpy as np

from .analysis import evaluate
from .attack import AttackConfig
from .checkpoint import save_checkpoint
from .data import DatasetSpec, load_dataset
from .network import MiniCNN, ModelConfig, make_finetune_model
from .training import TrainConfig, run_training, warmup_bn

METRICS_HEADER = ("epoch,lr,train_loss,clean_acc,pgd_acc,"
                  "grad_norm_mean,grad_norm_cv,weight_dist")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


def _build(cls, raw, context, converters=None):
    if not isinstance(raw, dict):
        raise ConfigError(f"{context}: expected an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(converters or {}) - allowed
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if converters and key in converters:
            kwargs[key] = converters[key](value)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{context}: {exc}") from exc


def parse_attack_config(raw, context="attack"):
    return _build(AttackConfig, raw, context)


def parse_train_config(raw, context="train"):
    return _build(TrainConfig, raw, context,
                  converters={"attack": parse_attack_config})


def parse_dataset_spec(raw, context="dataset"):
    spec = _build(DatasetSpec, raw, context)
    for path in (spec.images_path, spec.labels_path):
        if path and not os.path.exists(path):
            raise ConfigError(f"{context}: referenced file {path!r} missing")
    return spec


class ExperimentConfig:
    """Validated JSON experiment description.

    Top-level keys: out_dir, seeds, model, target_data, source_data
    (optional), pretrain (optional), finetune, eval_attack (optional).
    Unknown keys are rejected everywhere.
    """

    _TOP_KEYS = {"out_dir", "seeds", "model", "target_data", "source_data",
                 "pretrain", "finetune", "eval_attack"}

    def __init__(self, raw):
        unknown = set(raw) - self._TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
        for key in ("out_dir", "model", "target_data", "finetune"):
            if key not in raw:
                raise ConfigError(f"missing required key {key!r}")
        self.out_dir = raw["out_dir"]
        self.seeds = list(raw.get("seeds", [0]))
        self.model = _build(ModelConfig, raw["model"], "model")
        self.target_data = parse_dataset_spec(raw["target_data"],
                                              "target_data")
        self.source_data = (parse_dataset_spec(raw["source_data"],
                                               "source_data")
                            if raw.get("source_data") else None)
        self.pretrain = (parse_train_config(raw["pretrain"], "pretrain")
                         if raw.get("pretrain") else None)
        self.finetune = parse_train_config(raw["finetune"], "finetune")
        self.eval_attack = (parse_attack_config(raw["eval_attack"],
                                                "eval_attack")
                            if raw.get("eval_attack") else None)
        if self.pretrain is not None and self.source_data is None:
            raise ConfigError("pretrain stage declared without source_data")

    @classmethod
    def from_file(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls(json.load(fh))


def write_metrics(history, path):
    """CSV with the fixed metrics header, one row per epoch."""
    if len(history) == 0:
        raise ValueError("refusing to write an empty metrics file")
    lines = [METRICS_HEADER]
    for rec in history:
        lines.append(",".join([
            str(rec.epoch), f"{rec.lr:.12g}", f"{rec.train_loss:.12g}",
            f"{rec.clean_acc:.12g}", f"{rec.pgd_acc:.12g}",
            f"{rec.grad_norm_mean:.12g}", f"{rec.grad_norm_cv:.12g}",
            f"{rec.weight_dist:.12g}"]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_metrics(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().strip().split("\n")
    if lines[0] != METRICS_HEADER:
        raise ValueError("unexpected metrics header")
    cols = METRICS_HEADER.split(",")
    rows = []
    for line in lines[1:]:
        values = line.split(",")
        rows.append({c: float(v) for c, v in zip(cols, values)})
    return rows


def _source_model_config(cfg):
    return ModelConfig(
        input_shape=cfg.model.input_shape, widths=cfg.model.widths,
        target_classes=cfg.source_data.classes, source_classes=0,
        dtype=cfg.model.dtype, bn_eps=cfg.model.bn_eps,
        bn_momentum=cfg.model.bn_momentum)


def run_pretrain(cfg, out_dir=None):
    """Robust source-task pre-training from random init; returns the
    trained model and writes a checkpoint when out_dir is given."""
    if cfg.source_data is None or cfg.pretrain is None:
        raise ConfigError("pre-training needs source_data and pretrain")
    train, val = load_dataset(cfg.source_data)
    model = MiniCNN(_source_model_config(cfg),
                    rng=np.random.default_rng(cfg.pretrain.seed))
    model, history = run_training(cfg.pretrain, train, val, model)
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "pretrained.ckpt"), model,
                        {"stage": "pretrain", "method": cfg.pretrain.method,
                         "seed": cfg.pretrain.seed,
                         "epochs": cfg.pretrain.epochs})
        write_metrics(history, os.path.join(out_dir, "pretrain_metrics.csv"))
    return model, history


def run_finetune(cfg, pretrained, seed, out_dir=None, tag=""):
    """Warmup (optional) plus fine-tuning for one seed."""
    train, val = load_dataset(cfg.target_data)
    ft = dataclasses.replace(cfg.finetune, seed=seed)
    model = make_finetune_model(pretrained, cfg.model.target_classes,
                                seed=seed)
    if ft.warmup_epochs > 0:
        warmup_bn(model, train[0], ft.attack,
                  rng=np.random.default_rng(seed + 7919),
                  warmup_epochs=ft.warmup_epochs, batch=ft.batch,
                  momentum=cfg.model.bn_momentum)
    source_train = None
    if ft.method == "joint":
        if cfg.source_data is None:
            raise ConfigError("joint fine-tuning needs source_data")
        source_train, _ = load_dataset(cfg.source_data)
    model, history = run_training(ft, train, val, model,
                                  source_data=source_train)
    if out_dir is not None:
        suffix = f"{tag}_seed{seed}" if tag else f"seed{seed}"
        save_checkpoint(os.path.join(out_dir, f"finetuned_{suffix}.ckpt"),
                        model, {"stage": "finetune", "method": ft.method,
                                "seed": seed, "epochs": ft.epochs})
        write_metrics(history,
                      os.path.join(out_dir, f"metrics_{suffix}.csv"))
    return model, history


def run_experiment(config_path, seed_override=None, out_override=None,
                   method_override=None):
    """Full pipeline: optional pre-training, then per-seed warmup,
    fine-tuning and evaluation. Artifacts land in the output directory."""
    cfg = ExperimentConfig.from_file(config_path)
    if out_override:
        cfg.out_dir = out_override
    if seed_override is not None:
        cfg.seeds = [seed_override]
    if method_override is not None:
        cfg.finetune = dataclasses.replace(cfg.finetune,
                                           method=method_override)
    os.makedirs(cfg.out_dir, exist_ok=True)
    if cfg.pretrain is not None:
        pretrained, _ = run_pretrain(cfg, out_dir=cfg.out_dir)
    else:
        pretrained = MiniCNN(_source_model_config(cfg) if cfg.source_data
                             else ModelConfig(
                                 input_shape=cfg.model.input_shape,
                                 widths=cfg.model.widths,
                                 target_classes=cfg.model.target_classes,
                                 dtype=cfg.model.dtype,
                                 bn_eps=cfg.model.bn_eps,
                                 bn_momentum=cfg.model.bn_momentum),
                             rng=np.random.default_rng(cfg.finetune.seed))
    results = {}
    for seed in cfg.seeds:
        model, history = run_finetune(cfg, pretrained, seed,
                                      out_dir=cfg.out_dir)
        _, val = load_dataset(cfg.target_data)
        attack = cfg.eval_attack or cfg.finetune.attack
        clean, robust = evaluate(model, val, attack,
                                 rng=np.random.default_rng(seed + 104729))
        results[seed] = {"clean_acc": clean, "pgd_acc": robust}
    with open(os.path.join(cfg.out_dir, "summary.json"), "w",
              encoding="utf-8") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
    return results
