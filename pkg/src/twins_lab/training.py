"""Training objectives, SGD with momentum, LR schedule and the epoch loop.

Methods: std (clean), at, trades, twins-at, twins-trades, lwf, joint.
Sub-batch terms are per-sub-batch means so the twins penalty weight is
batch-size independent; `sum_mode` restores literal sub-batch sums.
"""

from dataclasses import dataclass, field

import numpy as np

from .attack import AttackConfig, pgd_attack
from .network import BranchMode, copy_model
from .tensor import (Tensor, backprop, kl_div_logits, softmax_cross_entropy)

METHODS = ("std", "at", "trades", "twins-at", "twins-trades", "lwf", "joint")


@dataclass
class TrainConfig:
    method: str = "at"
    eta: float = 3e-3
    lambda_wd: float = 1e-4
    momentum: float = 0.9
    lambda_twins: float = 0.3
    lambda_lwf: float = 0.01
    lambda_uot: float = 0.01
    beta: float = 6.0
    batch: int = 64
    epochs: int = 20
    milestones: tuple = (10, 16)
    decay: float = 0.1
    seed: int = 0
    attack: AttackConfig = field(default_factory=AttackConfig)
    warmup_epochs: int = 0
    kl_clean_first: bool = False  # default argument order: (adv, clean)
    sum_mode: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown training method: {self.method!r}")
        if self.method.startswith("twins") and self.batch % 2 != 0:
            raise ValueError("twins methods need an even batch size")
        for name in ("eta", "lambda_wd", "momentum", "lambda_twins",
                     "lambda_lwf", "lambda_uot", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    clean_acc: float
    pgd_acc: float
    grad_norm_mean: float
    grad_norm_cv: float
    weight_dist: float


class OptState:
    """Per-parameter SGD velocity, initialized to zero."""

    def __init__(self):
        self.velocity = {}

    def get(self, name, like):
        if name not in self.velocity:
            self.velocity[name] = np.zeros_like(like)
        return self.velocity[name]


def lr_at_epoch(cfg, epoch):
    if not 0 <= epoch < cfg.epochs:
        raise ValueError("epoch out of range")
    drops = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.eta * cfg.decay ** drops


def sgd_update(params, grads, opt, rate, lambda_wd, momentum, names=None):
    """Coupled weight decay on all parameters, then momentum step."""
    if names is None:
        names = params.names()
    for name in names:
        if name not in grads:
            raise KeyError(f"missing gradient for parameter {name!r}")
        p = params[name]
        g = grads[name] + lambda_wd * p.data
        v = opt.get(name, p.data)
        v *= momentum
        v += g
        p.data = p.data - rate * v


def _mean_ce(model, x, y, mode, head="target", update_running=False):
    _, logits = model.forward(x, mode, head=head,
                              update_running=update_running)
    return softmax_cross_entropy(logits, y)


def _scaled(loss, count, cfg):
    return loss * float(count) if cfg is not None and cfg.sum_mode else loss


def compute_at_loss(model, adv_x, y, mode=BranchMode.ADAPTIVE_TRAIN,
                    update_running=True, head="target"):
    """Mean CE on an adversarial batch through one branch."""
    return _mean_ce(model, adv_x, y, mode, head=head,
                    update_running=update_running)


def compute_twins_at_loss(model, x, y, cfg, rng=None, update_running=True,
                          adv=None):
    """Adaptive-branch CE on the first half plus a weighted frozen-branch
    CE on the second half; adversarial examples come from attacking the
    Adaptive branch over the full batch."""
    n = len(y)
    if n % 2 != 0:
        raise ValueError("twins losses need an even batch")
    if adv is None:
        adv = pgd_attack(model, BranchMode.ADAPTIVE_TRAIN, x, y, cfg.attack,
                         rng)
    half = n // 2
    la = _mean_ce(model, adv[:half], y[:half], BranchMode.ADAPTIVE_TRAIN,
                  update_running=update_running)
    lf = _mean_ce(model, adv[half:], y[half:], BranchMode.FROZEN_TRAIN)
    return _scaled(la, half, cfg) + cfg.lambda_twins * _scaled(lf, half, cfg)


def compute_trades_loss(model, x, y, cfg, rng=None, update_running=True,
                        adv=None):
    """CE on adversarial inputs plus beta-weighted KL between adversarial
    and clean predictive distributions, single branch."""
    if adv is None:
        adv = pgd_attack(model, BranchMode.ADAPTIVE_TRAIN, x, y, cfg.attack,
                         rng)
    _, clean_logits = model.forward(x, BranchMode.ADAPTIVE_TRAIN,
                                    update_running=update_running)
    _, adv_logits = model.forward(adv, BranchMode.ADAPTIVE_TRAIN,
                                  update_running=False)
    ce = softmax_cross_entropy(adv_logits, y)
    kl = (kl_div_logits(clean_logits, adv_logits) if cfg.kl_clean_first
          else kl_div_logits(adv_logits, clean_logits))
    return ce + cfg.beta * kl


def compute_twins_trades_loss(model, x, y, cfg, rng=None,
                              update_running=True, adv=None):
    """The trades objective through the Adaptive branch on the first half
    plus the same two terms through the Frozen branch on the second half,
    weighted by the twins penalty."""
    n = len(y)
    if n % 2 != 0:
        raise ValueError("twins losses need an even batch")
    if adv is None:
        adv = pgd_attack(model, BranchMode.ADAPTIVE_TRAIN, x, y, cfg.attack,
                         rng)
    half = n // 2

    def wing(xc, xa, yc, mode, update):
        _, cl = model.forward(xc, mode, update_running=update)
        _, al = model.forward(xa, mode, update_running=False)
        ce = softmax_cross_entropy(al, yc)
        kl = (kl_div_logits(cl, al) if cfg.kl_clean_first
              else kl_div_logits(al, cl))
        return _scaled(ce, half, cfg) + cfg.beta * _scaled(kl, half, cfg)

    la = wing(x[:half], adv[:half], y[:half], BranchMode.ADAPTIVE_TRAIN,
              update_running)
    lf = wing(x[half:], adv[half:], y[half:], BranchMode.FROZEN_TRAIN, False)
    return la + cfg.lambda_twins * lf


def _feature_distance(feats, feats_ref):
    d = feats - feats_ref
    sq = (d * d).sum(axis=1)
    return sq.sqrt().mean()


def compute_lwf_loss(model, pretrained, x, y, cfg, rng=None,
                     update_running=True, adv=None):
    """CE on adversarial inputs plus a penalty on the Euclidean distance
    between current and pre-trained feature vectors."""
    if pretrained.feature_width != model.feature_width:
        raise ValueError("feature width mismatch with the pre-trained copy")
    if adv is None:
        adv = pgd_attack(model, BranchMode.ADAPTIVE_TRAIN, x, y, cfg.attack,
                         rng)
    feats, logits = model.forward(adv, BranchMode.ADAPTIVE_TRAIN,
                                  update_running=update_running)
    ce = softmax_cross_entropy(logits, y)
    if cfg.lambda_lwf == 0.0:
        return ce
    ref_feats, _ = pretrained.forward(adv, BranchMode.INFERENCE,
                                      update_running=False)
    reg = _feature_distance(feats, Tensor(ref_feats.data.copy()))
    return ce + cfg.lambda_lwf * reg


def compute_joint_loss(model, x, y, x_src, y_src, cfg, rng=None,
                       update_running=True, adv=None):
    """Target-task CE plus a weighted source-task CE through the source
    head; both batches are attacked against the Adaptive branch."""
    if "src_head.w" not in model.params:
        raise ValueError("joint training needs a source-task head")
    if adv is None:
        adv = pgd_attack(model, BranchMode.ADAPTIVE_TRAIN, x, y, cfg.attack,
                         rng)
    loss = _mean_ce(model, adv, y, BranchMode.ADAPTIVE_TRAIN,
                    update_running=update_running)
    if cfg.lambda_uot == 0.0 or x_src is None or len(y_src) == 0:
        return loss
    adv_src = pgd_attack(model, BranchMode.ADAPTIVE_TRAIN, x_src, y_src,
                         cfg.attack, rng, head="source")
    ls = _mean_ce(model, adv_src, y_src, BranchMode.ADAPTIVE_TRAIN,
                  head="source", update_running=False)
    return loss + cfg.lambda_uot * ls


def warmup_bn(model, x_data, attack_cfg, rng=None, warmup_epochs=1,
              batch=64, momentum=0.1):
    """EMA-update the frozen statistics with adversarial target data.

    Adversarial examples are generated with the source head, driven by
    CE against the head's own argmax pseudo-labels; they are then pushed
    through the Frozen branch and each BN layer's input batch statistics
    are folded into the frozen statistics with the given momentum.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    n = len(x_data)
    for _ in range(warmup_epochs):
        for start in range(0, n, batch):
            xb = x_data[start:start + batch]
            if len(xb) < 2:
                continue
            _, logits = model.forward(xb, BranchMode.INFERENCE, head="source",
                                      update_running=False)
            pseudo = np.argmax(logits.data, axis=1)
            adv = pgd_attack(model, BranchMode.ADAPTIVE_TRAIN, xb, pseudo,
                             attack_cfg, rng, head="source")
            capture = {}
            model.forward(adv, BranchMode.FROZEN_TRAIN, head="source",
                          update_running=False, capture=capture)
            for i, state in enumerate(model.bn, start=1):
                pre = capture[f"bn{i}.pre"].data
                mean = pre.mean(axis=(0, 2, 3))
                var = pre.var(axis=(0, 2, 3))
                state.frozen_mean = ((1.0 - momentum) * state.frozen_mean
                                     + momentum * mean)
                state.frozen_var = ((1.0 - momentum) * state.frozen_var
                                    + momentum * var)


def batch_loss(model, xb, yb, cfg, rng, aux=None):
    """Dispatch one mini-batch to the configured objective."""
    method = cfg.method
    if method == "std":
        return _mean_ce(model, xb, yb, BranchMode.ADAPTIVE_TRAIN,
                        update_running=True)
    if method == "at":
        adv = pgd_attack(model, BranchMode.ADAPTIVE_TRAIN, xb, yb, cfg.attack,
                         rng)
        return compute_at_loss(model, adv, yb)
    if method == "trades":
        return compute_trades_loss(model, xb, yb, cfg, rng)
    if method == "twins-at":
        return compute_twins_at_loss(model, xb, yb, cfg, rng)
    if method == "twins-trades":
        return compute_twins_trades_loss(model, xb, yb, cfg, rng)
    if method == "lwf":
        return compute_lwf_loss(model, aux["pretrained"], xb, yb, cfg, rng)
    if method == "joint":
        xs, ys = aux["source_batch"](len(yb))
        return compute_joint_loss(model, xb, yb, xs, ys, cfg, rng)
    raise ValueError(f"unknown training method: {method!r}")


def flat_grad_norm(grads, names):
    total = 0.0
    for name in names:
        g = grads[name]
        total += float((g.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


def run_training(cfg, train_data, val_data, model, source_data=None):
    """The per-epoch / per-batch loop; returns (model, history).

    `train_data`/`val_data` are (x, y) pairs of arrays. Robust
    pre-training is this same loop with method "at" from random init.
    """
    from .analysis import evaluate, grad_norm_epoch_stats, weight_distance

    if cfg.method not in METHODS:
        raise ValueError(f"unknown training method: {cfg.method!r}")
    x_train, y_train = train_data
    rng = np.random.default_rng(cfg.seed)
    names = model.trainable_names(cfg.method)
    init_params = {n: model.params[n].data.copy() for n in names}
    opt = OptState()

    aux = {}
    if cfg.method == "lwf":
        aux["pretrained"] = copy_model(model)
        for _, p in aux["pretrained"].params.items():
            p.requires_grad = False
    if cfg.method == "joint":
        if source_data is None:
            raise ValueError("joint training needs source data")
        xs_all, ys_all = source_data

        def draw_source(count):
            idx = rng.integers(0, len(ys_all), size=count)
            return xs_all[idx], ys_all[idx]

        aux["source_batch"] = draw_source

    history = []
    for epoch in range(cfg.epochs):
        rate = lr_at_epoch(cfg, epoch)
        order = rng.permutation(len(y_train))
        losses = []
        norms = []
        for start in range(0, len(order) - cfg.batch + 1, cfg.batch):
            idx = order[start:start + cfg.batch]
            loss = batch_loss(model, x_train[idx], y_train[idx], cfg, rng, aux)
            grads = backprop(loss, model.params, names)
            losses.append(loss.item())
            norms.append(flat_grad_norm(grads, names))
            sgd_update(model.params, grads, opt, rate, cfg.lambda_wd,
                       cfg.momentum, names)
        clean_acc, pgd_acc = evaluate(model, val_data, cfg.attack,
                                      rng=np.random.default_rng(
                                          cfg.seed * 100003 + epoch))
        gmean, _, gcv = grad_norm_epoch_stats(norms)
        current = {n: model.params[n].data for n in names}
        history.append(EpochRecord(
            epoch=epoch, lr=rate,
            train_loss=float(np.mean(losses)) if losses else float("nan"),
            clean_acc=clean_acc, pgd_acc=pgd_acc,
            grad_norm_mean=gmean, grad_norm_cv=gcv,
            weight_dist=weight_distance(current, init_params)))
    return model, history
