"""MiniCNN with dual-branch batch normalization.

One set of convolution kernels and classifier weights is shared by two
normalization branches: the Adaptive branch normalizes with current batch
statistics and maintains running estimates, the Frozen branch normalizes
with fixed population statistics captured before fine-tuning. Inference
always goes through the Adaptive branch's running statistics.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .tensor import ParamStore, Tensor, conv2d, global_avg_pool, relu


class BranchMode(Enum):
    ADAPTIVE_TRAIN = "adaptive"
    FROZEN_TRAIN = "frozen"
    INFERENCE = "inference"


@dataclass
class ModelConfig:
    input_shape: tuple = (3, 16, 16)
    widths: tuple = (16, 32)
    target_classes: int = 2
    source_classes: int = 0
    dtype: str = "float32"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


class BNLayerState:
    """Per-channel affines plus two statistic sets (running and frozen).

    Affine parameters live in the shared ParamStore (one pair per branch);
    statistics are plain arrays and never receive gradients.
    """

    def __init__(self, channels, params, prefix, dtype, eps=1e-5, momentum=0.1):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.prefix = prefix
        self.gamma_a = params.add(f"{prefix}.gamma_a", np.ones(channels, dtype))
        self.beta_a = params.add(f"{prefix}.beta_a", np.zeros(channels, dtype))
        self.gamma_f = params.add(f"{prefix}.gamma_f", np.ones(channels, dtype))
        self.beta_f = params.add(f"{prefix}.beta_f", np.zeros(channels, dtype))
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        self.frozen_mean = np.zeros(channels, dtype)
        self.frozen_var = np.ones(channels, dtype)


def _affine(xn, gamma, beta):
    c = gamma.shape[0]
    return xn * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)


def _normalize_const(x, mean, var, eps):
    c = mean.shape[0]
    m = Tensor(mean.reshape(1, c, 1, 1))
    s = Tensor(np.sqrt(var + eps).reshape(1, c, 1, 1))
    return (x - m) / s


def bn_forward(x, state, mode):
    """Normalize `x` per channel according to the branch mode.

    Returns (y, batch_stats); batch_stats is a (mean, var) pair of plain
    arrays in ADAPTIVE_TRAIN mode and None otherwise. Never mutates the
    state; committing batch stats is `bn_update_running`'s job.
    """
    if mode is BranchMode.ADAPTIVE_TRAIN:
        if x.shape[0] < 2:
            raise ValueError("adaptive BN needs a batch of at least 2")
        m = x.mean(axis=(0, 2, 3), keepdims=True)
        v = ((x - m) ** 2).mean(axis=(0, 2, 3), keepdims=True)
        xn = (x - m) / (v + state.eps).sqrt()
        y = _affine(xn, state.gamma_a, state.beta_a)
        stats = (m.data.reshape(-1).copy(), v.data.reshape(-1).copy())
        return y, stats
    if mode is BranchMode.FROZEN_TRAIN:
        xn = _normalize_const(x, state.frozen_mean, state.frozen_var, state.eps)
        return _affine(xn, state.gamma_f, state.beta_f), None
    if mode is BranchMode.INFERENCE:
        xn = _normalize_const(x, state.running_mean, state.running_var,
                              state.eps)
        return _affine(xn, state.gamma_a, state.beta_a), None
    raise ValueError(f"unknown branch mode: {mode!r}")


def bn_update_running(state, batch_stats):
    """EMA update: new = (1-m)*old + m*batch, for mean and variance."""
    if batch_stats is None:
        raise ValueError("batch statistics required for a running update")
    mean, var = batch_stats
    m = state.momentum
    state.running_mean = (1.0 - m) * state.running_mean + m * mean
    state.running_var = (1.0 - m) * state.running_var + m * var


class MiniCNN:
    """Conv3x3/s2 -> BN -> ReLU -> Conv3x3/s2 -> BN -> ReLU -> GAP -> linear.

    Desk-scale stand-in for a large pre-trained backbone; two BN branches
    per conv block, weights shared between branches.
    """

    def __init__(self, config: ModelConfig, rng=None):
        self.config = config
        rng = rng if rng is not None else np.random.default_rng(0)
        dt = config.np_dtype()
        self.params = ParamStore()
        self.bn = []
        c_in = config.input_shape[0]
        for i, c_out in enumerate(config.widths, start=1):
            fan_in = c_in * 9
            k = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           size=(c_out, c_in, 3, 3)).astype(dt)
            self.params.add(f"conv{i}", k)
            self.bn.append(BNLayerState(c_out, self.params, f"bn{i}", dt,
                                        eps=config.bn_eps,
                                        momentum=config.bn_momentum))
            c_in = c_out
        feat = config.widths[-1]
        self._init_head(rng, "head", feat, config.target_classes, dt)
        if config.source_classes:
            self._init_head(rng, "src_head", feat, config.source_classes, dt)

    def _init_head(self, rng, name, feat, classes, dt):
        w = rng.normal(0.0, 1.0 / np.sqrt(feat), size=(feat, classes)).astype(dt)
        self.params.add(f"{name}.w", w)
        self.params.add(f"{name}.b", np.zeros(classes, dt))

    @property
    def feature_width(self):
        return self.config.widths[-1]

    def conv_names(self):
        return [f"conv{i}" for i in range(1, len(self.bn) + 1)]

    def head_names(self, head="target"):
        if head == "target":
            return "head.w", "head.b"
        if head == "source":
            if "src_head.w" not in self.params:
                raise ValueError("model has no source-task head")
            return "src_head.w", "src_head.b"
        raise ValueError(f"unknown head: {head!r}")

    def forward(self, x, mode, head="target", update_running=None,
                capture=None):
        """Run one branch end to end; returns (features, logits).

        `update_running` defaults to True in ADAPTIVE_TRAIN and is ignored
        in the other modes. `capture`, if a dict, receives intermediate
        graph nodes keyed by layer (pre-BN and normalized activations).
        """
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.config.np_dtype()))
        wname, bname = self.head_names(head)
        if update_running is None:
            update_running = mode is BranchMode.ADAPTIVE_TRAIN
        h = x
        for i, state in enumerate(self.bn, start=1):
            pre = conv2d(h, self.params[f"conv{i}"], stride=2, pad=1)
            if capture is not None:
                capture[f"bn{i}.in"] = h
                capture[f"bn{i}.pre"] = pre
            y, stats = bn_forward(pre, state, mode)
            if capture is not None:
                capture[f"bn{i}.out"] = y
            if mode is BranchMode.ADAPTIVE_TRAIN and update_running:
                bn_update_running(state, stats)
            h = relu(y)
        features = global_avg_pool(h)
        logits = features @ self.params[wname] + self.params[bname]
        return features, logits

    # -- state handling --------------------------------------------------

    def stat_arrays(self):
        out = {}
        for state in self.bn:
            out[f"{state.prefix}.running_mean"] = state.running_mean
            out[f"{state.prefix}.running_var"] = state.running_var
            out[f"{state.prefix}.frozen_mean"] = state.frozen_mean
            out[f"{state.prefix}.frozen_var"] = state.frozen_var
        return out

    def state_dict(self):
        """All tensors (parameters and statistics) as plain arrays."""
        out = {name: t.data.copy() for name, t in self.params.items()}
        out.update({k: v.copy() for k, v in self.stat_arrays().items()})
        return out

    def load_state_dict(self, tensors):
        for name, t in self.params.items():
            arr = np.asarray(tensors[name], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            t.data = arr.copy()
        for state in self.bn:
            p = state.prefix
            state.running_mean = tensors[f"{p}.running_mean"].astype(
                state.running_mean.dtype).copy()
            state.running_var = tensors[f"{p}.running_var"].astype(
                state.running_var.dtype).copy()
            state.frozen_mean = tensors[f"{p}.frozen_mean"].astype(
                state.frozen_mean.dtype).copy()
            state.frozen_var = tensors[f"{p}.frozen_var"].astype(
                state.frozen_var.dtype).copy()

    def trainable_names(self, method="at"):
        """Parameters touched by a training method.

        Frozen-branch affines only train under the twins methods; the
        source head only trains under `joint`.
        """
        names = []
        twins = method.startswith("twins")
        for name in self.params.names():
            if name.endswith((".gamma_f", ".beta_f")) and not twins:
                continue
            if name.startswith("src_head") and method != "joint":
                continue
            names.append(name)
        return names


def copy_model(model):
    clone = MiniCNN(model.config, rng=np.random.default_rng(0))
    clone.load_state_dict(model.state_dict())
    return clone


def make_finetune_model(pretrained, target_classes, seed=0):
    """Build a fine-tuning model from a pre-trained MiniCNN.

    Shared weights and adaptive affines come from the pre-trained model;
    both branches start from its state. Frozen statistics are set to the
    pre-trained running (population) statistics. The pre-trained
    classifier becomes the source head and a fresh target head is drawn.
    """
    cfg = pretrained.config
    new_cfg = ModelConfig(
        input_shape=cfg.input_shape, widths=cfg.widths,
        target_classes=target_classes, source_classes=cfg.target_classes,
        dtype=cfg.dtype, bn_eps=cfg.bn_eps, bn_momentum=cfg.bn_momentum)
    rng = np.random.default_rng(seed)
    model = MiniCNN(new_cfg, rng=rng)
    src = pretrained.state_dict()
    for name in model.conv_names():
        model.params[name].data = src[name].copy()
    for state in model.bn:
        p = state.prefix
        state.gamma_a.data = src[f"{p}.gamma_a"].copy()
        state.beta_a.data = src[f"{p}.beta_a"].copy()
        state.gamma_f.data = src[f"{p}.gamma_a"].copy()
        state.beta_f.data = src[f"{p}.beta_a"].copy()
        state.running_mean = src[f"{p}.running_mean"].copy()
        state.running_var = src[f"{p}.running_var"].copy()
        state.frozen_mean = src[f"{p}.running_mean"].copy()
        state.frozen_var = src[f"{p}.running_var"].copy()
    model.params["src_head.w"].data = src["head.w"].copy()
    model.params["src_head.b"].data = src["head.b"].copy()
    return model
