"""Network core: shared-weight per-group CNN backbone, feature
concatenation, optional reduction layer, MLP head and softmax, with
forward and gradient computation over a named parameter registry.

The backbone is a small reference CNN behind a config-driven interface:
stages of conv3x3 -> batch norm -> ReLU -> 2x2 max pool, then global
average pooling. Every group of a sample passes through the same weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers
from .errors import ConfigError
from .fusion import MotionFusedSample
from .seeding import derive_rng

FREEZE_POLICIES = ("none", "all_but_first")


@dataclass
class BackboneConfig:
    input_channels: int = 3
    stage_widths: tuple = (16, 32, 64, 128)
    kernel_size: int = 3
    input_side: int = 64
    bn_freeze_policy: str = "none"

    @property
    def feature_dim(self) -> int:
        return self.stage_widths[-1]

    def validate(self):
        if not self.stage_widths or any(w < 1 for w in self.stage_widths):
            raise ConfigError("stage_widths must be non-empty and positive")
        if self.kernel_size % 2 != 1:
            raise ConfigError("kernel_size must be odd")
        if self.input_side % (2 ** len(self.stage_widths)) != 0:
            raise ConfigError(
                f"input_side {self.input_side} not divisible by "
                f"2^{len(self.stage_widths)} stages of pooling")
        if self.bn_freeze_policy not in FREEZE_POLICIES:
            raise ConfigError(f"unknown bn_freeze_policy {self.bn_freeze_policy!r}")


@dataclass
class NetworkConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    n_groups: int = 4
    num_classes: int = 5
    reduction_units: int | None = None  # 2048-unit layer, required for N >= 8
    head_units: int = 512
    dropout: float = 0.3

    def validate(self):
        self.backbone.validate()
        if self.n_groups < 1 or self.num_classes < 2:
            raise ConfigError("need n_groups >= 1 and num_classes >= 2")
        if self.n_groups >= 8 and self.reduction_units is None:
            raise ConfigError(
                f"a reduction layer is required for n_groups={self.n_groups}")


def default_reduction_units(n_groups: int) -> int | None:
    return 2048 if n_groups >= 8 else None


@dataclass
class Prediction:
    probabilities: np.ndarray
    logits: np.ndarray


@dataclass
class NetworkParams:
    """Named registry of all learnable tensors plus batch-norm state."""

    tensors: dict[str, np.ndarray]

    def names(self):
        return list(self.tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        self.tensors[name] = value

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype


def is_state(name: str) -> bool:
    return name.endswith(".running_mean") or name.endswith(".running_var")


def frozen_names(config: NetworkConfig) -> set[str]:
    """BN tensors excluded from training by the freeze policy."""
    if config.backbone.bn_freeze_policy != "all_but_first":
        return set()
    out = set()
    for i in range(1, len(config.backbone.stage_widths)):
        out.add(f"stage{i}.bn.gamma")
        out.add(f"stage{i}.bn.beta")
    return out


def _stage_frozen(config: NetworkConfig, stage: int) -> bool:
    return config.backbone.bn_freeze_policy == "all_but_first" and stage > 0


def head_input_dim(config: NetworkConfig) -> int:
    return config.n_groups * config.backbone.feature_dim


def init_params(config: NetworkConfig, seed: int = 0,
                dtype=np.float32) -> NetworkParams:
    """He-initialized registry; BN scale 1, shift 0, running stats (0, 1)."""
    config.validate()
    rng = derive_rng(seed, "init")
    k = config.backbone.kernel_size
    tensors: dict[str, np.ndarray] = {}

    def he(shape, fan_in):
        return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)

    prev = config.backbone.input_channels
    for i, width in enumerate(config.backbone.stage_widths):
        tensors[f"stage{i}.conv.w"] = he((width, prev, k, k), prev * k * k)
        tensors[f"stage{i}.conv.b"] = np.zeros(width, dtype=dtype)
        tensors[f"stage{i}.bn.gamma"] = np.ones(width, dtype=dtype)
        tensors[f"stage{i}.bn.beta"] = np.zeros(width, dtype=dtype)
        tensors[f"stage{i}.bn.running_mean"] = np.zeros(width, dtype=dtype)
        tensors[f"stage{i}.bn.running_var"] = np.ones(width, dtype=dtype)
        prev = width

    dim = head_input_dim(config)
    if config.reduction_units is not None:
        tensors["reduce.w"] = he((dim, config.reduction_units), dim)
        tensors["reduce.b"] = np.zeros(config.reduction_units, dtype=dtype)
        dim = config.reduction_units
    tensors["fc1.w"] = he((dim, config.head_units), dim)
    tensors["fc1.b"] = np.zeros(config.head_units, dtype=dtype)
    tensors["fc2.w"] = he((config.head_units, config.num_classes), config.head_units)
    tensors["fc2.b"] = np.zeros(config.num_classes, dtype=dtype)
    return NetworkParams(tensors=tensors)


def _backbone_batch(x, params, config, mode, update_stats):
    """(B*, C, H, W) -> (B*, D) features plus per-stage caches."""
    t = params.tensors
    caches = []
    h = x
    for i in range(len(config.backbone.stage_widths)):
        bn_mode = "eval" if _stage_frozen(config, i) else mode
        h, c_conv = layers.conv2d_forward(h, t[f"stage{i}.conv.w"],
                                          t[f"stage{i}.conv.b"])
        h, c_bn, new_mean, new_var = layers.batchnorm_forward(
            h, t[f"stage{i}.bn.gamma"], t[f"stage{i}.bn.beta"],
            t[f"stage{i}.bn.running_mean"], t[f"stage{i}.bn.running_var"],
            bn_mode)
        if update_stats and bn_mode == "train":
            t[f"stage{i}.bn.running_mean"] = new_mean.astype(params.dtype)
            t[f"stage{i}.bn.running_var"] = new_var.astype(params.dtype)
        h, c_relu = layers.relu_forward(h)
        h, c_pool = layers.maxpool2_forward(h)
        caches.append((c_conv, c_bn, c_relu, c_pool))
    feats, c_gap = layers.global_avgpool_forward(h)
    return feats, (caches, c_gap)


def _backbone_batch_backward(dfeat, cache, params, config):
    caches, c_gap = cache
    grads = {}
    dh = layers.global_avgpool_backward(dfeat, c_gap)
    for i in range(len(config.backbone.stage_widths) - 1, -1, -1):
        c_conv, c_bn, c_relu, c_pool = caches[i]
        dh = layers.maxpool2_backward(dh, c_pool)
        dh = layers.relu_backward(dh, c_relu)
        dh, dgamma, dbeta = layers.batchnorm_backward(dh, c_bn)
        grads[f"stage{i}.bn.gamma"] = dgamma
        grads[f"stage{i}.bn.beta"] = dbeta
        dh, dw, db = layers.conv2d_backward(dh, c_conv)
        grads[f"stage{i}.conv.w"] = dw
        grads[f"stage{i}.conv.b"] = db
    return dh, grads


def _head_batch(feats, params, config, mode, dropout_rng):
    """(B, N*D) -> logits (B, C) with caches."""
    t = params.tensors
    h = feats
    c_reduce = None
    if config.reduction_units is not None:
        h, c_aff = layers.affine_forward(h, t["reduce.w"], t["reduce.b"])
        h, c_relu = layers.relu_forward(h)
        c_reduce = (c_aff, c_relu)
    h, c_drop = layers.dropout_forward(h, config.dropout, mode, dropout_rng)
    h, c_fc1 = layers.affine_forward(h, t["fc1.w"], t["fc1.b"])
    h, c_relu1 = layers.relu_forward(h)
    logits, c_fc2 = layers.affine_forward(h, t["fc2.w"], t["fc2.b"])
    return logits, (c_reduce, c_drop, c_fc1, c_relu1, c_fc2)


def _head_batch_backward(dlogits, cache, config):
    c_reduce, c_drop, c_fc1, c_relu1, c_fc2 = cache
    grads = {}
    dh, grads["fc2.w"], grads["fc2.b"] = layers.affine_backward(dlogits, c_fc2)
    dh = layers.relu_backward(dh, c_relu1)
    dh, grads["fc1.w"], grads["fc1.b"] = layers.affine_backward(dh, c_fc1)
    dh = layers.dropout_backward(dh, c_drop)
    if c_reduce is not None:
        c_aff, c_relu = c_reduce
        dh = layers.relu_backward(dh, c_relu)
        dh, grads["reduce.w"], grads["reduce.b"] = layers.affine_backward(dh, c_aff)
    return dh, grads


def forward_batch(x, params: NetworkParams, config: NetworkConfig, mode: str,
                  dropout_rng=None, update_stats: bool = False):
    """Full network on a batch. x is (B, N, C, H, W); returns (logits, cache)."""
    bsz, n, c, h, w = x.shape
    if n != config.n_groups:
        raise ValueError(f"expected {config.n_groups} groups, got {n}")
    if c != config.backbone.input_channels:
        raise ValueError(
            f"expected {config.backbone.input_channels} channels, got {c}")
    x = np.ascontiguousarray(x, dtype=params.dtype).reshape(bsz * n, c, h, w)
    feats, bb_cache = _backbone_batch(x, params, config, mode, update_stats)
    concat = feats.reshape(bsz, n * feats.shape[1])
    logits, head_cache = _head_batch(concat, params, config, mode, dropout_rng)
    return logits, (bb_cache, head_cache, (bsz, n, c, h, w))


def backward_batch(dlogits, cache, params, config):
    """Gradient registry for a forward_batch cache. Frozen and state tensors
    get zero gradients; names mirror the parameter registry."""
    bb_cache, head_cache, (bsz, n, c, h, w) = cache
    dconcat, head_grads = _head_batch_backward(dlogits, head_cache, config)
    dfeats = dconcat.reshape(bsz * n, -1)
    _, bb_grads = _backbone_batch_backward(dfeats, bb_cache, params, config)
    grads = {**bb_grads, **head_grads}
    frozen = frozen_names(config)
    out = {}
    for name, tensor in params.tensors.items():
        if is_state(name) or name in frozen or name not in grads:
            out[name] = np.zeros_like(tensor)
        else:
            out[name] = grads[name].astype(tensor.dtype, copy=False)
    return out


def loss_and_grads(x, targets, params, config, mode, dropout_rng=None,
                   update_stats=False, sample_weights=None):
    """Cross-entropy loss, probabilities and gradients for a batch."""
    logits, cache = forward_batch(x, params, config, mode, dropout_rng,
                                  update_stats)
    loss, probs, dlogits = layers.softmax_cross_entropy(
        logits, np.asarray(targets), sample_weights)
    grads = backward_batch(dlogits, cache, params, config)
    return loss, probs, grads


def backbone_forward(group, params, config, mode="eval"):
    """Feature vector of one (C, H, W) group."""
    feats, _ = _backbone_batch(group[None].astype(params.dtype, copy=False),
                               params, config, mode, update_stats=False)
    return feats[0]


def head_forward(features, params, config, mode="eval", rng=None) -> Prediction:
    """Classify one sample's N feature vectors (chronological order)."""
    feats = np.asarray(features, dtype=params.dtype)
    if feats.shape[0] != config.n_groups:
        raise ValueError(f"expected {config.n_groups} feature vectors, "
                         f"got {feats.shape[0]}")
    concat = feats.reshape(1, -1)
    logits, _ = _head_batch(concat, params, config, mode, rng)
    probs = layers.softmax(logits)
    return Prediction(probabilities=probs[0], logits=logits[0])


def forward(sample: MotionFusedSample, params, config, mode="eval",
            rng=None) -> Prediction:
    """Classify one MotionFusedSample (backbone shared across groups)."""
    x = sample.to_array()[None]
    logits, _ = forward_batch(x, params, config, mode, dropout_rng=rng)
    probs = layers.softmax(logits)
    return Prediction(probabilities=probs[0], logits=logits[0])


def backward(sample: MotionFusedSample, target_class: int, params, config,
             mode="eval", rng=None):
    """Gradient registry of the cross-entropy loss for one sample."""
    x = sample.to_array()[None]
    logits, cache = forward_batch(x, params, config, mode, dropout_rng=rng)
    _, _, dlogits = layers.softmax_cross_entropy(
        logits, np.asarray([target_class]))
    return backward_batch(dlogits, cache, params, config)
